"""ISS / incremental-ISS certificate for NNARX models, plus empirical probes.

A model is certified when the product of the spectral norms of the state
weights ``U_0 ... U_M`` is strictly below ``1 / (prod(L_sigma) * sqrt(N))``.
The probes do not prove anything; they exercise the Lyapunov function
``V(x) = x' P x`` with ``P = diag(I, 2I, ..., N I)`` and the contraction of
trajectory pairs so a certificate can be sanity-checked numerically.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .exceptions import ConvergenceFailure, InvalidArgument, InvalidModel
from .model import (
    FfnnParams,
    Layer,
    NnarxModel,
    build_canonical_matrices,
    ffnn_forward,
)

SPECTRAL_TOL = 1e-10
SPECTRAL_MAX_ITER = 10_000


def spectral_norm(mat, tol=SPECTRAL_TOL, max_iter=SPECTRAL_MAX_ITER, seed=0, v0=None,
                  return_vectors=False):
    """Largest singular value by power iteration on the Gram matrix.

    Iterates on whichever of ``M'M`` / ``MM'`` is smaller and stops once the
    eigen-residual ``||G v - lam v||`` falls below ``tol * lam``.  The start
    vector is drawn from ``seed`` unless ``v0`` is given (warm start).

    With ``return_vectors=True`` returns ``(sigma, u, v)`` such that
    ``M v = sigma u``; ``u v'`` is then the gradient of ``||M||`` w.r.t. ``M``.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2:
        raise InvalidArgument(f"expected a matrix, got shape {mat.shape}")
    if not tol > 0:
        raise InvalidArgument("tol must be positive")
    if not np.all(np.isfinite(mat)):
        raise InvalidArgument("matrix has non-finite entries")
    rows, cols = mat.shape
    if mat.size == 0 or not np.any(mat):
        u, v = np.zeros(rows), np.zeros(cols)
        if rows:
            u[0] = 1.0
        if cols:
            v[0] = 1.0
        return (0.0, u, v) if return_vectors else 0.0

    wide = rows < cols
    G = mat @ mat.T if wide else mat.T @ mat
    dim = G.shape[0]
    if v0 is not None and np.shape(v0) == (dim,) and np.linalg.norm(v0) > 0:
        w = np.array(v0, dtype=float)
    else:
        w = np.random.default_rng(seed).standard_normal(dim)
    w /= np.linalg.norm(w)

    lam = 0.0
    res = np.inf
    for _ in range(max_iter):
        Gw = G @ w
        lam = float(w @ Gw)
        res = np.linalg.norm(Gw - lam * w)
        if lam <= 0.0:
            # start vector in the null space; restart from a fresh direction
            w = np.random.default_rng(seed + 1).standard_normal(dim)
            w /= np.linalg.norm(w)
            continue
        if res <= tol * lam:
            break
        w = Gw / np.linalg.norm(Gw)
    else:
        raise ConvergenceFailure(
            f"power iteration did not converge in {max_iter} iterations (residual {res:.3e})",
            estimate=float(np.sqrt(max(lam, 0.0))),
            residual=float(res),
        )

    sigma = float(np.sqrt(lam))
    if not return_vectors:
        return sigma
    if wide:
        u = w
        v = mat.T @ u / sigma
    else:
        v = w
        u = mat @ v / sigma
    return sigma, u, v


def robust_spectral_norm(mat, tol=SPECTRAL_TOL, max_iter=500, v0=None, return_vectors=False):
    """Power iteration, falling back to a dense SVD when it does not converge.

    Stability-penalized training flattens the top of the spectrum of the
    state weights, and power iteration crawls on (nearly) repeated top
    singular values.  Any top singular pair is a valid subgradient there.
    """
    try:
        return spectral_norm(mat, tol, max_iter, v0=v0, return_vectors=return_vectors)
    except ConvergenceFailure:
        U, s, Vt = np.linalg.svd(np.asarray(mat, dtype=float))
        if return_vectors:
            return float(s[0]), U[:, 0], Vt[0]
        return float(s[0])


def _state_norms(params: FfnnParams, tol=SPECTRAL_TOL):
    """``[||U_0||, ||U_1||, ..., ||U_M||]``."""
    return [robust_spectral_norm(params.U0, tol)] + [robust_spectral_norm(layer.U, tol) for layer in params.layers]


def compute_constants(params: FfnnParams, tol=SPECTRAL_TOL):
    """Lipschitz-type constants ``(K_x, K_u, K_b)`` of the network.

    ``K_x`` bounds the gain from the state, ``K_u`` from the current input
    and ``K_b`` from the biases.
    """
    out = robust_spectral_norm(params.U0, tol)
    K_x = out
    K_u = 0.0
    K_b = 0.0
    layers = params.layers
    gains = [layer.lipschitz * robust_spectral_norm(layer.U, tol) for layer in layers]
    for i, layer in enumerate(layers):
        tail = float(np.prod(gains[i + 1:])) if i + 1 < len(layers) else 1.0
        K_u += tail * layer.lipschitz * robust_spectral_norm(layer.W, tol)
        K_b += tail * layer.lipschitz
    K_x *= float(np.prod(gains))
    return K_x, out * K_u, out * K_b


def stability_threshold(params: FfnnParams, N):
    return float(1.0 / (np.prod([layer.lipschitz for layer in params.layers]) * np.sqrt(N)))


def stability_residual(model: NnarxModel, tol=SPECTRAL_TOL):
    """Residual ``nu = prod ||U_i|| - 1/(prod L_i * sqrt(N))``; ``nu < 0`` certifies."""
    return float(np.prod(_state_norms(model.ffnn, tol))) - stability_threshold(model.ffnn, model.N)


class Verdict(str, enum.Enum):
    CERTIFIED = "CertifiedIssAndDeltaIss"
    NOT_CERTIFIED = "NotCertified"


@dataclass(frozen=True)
class CertificateReport:
    N: int
    norms: tuple  # ||U_0||, ||U_1||, ..., ||U_M||
    lipschitz: tuple  # L_1 ... L_M
    lipschitz_product: float
    weight_product: float
    threshold: float
    nu: float
    margin: float
    verdict: Verdict
    K_x: float
    K_u: float
    K_b: float

    @property
    def certified(self):
        return self.verdict is Verdict.CERTIFIED

    def to_dict(self):
        d = asdict(self)
        d["norms"] = list(self.norms)
        d["lipschitz"] = list(self.lipschitz)
        d["verdict"] = self.verdict.value
        d["certified"] = self.certified
        return d

    def format_table(self):
        rows = [("look-back horizon N", f"{self.N}")]
        rows += [(f"||U_{i}||", f"{v:.6f}") for i, v in enumerate(self.norms)]
        rows += [
            ("prod L_sigma", f"{self.lipschitz_product:.6f}"),
            ("prod ||U_i||", f"{self.weight_product:.6f}"),
            ("threshold", f"{self.threshold:.6f}"),
            ("nu", f"{self.nu:+.6f}"),
            ("margin", f"{self.margin:g}"),
            ("K_x", f"{self.K_x:.6f}"),
            ("K_u", f"{self.K_u:.6f}"),
            ("K_b", f"{self.K_b:.6f}"),
        ]
        if self.certified:
            verdict = "certified: ISS and incrementally ISS"
        else:
            verdict = "not certified (condition is sufficient, not necessary)"
        rows.append(("verdict", verdict))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def certify(model: NnarxModel, margin=0.0, tol=SPECTRAL_TOL) -> CertificateReport:
    """Evaluate the weight condition; certified iff ``nu < -margin``."""
    if margin < 0:
        raise InvalidArgument("margin must be nonnegative")
    if not model.ffnn.is_finite():
        raise InvalidModel("model has non-finite weights")
    norms = _state_norms(model.ffnn, tol)
    lips = tuple(layer.lipschitz for layer in model.ffnn.layers)
    lip_prod = float(np.prod(lips))
    weight_prod = float(np.prod(norms))
    threshold = stability_threshold(model.ffnn, model.N)
    nu = float(weight_prod - threshold)
    K_x, K_u, K_b = compute_constants(model.ffnn, tol)
    return CertificateReport(
        N=model.N,
        norms=tuple(norms),
        lipschitz=lips,
        lipschitz_product=lip_prod,
        weight_product=weight_prod,
        threshold=threshold,
        nu=nu,
        margin=float(margin),
        verdict=Verdict.CERTIFIED if nu < -margin else Verdict.NOT_CERTIFIED,
        K_x=K_x,
        K_u=K_u,
        K_b=K_b,
    )


def lyapunov_matrix(N, m, p):
    """``P = diag(I, 2I, ..., N I)`` with ``(m+p)``-sized identity blocks.

    Solves ``A'PA - P = -I`` for the canonical shift matrix; the identity
    is checked in integer arithmetic before returning.
    """
    nb = m + p
    A = build_canonical_matrices(N, m, p).A.astype(np.int64)
    diag = np.repeat(np.arange(1, N + 1, dtype=np.int64), nb)
    P = np.diag(diag)
    if np.any(A.T @ P @ A - P + np.eye(N * nb, dtype=np.int64)):
        raise AssertionError("internal error: P does not solve A'PA - P = -I")
    return P.astype(float)


def lyapunov_weights(N, m, p):
    """Diagonal of ``P`` as a float vector."""
    return np.repeat(np.arange(1, N + 1, dtype=float), m + p)


@dataclass(frozen=True)
class ProbeRecord:
    """One-step change of ``V_d(x_a, x_b) = (x_a - x_b)' P (x_a - x_b)``.

    ``bound`` is ``-|dx|^2 + N|du|^2 + N|df|^2`` (exact up to rounding) and
    ``lipschitz_bound`` replaces ``|df|`` by ``K_x|dx| + K_u|du|``.
    """

    v_before: float
    v_after: float
    delta_v: float
    bound: float
    lipschitz_bound: float

    @property
    def slack(self):
        return self.bound - self.delta_v


def _require_certified(model, override):
    if not override and stability_residual(model) >= 0:
        raise InvalidArgument("model is not certified; pass override=True to probe it anyway")


def lyapunov_decrease_probe(model: NnarxModel, x_a, x_b, u_a, u_b, override=False,
                            constants=None) -> ProbeRecord:
    _require_certified(model, override)
    x_a, x_b = np.asarray(x_a, dtype=float), np.asarray(x_b, dtype=float)
    u_a = np.atleast_1d(np.asarray(u_a, dtype=float))
    u_b = np.atleast_1d(np.asarray(u_b, dtype=float))
    if x_a.shape != (model.n,) or x_b.shape != (model.n,):
        raise InvalidArgument(f"states must have shape ({model.n},)")
    if u_a.shape != (model.m,) or u_b.shape != (model.m,):
        raise InvalidArgument(f"inputs must have shape ({model.m},)")
    w = lyapunov_weights(model.N, model.m, model.p)
    nb = model.m + model.p
    f_a = ffnn_forward(model.ffnn, x_a, u_a)
    f_b = ffnn_forward(model.ffnn, x_b, u_b)

    dx = x_a - x_b
    du = u_a - u_b
    df = f_a - f_b
    dx_next = np.concatenate([dx[nb:], df, du])
    v_before = float(dx @ (w * dx))
    v_after = float(dx_next @ (w * dx_next))

    N = model.N
    ndx2, ndu2 = float(dx @ dx), float(du @ du)
    bound = -ndx2 + N * ndu2 + N * float(df @ df)
    K_x, K_u, _ = constants if constants is not None else compute_constants(model.ffnn)
    lip = -ndx2 + N * ndu2 + N * (K_x * np.sqrt(ndx2) + K_u * np.sqrt(ndu2)) ** 2
    return ProbeRecord(v_before, v_after, v_after - v_before, bound, float(lip))


@dataclass(frozen=True)
class ProbeTrace:
    """State distances ``||x_a,k - x_b,k||`` for ``k = 0..K``.

    ``diverged_at`` is the step at which a state became non-finite or the
    distance exceeded the divergence threshold (the trace stops there).
    """

    distances: np.ndarray
    diverged_at: Optional[int] = None

    @property
    def diverged(self):
        return self.diverged_at is not None

    def ratio(self):
        """Final distance over initial distance (per pair when batched)."""
        d0 = self.distances[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(d0 > 0, self.distances[-1] / np.where(d0 > 0, d0, 1.0), 0.0)


def contraction_probe(model: NnarxModel, x_a0, x_b0, u_seq, horizon=None,
                      divergence_threshold=1e12) -> ProbeTrace:
    """Simulate two trajectories under the same inputs and record their distance.

    ``x_a0``/``x_b0`` may be single states ``(n,)`` or batches ``(K, n)``;
    distances then have shape ``(horizon + 1, K)``.  Instability is reported
    through :attr:`ProbeTrace.diverged_at` rather than raised.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim == 1:
        u_seq = u_seq[:, None]
    if u_seq.shape[1] != model.m:
        raise InvalidArgument(f"input sequence must have {model.m} channels")
    horizon = u_seq.shape[0] if horizon is None else int(horizon)
    if horizon < 1 or horizon > u_seq.shape[0]:
        raise InvalidArgument(f"horizon must be in [1, {u_seq.shape[0]}], got {horizon}")
    xa = np.array(x_a0, dtype=float)
    xb = np.array(x_b0, dtype=float)
    if xa.shape != xb.shape or xa.shape[-1] != model.n or xa.ndim > 2:
        raise InvalidArgument(f"initial states must both have shape (n,) or (K, n) with n={model.n}")
    nb, m = model.m + model.p, model.m

    dists = [np.linalg.norm(xa - xb, axis=-1)]
    diverged_at = None
    for k in range(horizon):
        u = np.broadcast_to(u_seq[k], xa.shape[:-1] + (m,))
        fa = ffnn_forward(model.ffnn, xa, u)
        fb = ffnn_forward(model.ffnn, xb, u)
        xa = np.concatenate([xa[..., nb:], fa, u], axis=-1)
        xb = np.concatenate([xb[..., nb:], fb, u], axis=-1)
        with np.errstate(over="ignore", invalid="ignore"):
            d = np.linalg.norm(xa - xb, axis=-1)
        if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(xb))) or np.any(~(d <= divergence_threshold)):
            diverged_at = k
            break
        dists.append(d)
    return ProbeTrace(np.array(dists), diverged_at)


def scale_to_residual(params: FfnnParams, N, nu):
    """Rescale every state weight by a common factor so the residual equals ``nu``.

    Requires ``nu > -threshold`` (the product of norms must stay positive).
    """
    norms = _state_norms(params)
    prod = float(np.prod(norms))
    target = stability_threshold(params, N) + nu
    if prod == 0 or target <= 0:
        raise InvalidArgument("cannot reach the requested residual")
    c = (target / prod) ** (1.0 / len(norms))
    arrays = params.arrays()
    for i in range(params.depth):
        arrays[3 * i + 1] = arrays[3 * i + 1] * c
    arrays[-2] = arrays[-2] * c
    return params.with_arrays(arrays)


def explosive_demo_model(gain=2.0):
    """Scalar model with ``f(x, u) = gain * y``: unstable for ``|gain| > 1``.

    Built from identity activations so nothing saturates; used to show that
    the contraction probe does detect instability.
    """
    layer = Layer(W=[[0.0]], U=[[gain, 0.0]], b=[0.0], activation="identity")
    return NnarxModel(FfnnParams((layer,), U0=[[1.0]], b0=[0.0]), N=1)
