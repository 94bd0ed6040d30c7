"""Neural NARX models in normal canonical state-space form.

The state ``x_k`` stacks the ``N`` most recent input/output pairs as blocks
``z_i = [y_{k-N+i}; u_{k-N-1+i}]`` (oldest first).  One step of the model
shifts every block up by one slot and writes ``[f(x_k, u_k); u_k]`` into the
newest block, where ``f`` is a feed-forward network with a direct input
feed-through at every layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import InvalidArgument, InvalidModel, NormalizationError, NumericDivergence

__all__ = [
    "Activation",
    "register_activation",
    "get_activation",
    "Layer",
    "FfnnParams",
    "NormalizationStats",
    "NnarxModel",
    "CanonicalMatrices",
    "build_canonical_matrices",
    "stack_state",
    "unstack_state",
    "ffnn_forward",
    "step",
    "simulate_open_loop",
]


@dataclass(frozen=True)
class Activation:
    """A zero-centred, Lipschitz activation function.

    ``grad`` receives the pre-activation ``a`` and the output ``h = fn(a)``
    and returns the elementwise derivative.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float


_REGISTRY: dict[str, Activation] = {}


def register_activation(name, fn, grad, lipschitz, overwrite=False):
    """Register a custom activation under ``name``.

    The certificate uses ``lipschitz`` verbatim, so it must be a valid
    Lipschitz constant of ``fn``; only ``fn(0) == 0`` is checked here.
    """
    if not lipschitz > 0 or not np.isfinite(lipschitz):
        raise InvalidArgument(f"lipschitz constant must be positive and finite, got {lipschitz}")
    if float(np.asarray(fn(np.zeros(1)))[0]) != 0.0:
        raise InvalidArgument(f"activation {name!r} is not zero-centred")
    if name in _REGISTRY and not overwrite:
        raise InvalidArgument(f"activation {name!r} already registered")
    act = Activation(name, fn, grad, float(lipschitz))
    _REGISTRY[name] = act
    return act


def get_activation(name) -> Activation:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise InvalidArgument(
            f"unknown activation {name!r}; registered: {sorted(_REGISTRY)}"
        ) from None


register_activation("tanh", np.tanh, lambda a, h: 1.0 - h * h, 1.0)
register_activation("identity", lambda a: np.array(a, dtype=float, copy=True), lambda a, h: np.ones_like(a), 1.0)
register_activation("relu", lambda a: np.maximum(a, 0.0), lambda a, h: (a > 0).astype(float), 1.0)


def _frozen(a, ndim, what):
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise InvalidModel(f"{what} must be {ndim}-D, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Layer:
    """One hidden layer: ``sigma(W u + U h_prev + b)``."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "W", _frozen(self.W, 2, "W"))
        object.__setattr__(self, "U", _frozen(self.U, 2, "U"))
        object.__setattr__(self, "b", _frozen(self.b, 1, "b"))
        get_activation(self.activation)
        h = self.b.shape[0]
        if self.W.shape[0] != h or self.U.shape[0] != h:
            raise InvalidModel(
                f"layer rows disagree: W {self.W.shape}, U {self.U.shape}, b {self.b.shape}"
            )

    @property
    def width(self):
        return self.b.shape[0]

    @property
    def lipschitz(self):
        return get_activation(self.activation).lipschitz


@dataclass(frozen=True)
class FfnnParams:
    """Weights of the regression network ``f(x, u)``.

    ``layers`` runs from the layer fed by the state to the last hidden layer;
    ``U0`` and ``b0`` form the linear read-out.
    """

    layers: tuple
    U0: np.ndarray
    b0: np.ndarray

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidModel("at least one hidden layer is required")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "U0", _frozen(self.U0, 2, "U0"))
        object.__setattr__(self, "b0", _frozen(self.b0, 1, "b0"))
        m = layers[0].W.shape[1]
        for i, layer in enumerate(layers):
            if layer.W.shape[1] != m:
                raise InvalidModel(f"layer {i + 1}: W has {layer.W.shape[1]} columns, expected {m}")
            if i > 0 and layer.U.shape[1] != layers[i - 1].width:
                raise InvalidModel(
                    f"layer {i + 1}: U has {layer.U.shape[1]} columns, previous layer has width "
                    f"{layers[i - 1].width}"
                )
        if self.U0.shape[1] != layers[-1].width:
            raise InvalidModel(f"U0 has {self.U0.shape[1]} columns, last layer has width {layers[-1].width}")
        if self.U0.shape[0] != self.b0.shape[0]:
            raise InvalidModel(f"U0 rows {self.U0.shape[0]} != b0 length {self.b0.shape[0]}")

    @property
    def n_inputs(self):
        return self.layers[0].W.shape[1]

    @property
    def n_outputs(self):
        return self.U0.shape[0]

    @property
    def state_dim(self):
        return self.layers[0].U.shape[1]

    @property
    def depth(self):
        return len(self.layers)

    def arrays(self):
        """Flat list ``[W_1, U_1, b_1, ..., W_M, U_M, b_M, U0, b0]``."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.U, layer.b]
        return out + [self.U0, self.b0]

    def array_names(self):
        names = []
        for i in range(1, self.depth + 1):
            names += [f"W{i}", f"U{i}", f"b{i}"]
        return names + ["U0", "b0"]

    def with_arrays(self, arrays):
        """Return a copy with the weights replaced, in :meth:`arrays` order."""
        arrays = list(arrays)
        if len(arrays) != 3 * self.depth + 2:
            raise InvalidArgument(f"expected {3 * self.depth + 2} arrays, got {len(arrays)}")
        layers = tuple(
            Layer(arrays[3 * i], arrays[3 * i + 1], arrays[3 * i + 2], layer.activation)
            for i, layer in enumerate(self.layers)
        )
        return FfnnParams(layers, arrays[-2], arrays[-1])

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel mean and maximum absolute deviation."""

    u_mean: np.ndarray
    u_dev: np.ndarray
    y_mean: np.ndarray
    y_dev: np.ndarray

    def __post_init__(self):
        for name in ("u_mean", "u_dev", "y_mean", "y_dev"):
            object.__setattr__(self, name, _frozen(np.atleast_1d(getattr(self, name)), 1, name))
        if self.u_mean.shape != self.u_dev.shape or self.y_mean.shape != self.y_dev.shape:
            raise NormalizationError("mean and deviation shapes disagree")
        if np.any(~(self.u_dev > 0)) or np.any(~(self.y_dev > 0)):
            raise NormalizationError("deviations must be strictly positive")

    @classmethod
    def identity(cls, m, p):
        return cls(np.zeros(m), np.ones(m), np.zeros(p), np.ones(p))

    @classmethod
    def from_data(cls, u_seqs, y_seqs):
        """Fit statistics on a list of ``(T, m)`` input and ``(T, p)`` output arrays."""
        u = np.concatenate([np.asarray(s, dtype=float).reshape(len(s), -1) for s in u_seqs])
        y = np.concatenate([np.asarray(s, dtype=float).reshape(len(s), -1) for s in y_seqs])
        u_mean, y_mean = u.mean(axis=0), y.mean(axis=0)
        u_dev = np.abs(u - u_mean).max(axis=0)
        y_dev = np.abs(y - y_mean).max(axis=0)
        if np.any(u_dev == 0) or np.any(y_dev == 0):
            raise NormalizationError("a channel has zero variation in the training data")
        return cls(u_mean, u_dev, y_mean, y_dev)

    @property
    def m(self):
        return self.u_mean.shape[0]

    @property
    def p(self):
        return self.y_mean.shape[0]

    def normalize_u(self, u):
        return (np.asarray(u, dtype=float) - self.u_mean) / self.u_dev

    def normalize_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_dev

    def denormalize_u(self, u):
        return np.asarray(u, dtype=float) * self.u_dev + self.u_mean

    def denormalize_y(self, y):
        return np.asarray(y, dtype=float) * self.y_dev + self.y_mean


@dataclass(frozen=True)
class NnarxModel:
    """An FFNN regression function together with its look-back horizon.

    The network operates on normalized signals; ``norm`` converts to and
    from physical units.
    """

    ffnn: FfnnParams
    N: int
    norm: NormalizationStats = field(default=None)

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise InvalidModel(f"look-back horizon must be a positive integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        m, p = self.ffnn.n_inputs, self.ffnn.n_outputs
        if self.ffnn.state_dim != (m + p) * self.N:
            raise InvalidModel(
                f"first layer expects a state of width {self.ffnn.state_dim}, "
                f"but (m+p)*N = {(m + p) * self.N}"
            )
        if self.norm is None:
            object.__setattr__(self, "norm", NormalizationStats.identity(m, p))
        elif self.norm.m != m or self.norm.p != p:
            raise InvalidModel("normalization statistics do not match the model's channel counts")

    @property
    def m(self):
        return self.ffnn.n_inputs

    @property
    def p(self):
        return self.ffnn.n_outputs

    @property
    def n(self):
        return (self.m + self.p) * self.N

    def zero_state(self):
        return np.zeros(self.n)


@dataclass(frozen=True)
class CanonicalMatrices:
    A: np.ndarray
    B_u: np.ndarray
    B_x: np.ndarray
    C: np.ndarray


def _check_dims(N, m, p):
    for name, v in (("N", N), ("m", m), ("p", p)):
        if int(v) != v or v < 1:
            raise InvalidArgument(f"{name} must be a positive integer, got {v}")


def build_canonical_matrices(N, m, p) -> CanonicalMatrices:
    """Dense ``A``, ``B_u``, ``B_x`` and ``C`` of the canonical form.

    Only used for analysis and as a reference for the block-wise fast path
    in :func:`step`.
    """
    _check_dims(N, m, p)
    nb = m + p
    n = nb * N
    A = np.zeros((n, n))
    for i in range(N - 1):
        A[i * nb:(i + 1) * nb, (i + 1) * nb:(i + 2) * nb] = np.eye(nb)
    B_u = np.zeros((n, m))
    B_u[n - m:, :] = np.eye(m)
    B_x = np.zeros((n, p))
    B_x[n - nb:n - m, :] = np.eye(p)
    C = np.zeros((p, n))
    C[:, n - nb:n - m] = np.eye(p)
    return CanonicalMatrices(A, B_u, B_x, C)


def stack_state(past_y, past_u):
    """Build the canonical state from ``N`` past outputs and inputs.

    Both sequences are ordered oldest to newest; ``past_y[i]`` is paired with
    the input applied one step before it was measured.
    """
    past_y = np.asarray(past_y, dtype=float)
    past_u = np.asarray(past_u, dtype=float)
    if past_y.ndim == 1:
        past_y = past_y[:, None]
    if past_u.ndim == 1:
        past_u = past_u[:, None]
    if past_y.ndim != 2 or past_u.ndim != 2:
        raise InvalidArgument("histories must be sequences of vectors")
    if past_y.shape[0] != past_u.shape[0] or past_y.shape[0] == 0:
        raise InvalidArgument(
            f"need the same nonzero number of outputs and inputs, got {past_y.shape[0]} and {past_u.shape[0]}"
        )
    return np.hstack([past_y, past_u]).ravel()


def unstack_state(x, m, p):
    """Inverse of :func:`stack_state`: return ``(past_y, past_u)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] % (m + p):
        raise InvalidArgument(f"state of length {x.shape} is not a multiple of m+p={m + p}")
    blocks = x.reshape(-1, m + p)
    return blocks[:, :p].copy(), blocks[:, p:].copy()


def ffnn_forward(params: FfnnParams, x, u):
    """Evaluate the regression network.  Accepts single samples or batches."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != params.state_dim:
        raise InvalidArgument(f"state has width {x.shape[-1]}, network expects {params.state_dim}")
    if u.shape[-1] != params.n_inputs:
        raise InvalidArgument(f"input has width {u.shape[-1]}, network expects {params.n_inputs}")
    h = x
    for layer in params.layers:
        h = get_activation(layer.activation).fn((u @ layer.W.T + layer.b) + h @ layer.U.T)
    return h @ params.U0.T + params.b0


def _as_input(model, u):
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (model.m,):
        raise InvalidArgument(f"input must have shape ({model.m},), got {u.shape}")
    return u


def _as_state(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n,):
        raise InvalidArgument(f"state must have shape ({model.n},), got {x.shape}")
    return x


def _shift(x, f, u, nb, m):
    x_next = np.empty_like(x)
    x_next[:-nb] = x[nb:]
    x_next[-nb:-m] = f
    x_next[-m:] = u
    return x_next


def step(model: NnarxModel, x, u):
    """Advance one step.

    Returns ``(x_next, y)`` where ``y = C x`` is the output held in the
    *current* state, not the prediction written into ``x_next``.
    """
    x = _as_state(model, x)
    u = _as_input(model, u)
    f = ffnn_forward(model.ffnn, x, u)
    nb = model.m + model.p
    y = x[-nb:-model.m].copy()
    return _shift(x, f, u, nb, model.m), y


def rollout(params: FfnnParams, N, x0, u_seq, cache=False):
    """Open-loop simulation on normalized signals.

    Returns the ``(T, p)`` predictions; with ``cache=True`` also the visited
    states and per-layer pre-activations/outputs needed for backpropagation.
    Raises :class:`NumericDivergence` on the first non-finite prediction.
    """
    m, p = params.n_inputs, params.n_outputs
    nb = m + p
    T = u_seq.shape[0]
    acts = [get_activation(layer.activation).fn for layer in params.layers]
    Ws = [layer.W for layer in params.layers]
    UsT = [layer.U.T for layer in params.layers]
    bs = [layer.b for layer in params.layers]
    U0T, b0 = params.U0.T, params.b0
    # input contributions for all time steps at once
    Wu = [u_seq @ W.T + b for W, b in zip(Ws, bs)]
    F = np.empty((T, p))
    if cache:
        X = np.empty((T, x0.shape[0]))
        Apre = [np.empty((T, W.shape[0])) for W in Ws]
        H = [np.empty((T, W.shape[0])) for W in Ws]
    x = np.array(x0, dtype=float)
    M = len(Ws)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(T):
            h = x
            if cache:
                X[k] = x
            for i in range(M):
                a = Wu[i][k] + h @ UsT[i]
                h = acts[i](a)
                if cache:
                    Apre[i][k] = a
                    H[i][k] = h
            f = h @ U0T + b0
            if not np.all(np.isfinite(f)):
                raise NumericDivergence(f"non-finite prediction at step {k}", step=k)
            F[k] = f
            x = _shift(x, f, u_seq[k], nb, m)
    if cache:
        return F, {"X": X, "A": Apre, "H": H, "x_final": x}
    return F


def simulate_open_loop(model: NnarxModel, x0, u_seq):
    """Free-run the model from ``x0`` over ``u_seq``.

    Element ``k`` of the result is the prediction written by step ``k``,
    i.e. the output after ``u_seq[k]`` has been applied.  Signals are in the
    model's normalized units.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim == 1:
        u_seq = u_seq[:, None] if model.m == 1 else u_seq[None, :]
    if u_seq.ndim != 2 or u_seq.shape[1] != model.m:
        raise InvalidArgument(f"input sequence must have shape (T, {model.m}), got {u_seq.shape}")
    if u_seq.shape[0] == 0:
        raise InvalidArgument("input sequence is empty")
    x0 = _as_state(model, x0)
    return rollout(model.ffnn, model.N, x0, u_seq)
