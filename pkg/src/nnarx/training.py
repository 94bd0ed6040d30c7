"""Output-error training of NNARX models with a stability penalty.

The loss of one trajectory is the mean squared simulation error after a
washout window, computed on a free-running simulation, plus a hinge penalty
on the stability residual ``nu``.  Gradients are obtained by
backpropagation through the unrolled simulation and the penalty
subgradient goes through the power-iteration singular vectors.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .exceptions import ConfigError, InvalidArgument, NumericDivergence, TrainingFailure
from .model import FfnnParams, Layer, NnarxModel, get_activation, rollout
from .stability import (
    SPECTRAL_TOL,
    certify,
    robust_spectral_norm,
    stability_threshold,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PenaltyConfig:
    """Hinge ``rho(nu) = weight * max(0, nu + margin)``."""

    weight: float = 10.0
    margin: float = 0.01

    def __post_init__(self):
        if self.weight < 0 or self.margin < 0:
            raise ConfigError("penalty weight and margin must be nonnegative")


def penalty_rho(nu, cfg: PenaltyConfig):
    if nu <= -cfg.margin:
        return 0.0
    return cfg.weight * (nu + cfg.margin)


def penalty_slope(nu, cfg: PenaltyConfig):
    """Subgradient of :func:`penalty_rho`; the kink takes the right slope."""
    return cfg.weight if nu >= -cfg.margin else 0.0


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a model to be trained."""

    N: int = 4
    widths: tuple = (10,)
    activations: tuple = ("tanh",)
    init_ratio: float = 0.5  # initial prod ||U_i|| as a fraction of the threshold

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        acts = tuple(self.activations)
        if len(acts) == 1 and len(self.widths) > 1:
            acts = acts * len(self.widths)
        object.__setattr__(self, "activations", acts)
        if self.N < 1 or not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("N and every layer width must be positive")
        if len(acts) != len(self.widths):
            raise ConfigError("one activation per layer is required")
        for a in acts:
            get_activation(a)
        if not 0 < self.init_ratio < 1:
            raise ConfigError("init_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    max_epochs: int = 1500
    washout: int = 20
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    early_stopping_patience: int = 200
    seed: int = 0
    clip_norm: Optional[float] = 1.0
    init_state_scale: float = 1.0
    max_retries: int = 3

    def __post_init__(self):
        if isinstance(self.penalty, dict):
            object.__setattr__(self, "penalty", PenaltyConfig(**self.penalty))
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.rmsprop_decay < 1:
            raise ConfigError("rmsprop_decay must lie in (0, 1)")
        if not self.rmsprop_epsilon > 0:
            raise ConfigError("rmsprop_epsilon must be positive")
        if self.max_epochs < 0 or self.washout < 0:
            raise ConfigError("max_epochs and washout must be nonnegative")
        if self.early_stopping_patience < 1:
            raise ConfigError("early_stopping_patience must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive or None")

    def to_dict(self):
        return asdict(self)


def init_params(spec: ModelSpec, m, p, rng) -> FfnnParams:
    """Uniform initialization, rescaled so the model starts certified.

    Every state matrix ``U_i`` is scaled by a common factor so that
    ``prod ||U_i||`` equals ``spec.init_ratio`` times the stability threshold.
    """
    n = (m + p) * spec.N
    layers = []
    fan_in = n
    for width, act in zip(spec.widths, spec.activations):
        r = np.sqrt(6.0 / (fan_in + m + width))
        W = rng.uniform(-r, r, (width, m))
        U = rng.uniform(-r, r, (width, fan_in))
        b = rng.uniform(-r, r, width) * 0.1
        layers.append(Layer(W, U, b, act))
        fan_in = width
    r = np.sqrt(6.0 / (fan_in + p))
    U0 = rng.uniform(-r, r, (p, fan_in))
    b0 = np.zeros(p)
    params = FfnnParams(tuple(layers), U0, b0)

    norms = [robust_spectral_norm(U0)] + [robust_spectral_norm(layer.U) for layer in params.layers]
    target = spec.init_ratio * stability_threshold(params, spec.N)
    c = (target / float(np.prod(norms))) ** (1.0 / len(norms))
    arrays = params.arrays()
    for i in range(params.depth):
        arrays[3 * i + 1] = arrays[3 * i + 1] * c
    arrays[-2] = arrays[-2] * c
    return params.with_arrays(arrays)


def _check_trajectory(u_seq, y_seq, m, p, washout):
    u = np.asarray(u_seq, dtype=float)
    y = np.asarray(y_seq, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if u.shape[1] != m or y.shape[1] != p:
        raise InvalidArgument(f"trajectory channels {u.shape[1]}/{y.shape[1]} do not match model {m}/{p}")
    if u.shape[0] != y.shape[0]:
        raise InvalidArgument("input and output sequences differ in length")
    if u.shape[0] <= washout:
        raise InvalidArgument(f"trajectory of length {u.shape[0]} is not longer than the washout {washout}")
    return u, y


def _data_loss_and_grad(params: FfnnParams, N, u, y, washout, x0, need_grad=True, backend="auto"):
    """Windowed MSE of one trajectory and its gradient w.r.t. ``params.arrays()``.

    The window holds the ``T - washout`` predictions ``k = washout .. T-1``.
    ``backend="numpy"`` forces the pure-numpy reference implementation.
    """
    packed = _kernels.pack(params) if backend == "auto" else None
    if packed is None:
        return _data_loss_and_grad_numpy(params, N, u, y, washout, x0, need_grad)
    value, status, *g = _kernels.loss_grad(
        np.ascontiguousarray(u), np.ascontiguousarray(y), np.array(x0, dtype=float), washout, N,
        *packed, need_grad
    )
    if status >= 0:
        raise NumericDivergence(f"non-finite prediction at step {status}", step=int(status))
    return value, (_kernels.unpack_grads(params, *g) if need_grad else None)


def _data_loss_and_grad_numpy(params: FfnnParams, N, u, y, washout, x0, need_grad=True):
    T = u.shape[0]
    count = T - washout
    if not need_grad:
        F = rollout(params, N, x0, u)
        R = F[washout:] - y[washout:]
        return float(np.sum(R * R)) / count, None

    F, cache = rollout(params, N, x0, u, cache=True)
    R = F - y
    R[:washout] = 0.0
    loss = float(np.sum(R * R)) / count
    gF = (2.0 / count) * R

    layers = params.layers
    M = len(layers)
    m, p = params.n_inputs, params.n_outputs
    nb = m + p
    n = nb * N
    H, A, X = cache["H"], cache["A"], cache["X"]
    D = [get_activation(layer.activation).grad(A[i], H[i]) for i, layer in enumerate(layers)]
    Us = [layer.U for layer in layers]
    U0 = params.U0
    dA = [np.empty_like(a) for a in A]
    Gf = np.empty_like(gF)

    gx = np.zeros(n)  # dL/dx_{k+1}
    for k in range(T - 1, -1, -1):
        g_f = gF[k] + gx[n - nb:n - m]
        Gf[k] = g_f
        gx_prev = np.zeros(n)
        gx_prev[nb:] = gx[:-nb]
        gh = g_f @ U0
        for i in range(M - 1, -1, -1):
            da = gh * D[i][k]
            dA[i][k] = da
            gh = da @ Us[i]
        gx_prev += gh
        gx = gx_prev

    grads = []
    for i in range(M):
        prev = X if i == 0 else H[i - 1]
        grads += [dA[i].T @ u, dA[i].T @ prev, dA[i].sum(axis=0)]
    grads += [Gf.T @ H[M - 1], Gf.sum(axis=0)]
    return loss, grads


class _NormCache:
    """Warm-start vectors for the repeated spectral norms during training.

    Inside :func:`train` the eigen-residual tolerance is looser than for
    certification (standalone gradient calls use the tight one): the
    norm error scales with its square, and the singular vectors only feed a
    subgradient.  Reported residuals always come from :func:`certify`.
    """

    def __init__(self, tol=1e-8):
        self.vectors = {}
        self.tol = tol

    def norm(self, key, mat):
        sigma, u, v = robust_spectral_norm(mat, self.tol, v0=self.vectors.get(key), return_vectors=True)
        self.vectors[key] = u if mat.shape[0] < mat.shape[1] else v
        return sigma, u, v


def _penalty_and_grad(params: FfnnParams, N, cfg: PenaltyConfig, cache=None):
    """``(rho, nu, grads)`` where ``grads`` is aligned with ``params.arrays()``."""
    cache = cache or _NormCache(SPECTRAL_TOL)
    mats = [params.U0] + [layer.U for layer in params.layers]
    svd = [cache.norm(i, mat) for i, mat in enumerate(mats)]
    norms = np.array([s[0] for s in svd])
    nu = float(np.prod(norms)) - stability_threshold(params, N)
    rho = penalty_rho(nu, cfg)
    slope = penalty_slope(nu, cfg)
    grads = [np.zeros_like(a) for a in params.arrays()]
    if slope:
        for j, (sigma, u, v) in enumerate(svd):
            others = float(np.prod(np.delete(norms, j)))
            g = slope * others * np.outer(u, v)
            if j == 0:
                grads[-2] = g
            else:
                grads[3 * (j - 1) + 1] = g
    return rho, nu, grads


def loss(model: NnarxModel, u_seq, y_seq, washout, penalty: PenaltyConfig, init_state=None):
    """Simulation-error loss of one (normalized) trajectory plus the penalty."""
    u, y = _check_trajectory(u_seq, y_seq, model.m, model.p, washout)
    x0 = model.zero_state() if init_state is None else np.asarray(init_state, dtype=float)
    data, _ = _data_loss_and_grad(model.ffnn, model.N, u, y, washout, x0, need_grad=False)
    rho, _, _ = _penalty_and_grad(model.ffnn, model.N, penalty)
    return data + rho


def loss_and_gradients(model: NnarxModel, batch, washout, penalty: PenaltyConfig, init_states=None,
                       _norm_cache=None):
    """Batch-mean loss and its gradient.

    ``batch`` is a sequence of ``(u_seq, y_seq)`` pairs.  Returns
    ``(loss, grads, nu)`` with ``grads`` aligned with ``model.ffnn.arrays()``.
    """
    if len(batch) == 0:
        raise InvalidArgument("empty batch")
    if init_states is None:
        init_states = [model.zero_state()] * len(batch)
    total = 0.0
    grads = [np.zeros_like(a) for a in model.ffnn.arrays()]
    for (u_seq, y_seq), x0 in zip(batch, init_states):
        u, y = _check_trajectory(u_seq, y_seq, model.m, model.p, washout)
        value, g = _data_loss_and_grad(model.ffnn, model.N, u, y, washout, np.asarray(x0, dtype=float))
        total += value
        for acc, gi in zip(grads, g):
            acc += gi
    scale = 1.0 / len(batch)
    grads = [g * scale for g in grads]
    rho, nu, pg = _penalty_and_grad(model.ffnn, model.N, penalty, _norm_cache)
    grads = [g + h for g, h in zip(grads, pg)]
    for name, g in zip(model.ffnn.array_names(), grads):
        if not np.all(np.isfinite(g)):
            raise NumericDivergence(f"non-finite gradient for parameter {name}")
    return total * scale + rho, grads, nu


def gradients(model: NnarxModel, batch, washout, penalty: PenaltyConfig, init_states=None):
    """Gradient of the batch-mean loss, aligned with ``model.ffnn.arrays()``."""
    return loss_and_gradients(model, batch, washout, penalty, init_states)[1]


@dataclass
class RmsPropState:
    mean_square: list


def rmsprop_init(arrays):
    return RmsPropState([np.zeros_like(a) for a in arrays])


def rmsprop_step(arrays, grads, state: RmsPropState, cfg: TrainConfig, learning_rate=None):
    """One RMSProp update; returns ``(new_arrays, new_state)``.

    Gradients are rescaled to ``cfg.clip_norm`` global norm beforehand when
    clipping is enabled.
    """
    if len(arrays) != len(grads) or len(arrays) != len(state.mean_square):
        raise InvalidArgument("arrays, gradients and optimizer state differ in length")
    for a, g in zip(arrays, grads):
        if np.shape(a) != np.shape(g):
            raise InvalidArgument(f"gradient shape {np.shape(g)} does not match parameter {np.shape(a)}")
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    if cfg.clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if total > cfg.clip_norm:
            grads = [g * (cfg.clip_norm / total) for g in grads]
    d = cfg.rmsprop_decay
    new_v, new_a = [], []
    for a, g, v in zip(arrays, grads, state.mean_square):
        v = d * v + (1.0 - d) * g * g
        new_v.append(v)
        new_a.append(a - lr * g / (np.sqrt(v) + cfg.rmsprop_epsilon))
    return new_a, RmsPropState(new_v)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_error: float
    nu: float
    certified: bool
    wall_time: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    washout: int = 0
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def best(self):
        if self.best_epoch is None:
            return None
        return self.records[self.best_epoch - 1]


def validation_error(model: NnarxModel, trajectories, washout):
    """Mean windowed MSE over normalized trajectories, zero initial state, no penalty."""
    errs = []
    for u, y in trajectories:
        u, y = _check_trajectory(u, y, model.m, model.p, washout)
        try:
            value, _ = _data_loss_and_grad(model.ffnn, model.N, u, y, washout, model.zero_state(),
                                           need_grad=False)
        except NumericDivergence:
            value = np.inf
        errs.append(value)
    return float(np.mean(errs))


def train(dataset, spec: ModelSpec, cfg: TrainConfig, callback=None):
    """Fit a model on ``dataset`` and return ``(model, history, certificate)``.

    Each training trajectory is one RMSProp batch, visited in a seeded
    shuffled order.  The returned model is the one with the lowest
    validation error; training stops once that has not improved for
    ``cfg.early_stopping_patience`` epochs.
    """
    train_set = dataset.normalized("train")
    val_set = dataset.normalized("val")
    if not train_set or not val_set:
        raise ConfigError("need at least one training and one validation trajectory")
    lengths = [len(u) for u, _ in train_set + val_set]
    if min(lengths) <= cfg.washout:
        raise ConfigError(f"washout {cfg.washout} is not shorter than the shortest trajectory ({min(lengths)})")
    m, p = dataset.m, dataset.p

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    state_rng = np.random.default_rng(seeds[2])

    params = init_params(spec, m, p, init_rng)
    model = NnarxModel(params, spec.N, dataset.norm)
    history = TrainHistory(washout=cfg.washout)
    if cfg.max_epochs == 0:
        return model, history, certify(model)

    best_model, best_val = model, np.inf
    opt = rmsprop_init(params.arrays())
    norm_cache = _NormCache()
    since_best = 0
    n = model.n

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        prev = None  # (params, opt) before the last successful update
        retries = 0
        lr = cfg.learning_rate
        for idx in order:
            x0 = state_rng.uniform(-cfg.init_state_scale, cfg.init_state_scale, n)
            while True:
                try:
                    value, grads, _ = loss_and_gradients(
                        model, [train_set[idx]], cfg.washout, cfg.penalty, [x0], norm_cache
                    )
                    break
                except NumericDivergence as exc:
                    retries += 1
                    if retries > cfg.max_retries or prev is None:
                        raise TrainingFailure(
                            f"simulation diverged at epoch {epoch}: {exc}", history=history
                        ) from exc
                    logger.warning("divergent loss at epoch %d; retrying with lr %.3g", epoch, lr / 2)
                    params, opt = prev
                    model = NnarxModel(params, spec.N, dataset.norm)
                    lr /= 2
            retries = 0
            losses.append(value)
            prev = (params, opt)
            arrays, opt = rmsprop_step(params.arrays(), grads, opt, cfg, learning_rate=lr)
            params = params.with_arrays(arrays)
            model = NnarxModel(params, spec.N, dataset.norm)
            lr = cfg.learning_rate

        val = validation_error(model, val_set, cfg.washout)
        nu = float(certify(model).nu)
        record = EpochRecord(epoch, float(np.mean(losses)), val, nu, nu < 0, time.perf_counter() - t0)
        history.records.append(record)
        if callback is not None:
            callback(record)
        logger.debug("epoch %d loss %.6g val %.6g nu %.5f", epoch, record.loss, val, nu)

        if val < best_val:
            best_val, best_model, since_best = val, model, 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.early_stopping_patience:
                history.stopped_early = True
                break

    return best_model, history, certify(best_model)
