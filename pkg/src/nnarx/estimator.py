"""scikit-learn style wrapper around :func:`nnarx.training.train`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .datasets import Dataset, Trajectory
from .exceptions import InvalidArgument
from .metrics import fit_index
from .model import simulate_open_loop
from .stability import certify
from .training import ModelSpec, PenaltyConfig, TrainConfig, train


def _as_sequences(X, name):
    """One ``(T, c)`` / ``(T,)`` array, or a list of them (one per trajectory)."""
    if isinstance(X, (list, tuple)):
        if not X:
            raise InvalidArgument(f"{name} is empty")
        seqs, single = list(X), False
    else:
        seqs, single = [X], True
    out = []
    for s in seqs:
        a = check_array(s, ensure_2d=False, dtype=np.float64, input_name=name)
        out.append(a[:, None] if a.ndim == 1 else a)
    return out, single


class NnarxRegressor(BaseEstimator):
    """Stability-penalized NNARX model with ``fit`` / ``predict`` / ``score``.

    ``fit(U, Y)`` takes input and output sequences (one array each, or lists
    of per-trajectory arrays).  ``predict(U)`` runs a free simulation from
    the zero state and returns the output sequence(s) in physical units.
    ``score`` is the FIT index in percent after the washout window.
    """

    def __init__(self, N=4, hidden_layer_sizes=(10,), activation="tanh", learning_rate=1e-3,
                 max_epochs=1500, washout=20, penalty_weight=10.0, penalty_margin=0.01,
                 early_stopping_patience=200, clip_norm=1.0, init_ratio=0.5, random_state=0):
        self.N = N
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.washout = washout
        self.penalty_weight = penalty_weight
        self.penalty_margin = penalty_margin
        self.early_stopping_patience = early_stopping_patience
        self.clip_norm = clip_norm
        self.init_ratio = init_ratio
        self.random_state = random_state

    def _configs(self):
        widths = tuple(self.hidden_layer_sizes)
        acts = (self.activation,) * len(widths) if isinstance(self.activation, str) else tuple(self.activation)
        spec = ModelSpec(N=self.N, widths=widths, activations=acts, init_ratio=self.init_ratio)
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            washout=self.washout,
            penalty=PenaltyConfig(self.penalty_weight, self.penalty_margin),
            early_stopping_patience=self.early_stopping_patience,
            seed=int(self.random_state or 0),
            clip_norm=self.clip_norm,
        )
        return spec, cfg

    def fit(self, U, Y, validation_data=None):
        """Train on ``(U, Y)``; early stopping uses ``validation_data=(U_val, Y_val)``.

        Without validation data the training trajectories double as the
        validation set.
        """
        spec, cfg = self._configs()
        us, _ = _as_sequences(U, "U")
        ys, _ = _as_sequences(Y, "Y")
        if len(us) != len(ys):
            raise InvalidArgument("U and Y hold different numbers of trajectories")
        trajs = [Trajectory(u, y, "train", f"train_{i:03d}") for i, (u, y) in enumerate(zip(us, ys))]
        if validation_data is None:
            val = [Trajectory(t.u, t.y, "val", f"val_{i:03d}") for i, t in enumerate(trajs)]
        else:
            uv, _ = _as_sequences(validation_data[0], "U_val")
            yv, _ = _as_sequences(validation_data[1], "Y_val")
            val = [Trajectory(u, y, "val", f"val_{i:03d}") for i, (u, y) in enumerate(zip(uv, yv))]
        dataset = Dataset.from_trajectories(trajs + val)
        self.model_, self.history_, self.certificate_ = train(dataset, spec, cfg)
        self.n_features_in_ = dataset.m
        self.n_outputs_ = dataset.p
        return self

    def predict(self, U, init_state=None):
        check_is_fitted(self, "model_")
        us, single = _as_sequences(U, "U")
        for u in us:
            if u.shape[1] != self.n_features_in_:
                raise InvalidArgument(f"expected {self.n_features_in_} input channels, got {u.shape[1]}")
        model = self.model_
        x0 = model.zero_state() if init_state is None else np.asarray(init_state, dtype=float)
        out = [model.norm.denormalize_y(simulate_open_loop(model, x0, model.norm.normalize_u(u))) for u in us]
        if self.n_outputs_ == 1:
            out = [o[:, 0] for o in out]
        return out[0] if single else out

    def score(self, U, Y):
        """Pooled FIT (percent) over the samples after the washout window."""
        pred = self.predict(U)
        preds = pred if isinstance(pred, list) else [pred]
        ys, _ = _as_sequences(Y, "Y")
        w = self.washout
        yp = np.concatenate([np.reshape(p, (len(p), -1))[w:] for p in preds])
        yt = np.concatenate([y[w:] for y in ys])
        return float(fit_index(yp, yt))

    def certify(self, margin=0.0):
        check_is_fitted(self, "model_")
        return certify(self.model_, margin)
