"""Identification datasets: simulated trajectories with split labels."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .exceptions import ConfigError, InvalidArgument
from .model import NormalizationStats
from .signals import MprsConfig, mprs_generate

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Trajectory:
    u: np.ndarray  # (T, m), physical units
    y: np.ndarray  # (T, p)
    split: str
    name: str = ""
    seed: Optional[list] = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if u.shape[0] != y.shape[0]:
            raise InvalidArgument("input and output sequences differ in length")
        if self.split not in SPLITS:
            raise InvalidArgument(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.u.shape[0]


@dataclass
class Dataset:
    trajectories: list
    sampling_time: float
    norm: NormalizationStats
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise InvalidArgument("dataset has no trajectories")
        m, p = self.trajectories[0].u.shape[1], self.trajectories[0].y.shape[1]
        for t in self.trajectories:
            if t.u.shape[1] != m or t.y.shape[1] != p:
                raise InvalidArgument("trajectories disagree on channel counts")

    @property
    def m(self):
        return self.trajectories[0].u.shape[1]

    @property
    def p(self):
        return self.trajectories[0].y.shape[1]

    def split(self, label):
        if label not in SPLITS:
            raise InvalidArgument(f"unknown split {label!r}")
        return [t for t in self.trajectories if t.split == label]

    def normalized(self, label):
        """``[(u, y), ...]`` of the split in normalized units."""
        return [(self.norm.normalize_u(t.u), self.norm.normalize_y(t.y)) for t in self.split(label)]

    def counts(self):
        return {s: len(self.split(s)) for s in SPLITS}

    @classmethod
    def from_trajectories(cls, trajectories, sampling_time=1.0, metadata=None):
        """Wrap raw trajectories, fitting normalization on the training split."""
        train = [t for t in trajectories if t.split == "train"]
        if not train:
            raise ConfigError("normalization needs at least one training trajectory")
        norm = NormalizationStats.from_data([t.u for t in train], [t.y for t in train])
        return cls(list(trajectories), sampling_time, norm, dict(metadata or {}))


def trajectory_seed(master_seed, index):
    """Seed entropy of trajectory ``index``; spawn(3) gives excitation/initial-state/noise streams."""
    return [int(master_seed), int(index)]


def build_dataset(plant, excitation, n_train, n_val, n_test=0, noise_std=None, noise_rel=0.01,
                  seed=0, sampling_time=None):
    """Simulate ``n_train + n_val + n_test`` trajectories of ``plant``.

    ``excitation`` is an :class:`MprsConfig` shared by all trajectories or a
    list with one per trajectory; its ``seed`` field is ignored in favour of
    the per-trajectory streams derived from ``seed``.

    Gaussian measurement noise is added to the stored inputs and outputs
    (the plant is driven by the clean input).  ``noise_std`` gives the
    ``(input_std, output_std)`` per channel; when omitted each channel gets
    ``noise_rel`` times the maximum deviation of its clean training data.
    """
    counts = [int(n_train), int(n_val), int(n_test)]
    if min(counts) < 0:
        raise ConfigError("trajectory counts must be nonnegative")
    total = sum(counts)
    if total == 0:
        raise ConfigError("at least one trajectory is required")
    if n_train == 0:
        raise ConfigError("at least one training trajectory is required for normalization")
    labels = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    if isinstance(excitation, MprsConfig):
        excitation = [excitation] * total
    if len(excitation) != total:
        raise ConfigError(f"got {len(excitation)} excitation configs for {total} trajectories")

    clean = []
    for i in range(total):
        ex_ss, x0_ss, noise_ss = np.random.SeedSequence(trajectory_seed(seed, i)).spawn(3)
        u = mprs_generate(excitation[i], np.random.default_rng(ex_ss))[:, None]
        u = np.repeat(u, plant.n_inputs, axis=1)
        x0 = plant.initial_state(np.random.default_rng(x0_ss))
        y = plant.simulate(x0, u)
        clean.append((u, y, noise_ss))

    train_idx = [i for i, s in enumerate(labels) if s == "train"]
    if noise_std is None:
        ref = NormalizationStats.from_data([clean[i][0] for i in train_idx], [clean[i][1] for i in train_idx])
        u_std, y_std = noise_rel * ref.u_dev, noise_rel * ref.y_dev
    else:
        u_std, y_std = (np.atleast_1d(np.asarray(s, dtype=float)) for s in noise_std)

    trajectories = []
    for i, (u, y, noise_ss) in enumerate(clean):
        rng = np.random.default_rng(noise_ss)
        u_noisy = u + rng.standard_normal(u.shape) * u_std
        y_noisy = y + rng.standard_normal(y.shape) * y_std
        trajectories.append(Trajectory(u_noisy, y_noisy, labels[i], f"traj_{i:03d}", trajectory_seed(seed, i)))

    if sampling_time is None:
        sampling_time = getattr(plant, "sampling_time", 1.0)
    metadata = {
        "plant": plant.describe(),
        "seed": int(seed),
        "seed_derivation": "SeedSequence([seed, index]).spawn(3) -> excitation, initial state, noise",
        "noise": {
            "model": "gaussian measurement noise on stored u and y; plant driven by clean u",
            "u_std": np.asarray(u_std, dtype=float).tolist(),
            "y_std": np.asarray(y_std, dtype=float).tolist(),
            "relative": None if noise_std is not None else float(noise_rel),
        },
        "excitation": [
            {"levels": list(e.levels), "hold_min": e.hold_min, "hold_max": e.hold_max, "length": e.length}
            for e in excitation
        ],
    }
    return Dataset.from_trajectories(trajectories, float(sampling_time), metadata)


def replace_split(dataset: Dataset, label, trajectories):
    """Return a dataset whose ``label`` split is swapped out; statistics are kept."""
    kept = [t for t in dataset.trajectories if t.split != label]
    new = [replace(t, split=label) for t in trajectories]
    return Dataset(kept + new, dataset.sampling_time, dataset.norm, dict(dataset.metadata))
