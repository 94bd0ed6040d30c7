"""Multilevel pseudo-random excitation signals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError


@dataclass(frozen=True)
class MprsConfig:
    """Piecewise-constant signal: random level held for a random duration.

    ``hold_min``/``hold_max`` are in samples, both inclusive.
    """

    levels: tuple = tuple(np.linspace(-2.0, 2.0, 9))
    hold_min: int = 10
    hold_max: int = 50
    length: int = 1250
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(v) for v in np.atleast_1d(self.levels)))
        if not self.levels:
            raise ConfigError("MPRS needs at least one level")
        if not np.all(np.isfinite(self.levels)):
            raise ConfigError("MPRS levels must be finite")
        if self.hold_min < 1 or self.hold_max < self.hold_min:
            raise ConfigError(f"invalid hold range [{self.hold_min}, {self.hold_max}]")
        if self.length < 0:
            raise ConfigError("length must be nonnegative")


def mprs_generate(cfg: MprsConfig, rng=None):
    """Return a ``(length,)`` MPRS sequence.

    Each segment takes a level different from the previous segment's (when
    more than one distinct level exists), so every run of equal samples has
    a length in ``[hold_min, hold_max]`` except the truncated last one.
    A single level gives a constant signal.  ``rng`` overrides ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    levels = np.unique(cfg.levels)
    out = np.empty(cfg.length)
    k = 0
    current = None
    while k < cfg.length:
        hold = int(rng.integers(cfg.hold_min, cfg.hold_max + 1))
        if current is None or len(levels) == 1:
            current = int(rng.integers(len(levels)))
        else:
            # uniform over the other levels
            current = (current + 1 + int(rng.integers(len(levels) - 1))) % len(levels)
        out[k:k + hold] = levels[current]
        k += hold
    return out
