"""Open-loop evaluation of identified models."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import InvalidArgument, NumericDivergence
from .model import NnarxModel, simulate_open_loop


def fit_index(y_pred, y_true):
    """``100 * (1 - ||y_pred - y_true|| / ||y_true - mean(y_true)||)``.

    Norms are taken over the whole (flattened) sequence; for multi-channel
    data the mean is per channel.
    """
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if y_pred.shape != y_true.shape:
        raise InvalidArgument(f"shape mismatch: {y_pred.shape} vs {y_true.shape}")
    if y_true.shape[0] < 2:
        raise InvalidArgument("FIT needs at least two samples")
    denom = np.linalg.norm(y_true - y_true.mean(axis=0))
    if denom == 0:
        raise InvalidArgument("FIT is undefined for a constant reference signal")
    return 100.0 * (1.0 - np.linalg.norm(y_pred - y_true) / denom)


@dataclass
class EvalReport:
    trajectory: str
    split: str
    fit_percent: float
    fit_per_channel: list
    rmse: float
    max_abs_error: float
    diverged: bool
    domain: str
    washout: int
    certified: Optional[bool] = None
    y_true: np.ndarray = field(default=None, repr=False)
    y_pred: np.ndarray = field(default=None, repr=False)


REPORT_COLUMNS = ["trajectory", "split", "fit_percent", "rmse", "max_abs_error", "diverged", "domain",
                  "washout", "certified"]


def report_header(p):
    return REPORT_COLUMNS + [f"fit_y{j + 1}" for j in range(p)]


def evaluate(model: NnarxModel, dataset, split, washout=20, certified=None, domain="physical",
             init_state=None):
    """Simulate every trajectory of ``split`` open loop and score it.

    Metrics use the samples after the washout window, in physical units
    unless ``domain="normalized"``.  A trajectory whose simulation diverges
    is flagged rather than aborting the batch.
    """
    if domain not in ("physical", "normalized"):
        raise InvalidArgument("domain must be 'physical' or 'normalized'")
    trajectories = dataset.split(split)
    if not trajectories:
        raise InvalidArgument(f"split {split!r} has no trajectories")
    x0 = model.zero_state() if init_state is None else np.asarray(init_state, dtype=float)
    reports = []
    for traj in trajectories:
        if len(traj) - washout < 2:
            raise InvalidArgument(f"trajectory {traj.name} is too short for washout {washout}")
        u = model.norm.normalize_u(traj.u)
        y_true = traj.y if domain == "physical" else model.norm.normalize_y(traj.y)
        try:
            y_hat = simulate_open_loop(model, x0, u)
        except NumericDivergence:
            nan = float("nan")
            reports.append(EvalReport(traj.name, traj.split, nan, [nan] * model.p, nan, nan, True,
                                      domain, washout, certified, y_true[washout:], None))
            continue
        if domain == "physical":
            y_hat = model.norm.denormalize_y(y_hat)
        yt, yp = y_true[washout:], y_hat[washout:]
        err = yp - yt
        reports.append(EvalReport(
            trajectory=traj.name,
            split=traj.split,
            fit_percent=float(fit_index(yp, yt)),
            fit_per_channel=[float(fit_index(yp[:, j], yt[:, j])) for j in range(model.p)],
            rmse=float(np.sqrt(np.mean(err ** 2))),
            max_abs_error=float(np.max(np.abs(err))),
            diverged=False,
            domain=domain,
            washout=washout,
            certified=certified,
            y_true=yt,
            y_pred=yp,
        ))
    return reports


def summarize(reports):
    """Aggregate over trajectories: FIT of the pooled post-washout samples."""
    ok = [r for r in reports if not r.diverged]
    summary = {
        "n_trajectories": len(reports),
        "n_diverged": len(reports) - len(ok),
        "domain": reports[0].domain if reports else None,
        "washout": reports[0].washout if reports else None,
        "certified": reports[0].certified if reports else None,
    }
    if ok:
        yt = np.concatenate([r.y_true for r in ok])
        yp = np.concatenate([r.y_pred for r in ok])
        summary["fit_percent"] = float(fit_index(yp, yt))
        summary["fit_per_channel"] = [float(fit_index(yp[:, j], yt[:, j])) for j in range(yt.shape[1])]
        summary["mean_fit_percent"] = float(np.mean([r.fit_percent for r in ok]))
        summary["rmse"] = float(np.sqrt(np.mean((yp - yt) ** 2)))
        summary["max_abs_error"] = float(np.max(np.abs(yp - yt)))
    return summary
