"""File formats: model documents, trajectory CSVs, dataset manifests, reports.

All JSON documents carry ``schema_version`` and ``kind``.  Floats are
written with ``repr`` precision so every round trip is lossless.
"""
from __future__ import annotations

import csv
import io as _io
import json
from pathlib import Path

import numpy as np

from .datasets import SPLITS, Dataset, Trajectory
from .exceptions import InvalidArgument, InvalidModel, NormalizationError, SchemaError
from .model import FfnnParams, Layer, NnarxModel, NormalizationStats, get_activation

SCHEMA_VERSION = 1
STATE_LAYOUT = "x = [z_1; ...; z_N], oldest block first; z_i = [y (p entries); u (m entries)]"


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def load_json(path, kind):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    if doc.get("kind") != kind:
        raise SchemaError(f"{path}: expected kind {kind!r}, got {doc.get('kind')!r}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return doc


def _matrix(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def _unmatrix(d, what):
    try:
        shape = tuple(int(s) for s in d["shape"])
        data = np.asarray(d["data"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{what}: malformed matrix payload ({exc})") from exc
    if data.size != int(np.prod(shape)):
        raise SchemaError(f"{what}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


def norm_to_dict(norm: NormalizationStats):
    return {k: getattr(norm, k).tolist() for k in ("u_mean", "u_dev", "y_mean", "y_dev")}


def norm_from_dict(d):
    try:
        return NormalizationStats(**{k: np.asarray(d[k], dtype=float) for k in ("u_mean", "u_dev", "y_mean", "y_dev")})
    except (KeyError, TypeError, ValueError, NormalizationError) as exc:
        raise SchemaError(f"malformed normalization block ({exc})") from exc


def model_to_dict(model: NnarxModel, metadata=None):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "nnarx-model",
        "N": model.N,
        "m": model.m,
        "p": model.p,
        "state_layout": STATE_LAYOUT,
        "layers": [
            {
                "activation": layer.activation,
                "lipschitz": layer.lipschitz,
                "W": _matrix(layer.W),
                "U": _matrix(layer.U),
                "b": _matrix(layer.b),
            }
            for layer in model.ffnn.layers
        ],
        "output": {"U0": _matrix(model.ffnn.U0), "b0": _matrix(model.ffnn.b0)},
        "normalization": norm_to_dict(model.norm),
        "metadata": metadata or {},
    }


def model_from_dict(doc):
    try:
        layers = []
        for i, ld in enumerate(doc["layers"]):
            act = ld["activation"]
            try:
                registered = get_activation(act).lipschitz
            except InvalidArgument as exc:
                raise SchemaError(str(exc)) from exc
            if "lipschitz" in ld and float(ld["lipschitz"]) != registered:
                raise SchemaError(
                    f"layer {i + 1}: stored Lipschitz constant {ld['lipschitz']} differs from the "
                    f"registered {act!r} constant {registered}"
                )
            layers.append(Layer(_unmatrix(ld["W"], f"W{i + 1}"), _unmatrix(ld["U"], f"U{i + 1}"),
                                _unmatrix(ld["b"], f"b{i + 1}"), act))
        out = doc["output"]
        params = FfnnParams(tuple(layers), _unmatrix(out["U0"], "U0"), _unmatrix(out["b0"], "b0"))
        model = NnarxModel(params, int(doc["N"]), norm_from_dict(doc["normalization"]))
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError, InvalidModel, NormalizationError) as exc:
        raise SchemaError(f"malformed model document: {exc}") from exc
    if (model.m, model.p) != (doc.get("m", model.m), doc.get("p", model.p)):
        raise SchemaError("declared m/p disagree with the weight shapes")
    return model


def save_model(model, path, metadata=None):
    dump_json(model_to_dict(model, metadata), path)


def load_model(path):
    return model_from_dict(load_json(path, "nnarx-model"))


def trajectory_header(m, p):
    return ["k"] + [f"u_{i + 1}" for i in range(m)] + [f"y_{j + 1}" for j in range(p)]


def write_trajectory_csv(path, u, y):
    u, y = np.atleast_2d(u), np.atleast_2d(y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_header(u.shape[1], y.shape[1]))
        for k in range(u.shape[0]):
            w.writerow([k] + [repr(float(v)) for v in u[k]] + [repr(float(v)) for v in y[k]])


def read_trajectory_csv(path, m=None, p=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty trajectory file")
    header = rows[0]
    if header[0] != "k":
        raise SchemaError(f"{path}: first column must be 'k'")
    m_found = sum(h.startswith("u_") for h in header)
    p_found = sum(h.startswith("y_") for h in header)
    if header != trajectory_header(m_found, p_found) or (m is not None and m != m_found) or (
        p is not None and p != p_found
    ):
        raise SchemaError(f"{path}: unexpected header {header}")
    try:
        data = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float).reshape(-1, m_found + p_found)
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric entry ({exc})") from exc
    return data[:, :m_found], data[:, m_found:]


def save_dataset(dataset: Dataset, directory, config=None):
    """Write one CSV per trajectory plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in dataset.trajectories:
        fname = f"{t.name}.csv"
        write_trajectory_csv(directory / fname, t.u, t.y)
        entries.append({"file": fname, "name": t.name, "split": t.split, "length": len(t), "seed": t.seed})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "nnarx-dataset",
        "m": dataset.m,
        "p": dataset.p,
        "sampling_time": dataset.sampling_time,
        "counts": dataset.counts(),
        "normalization": norm_to_dict(dataset.norm),
        "normalization_source": "train split: mean and maximum absolute deviation per channel",
        "trajectories": entries,
        "metadata": dataset.metadata,
        "config": config,
    }
    path = directory / "manifest.json"
    dump_json(manifest, path)
    return path


def load_dataset(path):
    """Load from a manifest path or the directory containing ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = load_json(path, "nnarx-dataset")
    try:
        m, p = int(doc["m"]), int(doc["p"])
        trajectories = []
        for e in doc["trajectories"]:
            if e["split"] not in SPLITS:
                raise SchemaError(f"unknown split {e['split']!r}")
            u, y = read_trajectory_csv(path.parent / e["file"], m, p)
            trajectories.append(Trajectory(u, y, e["split"], e.get("name", ""), e.get("seed")))
        return Dataset(trajectories, float(doc["sampling_time"]), norm_from_dict(doc["normalization"]),
                       doc.get("metadata") or {})
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError, InvalidArgument) as exc:
        raise SchemaError(f"{path}: malformed manifest ({exc!r})") from exc


HISTORY_COLUMNS = ["epoch", "loss", "val_error", "nu", "certified"]


def history_csv(history):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history.records:
        w.writerow([r.epoch, repr(float(r.loss)), repr(float(r.val_error)), repr(float(r.nu)), int(r.certified)])
    return buf.getvalue()


def write_history_csv(history, path):
    Path(path).write_text(history_csv(history))


def write_report_csv(reports, path, p):
    from .metrics import report_header

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(report_header(p))
        for r in reports:
            cert = "" if r.certified is None else int(r.certified)
            w.writerow([r.trajectory, r.split, repr(r.fit_percent), repr(r.rmse), repr(r.max_abs_error),
                        int(r.diverged), r.domain, r.washout, cert] + [repr(v) for v in r.fit_per_channel])


def write_plot_csv(report, path):
    p = report.y_true.shape[1]
    header = (["k"] + [f"y_true_{j + 1}" for j in range(p)] + [f"y_pred_{j + 1}" for j in range(p)]
              + [f"residual_{j + 1}" for j in range(p)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        if report.y_pred is None:
            return
        for k, (yt, yp) in enumerate(zip(report.y_true, report.y_pred)):
            w.writerow([k + report.washout] + [repr(float(v)) for v in yt] + [repr(float(v)) for v in yp]
                       + [repr(float(v)) for v in yp - yt])
