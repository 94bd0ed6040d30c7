"""Command-line driver: ``nnarx generate | train | certify | evaluate | probe``.

Exit codes
----------
0  success (for ``certify``: the model is certified)
1  ``certify`` only: the model is not certified
2  usage, configuration, schema or I/O error
3  training failure or unrecoverable numerical failure

Seeds: everything derives from the master ``seed`` of the experiment
configuration.  Trajectory ``i`` of a dataset uses ``SeedSequence([seed, i])``
(excitation, initial state and noise streams).  Training uses
``SeedSequence(train.seed)`` split into initialization, shuffle and
initial-state streams; ``train.seed`` defaults to the master seed.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, make_excitation, make_plant
from .datasets import build_dataset
from .exceptions import (
    ConfigError,
    ConvergenceFailure,
    InvalidArgument,
    InvalidModel,
    NumericDivergence,
    SchemaError,
    TrainingFailure,
)
from .io import (
    SCHEMA_VERSION,
    dump_json,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    write_history_csv,
    write_plot_csv,
    write_report_csv,
)
from .metrics import evaluate, summarize
from .model import step
from .signals import MprsConfig, mprs_generate
from .stability import (
    certify,
    compute_constants,
    explosive_demo_model,
    lyapunov_decrease_probe,
)
from .training import train

EXIT_OK = 0
EXIT_NOT_CERTIFIED = 1
EXIT_USAGE = 2
EXIT_FAILURE = 3

PROBE_COLUMNS = ["pair", "k", "distance", "delta_v", "bound", "slack"]


class _Failure(Exception):
    pass


def _load_cfg(args, fallback=None):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        base = Path(args.config).parent
    elif fallback is not None:
        cfg, base = ExperimentConfig.from_dict(fallback), Path(".")
    else:
        cfg, base = ExperimentConfig(), Path(".")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.with_train(seed=args.seed)
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    return cfg, base


def cmd_generate(args):
    cfg, base = _load_cfg(args)
    ds_cfg = cfg.dataset
    for flag in ("n_train", "n_val", "n_test"):
        value = getattr(args, flag)
        if value is not None:
            setattr(ds_cfg, flag, value)
    if ds_cfg.n_train + ds_cfg.n_val + ds_cfg.n_test == 0:
        raise ConfigError("zero trajectories requested")
    plant = make_plant(cfg.plant, base)
    noise_std = None if ds_cfg.noise_std is None else tuple(ds_cfg.noise_std)
    dataset = build_dataset(plant, make_excitation(cfg.excitation), ds_cfg.n_train, ds_cfg.n_val, ds_cfg.n_test,
                            noise_std=noise_std, noise_rel=ds_cfg.noise_rel, seed=cfg.seed)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "dataset"
    manifest = save_dataset(dataset, out, config=cfg.to_dict())
    print(manifest)
    return EXIT_OK


def cmd_train(args):
    dataset_path = Path(args.dataset)
    dataset = load_dataset(dataset_path)
    manifest_cfg = None
    if not args.config:
        path = dataset_path / "manifest.json" if dataset_path.is_dir() else dataset_path
        manifest_cfg = json.loads(path.read_text()).get("config")
    cfg, _ = _load_cfg(args, manifest_cfg)
    overrides = {k: v for k, v in (("max_epochs", args.max_epochs), ("learning_rate", args.learning_rate),
                                   ("washout", args.washout)) if v is not None}
    if overrides:
        cfg.with_train(**overrides)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "train"
    out.mkdir(parents=True, exist_ok=True)

    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": "nnarx-train-summary",
        "config": cfg.to_dict(),
        "seeds": {"master": cfg.seed, "train": cfg.train.seed, "dataset": dataset.metadata.get("seed")},
        "dataset": str(dataset_path),
        "loss_window": {"washout": cfg.train.washout, "first_index": cfg.train.washout,
                        "last_index": "T-1", "indexing": "0-based"},
    }
    try:
        model, history, report = train(dataset, cfg.model, cfg.train)
    except TrainingFailure as exc:
        write_history_csv(exc.history, out / "history.csv")
        summary.update(status="failed", error=str(exc), epochs=len(exc.history))
        dump_json(summary, out / "train_summary.json")
        raise _Failure(str(exc)) from exc

    meta = {"config": cfg.to_dict(), "seeds": summary["seeds"], "best_epoch": history.best_epoch}
    save_model(model, out / "model.json", metadata=meta)
    write_history_csv(history, out / "history.csv")
    cert = report.to_dict()
    cert.update(schema_version=SCHEMA_VERSION, kind="nnarx-certificate")
    dump_json(cert, out / "certificate.json")
    summary.update(status="ok", epochs=len(history), best_epoch=history.best_epoch,
                   stopped_early=history.stopped_early, nu=report.nu, certified=report.certified)
    dump_json(summary, out / "train_summary.json")
    print(f"epochs {len(history)}  best epoch {history.best_epoch}  nu {report.nu:+.6f}  "
          f"{'certified' if report.certified else 'not certified'}")
    print(out / "model.json")
    return EXIT_OK


def cmd_certify(args):
    model = load_model(args.model)
    report = certify(model, margin=args.margin)
    doc = report.to_dict()
    doc.update(schema_version=SCHEMA_VERSION, kind="nnarx-certificate")
    if args.format == "json":
        print(json.dumps(doc, indent=2))
    else:
        print(report.format_table())
    if args.json:
        dump_json(doc, args.json)
    return EXIT_OK if report.certified else EXIT_NOT_CERTIFIED


def cmd_evaluate(args):
    model = load_model(args.model)
    dataset = load_dataset(args.dataset)
    if not dataset.split(args.split):
        raise ConfigError(f"split {args.split!r} has no trajectories")
    certified = certify(model).certified
    trajectories = dataset.split(args.split)

    def one(traj):
        sub = type(dataset)([traj], dataset.sampling_time, dataset.norm, dataset.metadata)
        return evaluate(model, sub, args.split, args.washout, certified, args.domain)[0]

    if args.threads > 1:
        with ThreadPoolExecutor(args.threads) as pool:
            reports = list(pool.map(one, trajectories))
    else:
        reports = [one(t) for t in trajectories]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(reports, out / f"report_{args.split}.csv", model.p)
    for r in reports:
        write_plot_csv(r, out / f"plot_{r.trajectory}.csv")
    summary = summarize(reports)
    summary.update(schema_version=SCHEMA_VERSION, kind="nnarx-eval-summary", split=args.split,
                   model=str(args.model), dataset=str(args.dataset),
                   model_metadata=load_model_metadata(args.model))
    dump_json(summary, out / f"summary_{args.split}.json")
    for r in reports:
        status = "diverged" if r.diverged else f"FIT {r.fit_percent:.2f}%"
        print(f"{r.trajectory}: {status}")
    if "fit_percent" in summary:
        print(f"pooled FIT {summary['fit_percent']:.2f}%")
    return EXIT_OK


def load_model_metadata(path):
    return json.loads(Path(path).read_text()).get("metadata", {})


def probe_pairs(model, n_pairs, horizon, seed=0, state_scale=1.0, divergence_threshold=1e12):
    """Run the Lyapunov/contraction probe on ``n_pairs`` random state pairs.

    Both trajectories of a pair share one MPRS input (normalized units).
    Returns ``(rows, results)``: CSV rows and per-pair
    ``(initial distance, final distance, diverged_at)``.
    """
    in_seed, state_seed = np.random.SeedSequence(seed).spawn(2)
    mprs = MprsConfig(levels=np.linspace(-1.0, 1.0, 9), hold_min=10, hold_max=50, length=horizon)
    u_seq = mprs_generate(mprs, np.random.default_rng(in_seed))
    u_seq = np.repeat(u_seq[:, None], model.m, axis=1) if u_seq.ndim == 1 else u_seq
    rng = np.random.default_rng(state_seed)
    constants = compute_constants(model.ffnn)
    rows, results = [], []
    for pair in range(n_pairs):
        xa = rng.uniform(-state_scale, state_scale, model.n)
        xb = rng.uniform(-state_scale, state_scale, model.n)
        d0 = float(np.linalg.norm(xa - xb))
        d, diverged_at = d0, None
        for k in range(horizon):
            with np.errstate(over="ignore", invalid="ignore"):
                rec = lyapunov_decrease_probe(model, xa, xb, u_seq[k], u_seq[k], override=True,
                                              constants=constants)
                rows.append([pair, k, d, rec.delta_v, rec.bound, rec.slack])
                try:
                    xa, _ = step(model, xa, u_seq[k])
                    xb, _ = step(model, xb, u_seq[k])
                    d = float(np.linalg.norm(xa - xb))
                except NumericDivergence:
                    d = float("inf")
            if not d <= divergence_threshold:
                diverged_at = k + 1
                break
        if diverged_at is None:
            rows.append([pair, horizon, d, "", "", ""])
        results.append((d0, d, diverged_at))
    return rows, results


def cmd_probe(args):
    if args.demo == "explosive":
        model = explosive_demo_model()
    elif args.model:
        model = load_model(args.model)
    else:
        raise ConfigError("give a model file or --demo explosive")
    rows, results = probe_pairs(model, args.pairs, args.horizon, args.seed, args.state_scale)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write(",".join(PROBE_COLUMNS) + "\n")
            for row in rows:
                fh.write(",".join(v if isinstance(v, str) else repr(v) for v in row) + "\n")
    for pair, (d0, d, diverged_at) in enumerate(results):
        if diverged_at is not None:
            print(f"pair {pair}: diverged at step {diverged_at} (distance {d:.3e}, initial {d0:.3e})")
        elif d0 == 0:
            print(f"pair {pair}: identical initial states, final distance {d:.3e}")
        else:
            print(f"pair {pair}: final distance ratio {d / d0:.3e} after {args.horizon} steps")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="nnarx", description="Stability-certified NNARX identification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-trajectory evaluation (default 1, deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment configuration (JSON)")
        p.add_argument("--seed", type=int, help="master seed (overrides the configuration)")
        p.add_argument("--output-dir", help="output root (overrides the configuration)")

    p = sub.add_parser("generate", help="simulate a plant and write a dataset")
    common(p)
    p.add_argument("--out", help="dataset directory (default <output_dir>/dataset)")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", help="output directory (default <output_dir>/train)")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--washout", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="check the stability condition of a model")
    p.add_argument("model")
    p.add_argument("--margin", type=float, default=0.0, help="require nu < -margin")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--json", help="also write the report to this file")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("evaluate", help="open-loop simulation metrics on a dataset split")
    p.add_argument("model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--washout", type=int, default=20)
    p.add_argument("--domain", default="physical", choices=("physical", "normalized"))
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", help="contraction and Lyapunov-decrease probe")
    p.add_argument("model", nargs="?")
    p.add_argument("--demo", choices=("explosive",))
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--state-scale", type=float, default=1.0)
    p.add_argument("--out", help="probe CSV path")
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be positive")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, InvalidArgument, InvalidModel, OSError, json.JSONDecodeError) as exc:
        print(f"nnarx: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (_Failure, NumericDivergence, ConvergenceFailure) as exc:
        print(f"nnarx: failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
