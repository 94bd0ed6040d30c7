"""Acceptance criteria 1-9.

Each test records its outcome with ``record`` before asserting, and the
terminal summary prints one PASS/FAIL line per criterion.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from helpers import norm_profile_model, random_params
from nnarx.cli import main
from nnarx.config import ExperimentConfig, make_excitation, make_plant
from nnarx.datasets import build_dataset
from nnarx.metrics import evaluate, fit_index
from nnarx.model import NnarxModel, build_canonical_matrices
from nnarx.signals import MprsConfig, mprs_generate
from nnarx.stability import (
    certify,
    contraction_probe,
    explosive_demo_model,
    lyapunov_matrix,
    scale_to_residual,
    spectral_norm,
    stability_residual,
    stability_threshold,
)
from nnarx.training import PenaltyConfig, loss, loss_and_gradients, train
from oracles import jacobi_singular_values


def test_criterion_1_lyapunov_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for N in range(1, 7):
        for m in range(1, 4):
            for p in range(1, 4):
                A = build_canonical_matrices(N, m, p).A.astype(np.int64)
                P = lyapunov_matrix(N, m, p).astype(np.int64)
                worst = max(worst, np.max(np.abs(A.T @ P @ A - P + np.eye(A.shape[0], dtype=np.int64))))
    elapsed = time.perf_counter() - t0
    ok = worst == 0 and elapsed < 1.0
    record(1, ok, f"max residual {worst}, {elapsed:.3f} s")
    assert ok


def test_criterion_2_certificate_arithmetic():
    nu = stability_residual(norm_profile_model(0.453, 0.985))
    ok = abs(nu - (-0.05380)) <= 1e-4
    record(2, ok, f"nu = {nu:.6f}")
    assert ok


def _fd_config(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.choice([2, 4]))
    depth = int(rng.integers(1, 3))
    widths = tuple(int(w) for w in rng.integers(2, 9, depth))
    params = random_params(rng, N=N, widths=widths)
    u = rng.normal(size=(20, 1))
    y = rng.normal(size=(20, 1))
    return NnarxModel(params, N), u, y


def _oracle_loss(model, batch, washout, penalty):
    # data term from the library, hinge term from exact LAPACK singular values
    data = np.mean([loss(model, u, y, washout, PenaltyConfig(0.0, penalty.margin)) for u, y in batch])
    prod = np.prod([np.linalg.svd(a, compute_uv=False)[0]
                    for name, a in zip(model.ffnn.array_names(), model.ffnn.arrays()) if name.startswith("U")])
    nu = prod - stability_threshold(model.ffnn, model.N)
    return data + penalty.weight * max(0.0, nu + penalty.margin)


def test_criterion_3_gradients_match_finite_differences():
    t0 = time.perf_counter()
    penalty = PenaltyConfig()
    worst = 0.0
    h = 1e-6
    for seed in range(5):
        model, u, y = _fd_config(seed)
        batch = [(u, y)]
        _, grads, _ = loss_and_gradients(model, batch, 5, penalty)
        arrays = model.ffnn.arrays()
        for i, a in enumerate(arrays):
            for idx in np.ndindex(a.shape):
                vals = []
                for sign in (1, -1):
                    shifted = [b.copy() for b in arrays]
                    shifted[i][idx] += sign * h
                    probe = NnarxModel(model.ffnn.with_arrays(shifted), model.N)
                    vals.append(_oracle_loss(probe, batch, 5, penalty))
                fd = (vals[0] - vals[1]) / (2 * h)
                # relative error with a floor so entries near zero are judged on absolute error
                err = abs(grads[i][idx] - fd) / max(abs(fd), abs(grads[i][idx]), 1e-6)
                worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 30
    record(3, ok, f"worst relative error {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_criterion_4_incremental_stability():
    t0 = time.perf_counter()
    ratios, unbounded = [], 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        N = int(rng.integers(1, 6))
        widths = tuple(int(w) for w in rng.integers(2, 11, int(rng.integers(1, 3))))
        params = scale_to_residual(random_params(rng, N=N, widths=widths), N, -0.05)
        model = NnarxModel(params, N)
        assert certify(model).nu <= -0.05 + 1e-9
        u = mprs_generate(MprsConfig(levels=np.linspace(-1, 1, 9), length=200), rng)
        xa, xb = rng.uniform(-1, 1, (2, 10, model.n))
        trace = contraction_probe(model, xa, xb, u)
        if trace.diverged:
            unbounded += 10
            continue
        ratios.extend(trace.ratio())
    share = np.mean(np.asarray(ratios) <= 1e-6) if ratios else 0.0
    share = share * len(ratios) / 1000
    elapsed = time.perf_counter() - t0
    ok = share >= 0.99 and unbounded == 0 and elapsed < 60
    record(4, ok, f"{share:.1%} of 1000 pairs contracted below 1e-6, {unbounded} unbounded, {elapsed:.1f} s")
    assert ok


def test_criterion_5_explosive_demo():
    t0 = time.perf_counter()
    trace = contraction_probe(explosive_demo_model(), np.array([1.0, 0.0]), np.array([0.5, 0.0]),
                              np.zeros(50))
    growth = np.max(trace.distances) / trace.distances[0]
    first = int(np.argmax(trace.distances / trace.distances[0] > 1e6))
    elapsed = time.perf_counter() - t0
    ok = growth > 1e6 and 0 < first <= 50 and elapsed < 1
    record(5, ok, f"distance exceeds 1e6x initial at step {first}")
    assert ok


def _end_to_end(seed):
    cfg = ExperimentConfig(seed=seed)
    ds_cfg = cfg.dataset
    dataset = build_dataset(make_plant(cfg.plant, Path(".")), make_excitation(cfg.excitation),
                            ds_cfg.n_train, ds_cfg.n_val, ds_cfg.n_test, noise_rel=ds_cfg.noise_rel, seed=seed)
    model, history, report = train(dataset, cfg.model, cfg.train)
    fit = evaluate(model, dataset, "test", washout=cfg.eval.washout)[0].fit_percent
    return report.nu, fit


@pytest.mark.slow
def test_criterion_6_end_to_end_identification():
    results = []
    for seed in range(5):
        t0 = time.perf_counter()
        nu, fit = _end_to_end(seed)
        results.append((seed, nu, fit, time.perf_counter() - t0))
    passed = sum(nu < 0 and fit >= 85 for _, nu, fit, _ in results)
    slowest = max(r[3] for r in results)
    detail = "; ".join(f"seed {s}: nu {nu:.4f} FIT {fit:.2f}" for s, nu, fit, _ in results)
    ok = passed >= 4 and slowest <= 600
    record(6, ok, f"{passed}/5 seeds pass, slowest {slowest:.0f} s ({detail})")
    assert ok


def test_criterion_7_fit_identities():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        y = rng.normal(size=(int(rng.integers(2, 200)), int(rng.integers(1, 4))))
        worst = max(worst, abs(fit_index(y, y) - 100.0))
        worst = max(worst, abs(fit_index(np.broadcast_to(y.mean(axis=0), y.shape), y)))
    ok = worst <= 1e-10
    record(7, ok, f"worst deviation {worst:.1e}")
    assert ok


def test_criterion_8_determinism_replay(tmp_path):
    t0 = time.perf_counter()
    histories = []
    for run in ("a", "b"):
        root = tmp_path / run
        args = ["--seed", "21", "--output-dir", str(root)]
        assert main(["generate", *args]) == 0
        assert main(["train", *args, "--dataset", str(root / "dataset"), "--max-epochs", "50"]) == 0
        assert main(["evaluate", str(root / "train" / "model.json"), "--dataset", str(root / "dataset"),
                     "--out", str(root / "eval")]) == 0
        histories.append((root / "train" / "history.csv").read_bytes())
    elapsed = time.perf_counter() - t0
    ok = histories[0] == histories[1] and histories[0].count(b"\n") == 51 and elapsed < 120
    record(8, ok, f"history CSVs identical: {histories[0] == histories[1]}, {elapsed:.1f} s")
    assert ok


def test_criterion_9_spectral_norm_oracle():
    rng = np.random.default_rng(9)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        r, c = rng.integers(1, 21, 2)
        M = rng.normal(size=(r, c))
        worst = max(worst, abs(spectral_norm(M) / jacobi_singular_values(M)[0] - 1))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 5
    record(9, ok, f"worst relative error {worst:.1e}, {elapsed:.2f} s")
    assert ok
