import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import norm_profile_model, random_model, random_params, single_layer
from nnarx.exceptions import ConvergenceFailure, InvalidArgument, InvalidModel
from nnarx.model import FfnnParams, Layer, NnarxModel, build_canonical_matrices
from nnarx.stability import (
    Verdict,
    certify,
    compute_constants,
    contraction_probe,
    explosive_demo_model,
    lyapunov_decrease_probe,
    lyapunov_matrix,
    robust_spectral_norm,
    scale_to_residual,
    spectral_norm,
    stability_residual,
)
from oracles import dense_step, jacobi_singular_values


def test_spectral_norm_trivial():
    assert spectral_norm(np.eye(3)) == pytest.approx(1.0, abs=1e-12)
    assert spectral_norm(np.diag([3.0, 2.0])) == pytest.approx(3.0, abs=1e-12)
    assert spectral_norm(np.zeros((3, 2))) == 0.0


def test_spectral_norm_random_10x8(rng):
    M = rng.normal(size=(10, 8))
    assert spectral_norm(M) == pytest.approx(jacobi_singular_values(M)[0], rel=1e-8)


def test_jacobi_oracle_sane(rng):
    M = rng.normal(size=(5, 7))
    np.testing.assert_allclose(jacobi_singular_values(M), np.linalg.svd(M, compute_uv=False), rtol=1e-12)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
@settings(max_examples=40)
def test_spectral_norm_vectors(r, c, seed):
    M = np.random.default_rng(seed).normal(size=(r, c))
    sigma, u, v = spectral_norm(M, return_vectors=True)
    np.testing.assert_allclose(M @ v, sigma * u, atol=1e-6 * sigma)
    assert np.linalg.norm(u) == pytest.approx(1.0) and np.linalg.norm(v) == pytest.approx(1.0)


def test_spectral_norm_errors():
    with pytest.raises(InvalidArgument):
        spectral_norm(np.ones(3))
    with pytest.raises(InvalidArgument):
        spectral_norm(np.array([[np.nan]]))
    with pytest.raises(InvalidArgument):
        spectral_norm(np.eye(2), tol=0)
    # nearly repeated top singular values stall a capped iteration
    M = np.diag([1.0, 1.0 - 1e-9, 0.5])
    with pytest.raises(ConvergenceFailure) as info:
        spectral_norm(M, max_iter=3, v0=np.ones(3))
    assert info.value.estimate > 0
    assert robust_spectral_norm(M, max_iter=3, v0=np.ones(3)) == pytest.approx(1.0, abs=1e-12)


def test_constants_single_layer_collapse():
    params = single_layer(U0=[[0.0, 0.6]], U1=[[0.0, 0.0], [0.0, 0.7]], W1=[[0.3], [-0.4]])
    K_x, K_u, K_b = compute_constants(params)
    assert K_x == pytest.approx(0.6 * 0.7, abs=1e-12)
    assert K_u == pytest.approx(0.6 * 0.5, abs=1e-12)
    assert K_b == pytest.approx(0.6, abs=1e-12)


def test_constants_zero_state_weights(rng):
    params = random_params(rng, widths=(3, 2))
    arrays = [np.zeros_like(a) if n.startswith("U") else a for n, a in zip(params.array_names(), params.arrays())]
    assert compute_constants(params.with_arrays(arrays)) == (0.0, 0.0, 0.0)


def test_constants_two_layers_literal_formula(rng):
    params = random_params(rng, N=2, widths=(4, 3))
    s = lambda M: np.linalg.svd(M, compute_uv=False)[0]
    l1, l2 = params.layers
    u0, u1, u2, w1, w2 = s(params.U0), s(l1.U), s(l2.U), s(l1.W), s(l2.W)
    K_x, K_u, K_b = compute_constants(params)
    assert K_x == pytest.approx(u0 * u1 * u2, rel=1e-12)
    assert K_u == pytest.approx(u0 * (u2 * w1 + w2), rel=1e-12)
    assert K_b == pytest.approx(u0 * (u2 + 1.0), rel=1e-12)


def test_residual_examples():
    assert stability_residual(norm_profile_model(0.0, 0.0)) == pytest.approx(-0.5, abs=1e-15)
    assert stability_residual(norm_profile_model(0.453, 0.985)) == pytest.approx(-0.053795, abs=1e-12)
    boundary = NnarxModel(single_layer([[1.0]], [[1.0, 0.0]]), N=1)
    assert stability_residual(boundary) == 0.0
    assert certify(boundary).verdict is Verdict.NOT_CERTIFIED


def test_certify_verdicts():
    zero = norm_profile_model(0.0, 0.0, N=9, n_state=18)
    report = certify(zero)
    assert report.certified and report.nu == pytest.approx(-1 / 3)
    assert certify(norm_profile_model(0.453, 0.985)).certified
    bad = certify(norm_profile_model(1.0, 1.0))
    assert not bad.certified and bad.nu == pytest.approx(0.5)
    assert "sufficient, not necessary" in bad.format_table()
    d = report.to_dict()
    assert d["verdict"] == "CertifiedIssAndDeltaIss" and d["certified"] is True


def test_certify_margin():
    model = norm_profile_model(0.453, 0.985)
    assert certify(model, margin=0.05).certified
    assert not certify(model, margin=0.06).certified
    with pytest.raises(InvalidArgument):
        certify(model, margin=-1)


def test_certify_rejects_nan():
    params = single_layer([[np.nan]], [[1.0, 0.0]])
    with pytest.raises(InvalidModel):
        certify(NnarxModel(params, N=1))


def test_lyapunov_matrix_examples():
    np.testing.assert_array_equal(lyapunov_matrix(1, 1, 1), np.eye(2))
    np.testing.assert_array_equal(lyapunov_matrix(4, 1, 1), np.diag([1, 1, 2, 2, 3, 3, 4, 4.0]))


@pytest.mark.parametrize("N", range(1, 7))
@pytest.mark.parametrize("m", range(1, 4))
@pytest.mark.parametrize("p", range(1, 4))
def test_lyapunov_identity_exact(N, m, p):
    A = build_canonical_matrices(N, m, p).A
    P = lyapunov_matrix(N, m, p)
    assert np.max(np.abs(A.T @ P @ A - P + np.eye(A.shape[0]))) == 0.0


def _certified_model(rng, N=3, widths=(5,), nu=-0.1, m=1, p=1):
    params = random_params(rng, N=N, m=m, p=p, widths=widths)
    return NnarxModel(scale_to_residual(params, N, nu), N)


def test_scale_to_residual(rng):
    model = _certified_model(rng, nu=-0.07)
    assert stability_residual(model) == pytest.approx(-0.07, abs=1e-10)


def test_probe_identical_pairs(rng):
    model = _certified_model(rng)
    x = rng.normal(size=model.n)
    rec = lyapunov_decrease_probe(model, x, x, [0.3], [0.3])
    assert rec.delta_v == 0.0 and rec.bound >= 0.0


def test_probe_requires_certificate(rng):
    model = NnarxModel(single_layer([[1.0]], [[2.0, 0.0]]), N=1)
    with pytest.raises(InvalidArgument):
        lyapunov_decrease_probe(model, [1.0, 0.0], [0.0, 0.0], [0.0], [0.0])
    lyapunov_decrease_probe(model, [1.0, 0.0], [0.0, 0.0], [0.0], [0.0], override=True)


def test_probe_bound_holds_over_draws(rng):
    model = _certified_model(rng, N=4, widths=(6,), nu=-0.05)
    K_x, _, _ = compute_constants(model.ffnn)
    assert 1 - model.N * K_x ** 2 > 0
    for _ in range(1000):
        xa, xb = rng.normal(size=(2, model.n))
        u = rng.normal(size=1)
        rec = lyapunov_decrease_probe(model, xa, xb, u, u)
        assert rec.delta_v <= rec.bound + 1e-12
        assert rec.bound <= rec.lipschitz_bound + 1e-12
        assert rec.lipschitz_bound < 0


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_probe_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    model = _certified_model(rng, N=3, m=2, p=1, widths=(4,))
    P = lyapunov_matrix(3, 2, 1)
    xa, xb = rng.normal(size=(2, model.n))
    ua, ub = rng.normal(size=(2, 2))
    d0 = xa - xb
    d1 = dense_step(model, xa, ua) - dense_step(model, xb, ub)
    rec = lyapunov_decrease_probe(model, xa, xb, ua, ub)
    assert rec.delta_v == pytest.approx(d1 @ P @ d1 - d0 @ P @ d0, abs=1e-12)
    # the decrease equals its bound up to rounding
    assert rec.slack == pytest.approx(0.0, abs=1e-12)


def test_contraction_identical_states(rng):
    model = _certified_model(rng)
    x = rng.normal(size=model.n)
    trace = contraction_probe(model, x, x, np.zeros(50))
    assert not trace.diverged and not np.any(trace.distances)


def test_contraction_certified_constant_input(rng):
    model = _certified_model(rng, N=4, widths=(10,), nu=-0.05)
    xa, xb = rng.uniform(-1, 1, (2, model.n))
    trace = contraction_probe(model, xa, xb, np.full(200, 0.4))
    assert trace.distances.shape == (201,)
    assert trace.ratio() <= 1e-6


def test_contraction_batched(rng):
    model = _certified_model(rng)
    xa, xb = rng.normal(size=(2, 5, model.n))
    trace = contraction_probe(model, xa, xb, rng.normal(size=30), horizon=20)
    assert trace.distances.shape == (21, 5)
    u = rng.normal(size=20)
    batch = contraction_probe(model, xa, xb, u)
    single = contraction_probe(model, xa[2], xb[2], u)
    np.testing.assert_allclose(batch.distances[:, 2], single.distances, atol=1e-14)


def test_contraction_argument_checks(rng):
    model = _certified_model(rng)
    with pytest.raises(InvalidArgument):
        contraction_probe(model, np.zeros(model.n), np.zeros(model.n), np.zeros(5), horizon=6)
    with pytest.raises(InvalidArgument):
        contraction_probe(model, np.zeros(3), np.zeros(3), np.zeros(5))


def test_explosive_demo_diverges():
    model = explosive_demo_model()
    assert not certify(model).certified
    trace = contraction_probe(model, np.array([1.0, 0.0]), np.array([0.5, 0.0]), np.zeros(200))
    assert trace.diverged
    assert np.max(trace.distances) / trace.distances[0] > 1e6
    assert trace.diverged_at < 50
