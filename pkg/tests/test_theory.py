import math

import numpy as np
import pytest
from scipy import integrate

from tknet import theory
from tknet.theory import (composed_u_statistic, gaussian_expectation_mc, max_rel_error,
                          neural_temporal_kernel, nn_kernel_analytic, normalize_diag,
                          ntk_temporal_analytic, relu_expectations, shift_for_chi2)
from tknet.spectral import chi2_divergence_gaussian


def relu(u):
    return np.maximum(u, 0.0)


def step(u):
    return (u > 0).astype(float)


def _pair_cov(K, i, j):
    return np.array([[K[i, i], K[i, j]], [K[j, i], K[j, j]]])


def test_first_layer_kernel_example():
    sig = nn_kernel_analytic(np.array([[1.0, 1.0], [1.0, -1.0]]), 1)[0]
    assert sig[0, 1] == 1.0 and sig[0, 0] == 2.0


def test_second_layer_diagonal_is_half_plus_one():
    X = np.random.default_rng(0).standard_normal((5, 3))
    s1, s2 = nn_kernel_analytic(X, 2)
    np.testing.assert_allclose(np.diag(s2), 0.5 * np.diag(s1) + 1.0, rtol=1e-14)


@pytest.mark.parametrize("pair", [0, 1, 2])
def test_relu_closed_forms_match_monte_carlo(pair):
    rng = np.random.default_rng(pair)
    X = rng.standard_normal((2, 3))
    K = nn_kernel_analytic(X, 1)[0]
    k1, k0 = relu_expectations(K)
    # the diagonal uses an independent second coordinate with fn(u, u)
    diag_cov = np.diag([K[0, 0], 1.0])
    for g, ref in ((relu, k1), (step, k0)):
        mean, se = gaussian_expectation_mc(K, lambda u, v: g(u) * g(v), 10**6, rng)
        assert abs(mean - ref[0, 1]) <= 3 * se
        mean, se = gaussian_expectation_mc(diag_cov, lambda u, v: g(u) * g(u), 10**6, rng)
        assert abs(mean - ref[0, 0]) <= 3 * se


def test_relu_expectations_handle_perfect_correlation():
    K = np.array([[2.0, 2.0], [2.0, 2.0]])
    k1, k0 = relu_expectations(K)
    np.testing.assert_allclose(k1, 1.0, rtol=1e-12)
    np.testing.assert_allclose(k0, 0.5, rtol=1e-12)


def test_non_relu_activation_rejected():
    with pytest.raises(ValueError):
        nn_kernel_analytic(np.ones((2, 2)), 2, activation="tanh")


# ---------------------------------------------------------------------------
# NTK


def _arccos(K):
    """Order-1 and order-0 arc-cosine kernels written out entry by entry."""
    n = K.shape[0]
    k1, k0 = np.empty_like(K), np.empty_like(K)
    for i in range(n):
        for j in range(n):
            norm = math.sqrt(K[i, i] * K[j, j])
            th = math.acos(max(-1.0, min(1.0, K[i, j] / norm)))
            k1[i, j] = norm * (math.sin(th) + (math.pi - th) * math.cos(th)) / (2 * math.pi)
            k0[i, j] = (math.pi - th) / (2 * math.pi)
    return k1, k0


def _standard_ntk(X, depth):
    sig = X @ X.T / X.shape[1] + 1.0
    theta = sig.copy()
    for _ in range(1, depth):
        k1, k0 = _arccos(sig)
        sig = k1 + 1.0
        theta = theta * k0 + sig
    return theta


@pytest.mark.parametrize("depth", [1, 2, 4])
def test_inert_temporal_kernel_gives_standard_ntk(depth):
    X = np.random.default_rng(depth).standard_normal((5, 3))
    rec = ntk_temporal_analytic(X, depth, kt=np.ones((5, 5)), compose_at=1)
    assert np.max(np.abs(rec.ntk - _standard_ntk(X, depth))) <= 1e-12
    assert np.max(np.abs(ntk_temporal_analytic(X, depth).ntk - _standard_ntk(X, depth))) <= 1e-12


def test_one_layer_ntk_is_composed_kernel():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((4, 3))
    A = rng.standard_normal((4, 6))
    kt = A @ A.T / 6
    rec = ntk_temporal_analytic(X, 1, kt=kt, compose_at=1)
    np.testing.assert_allclose(rec.ntk, nn_kernel_analytic(X, 1)[0] * kt, rtol=1e-14)
    np.testing.assert_allclose(rec.sigma[0], neural_temporal_kernel(nn_kernel_analytic(X, 1)[0], kt, 0)[0])


def test_composition_at_output_layer():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4, 3))
    A = rng.standard_normal((4, 4))
    kt = normalize_diag(A @ A.T)
    rec = ntk_temporal_analytic(X, 2, kt=kt, compose_at=2)
    s1 = nn_kernel_analytic(X, 1)[0]
    k1, k0 = _arccos(s1)
    np.testing.assert_allclose(rec.ntk, (s1 * k0 + k1 + 1.0) * kt, rtol=1e-12)
    with pytest.raises(ValueError):
        ntk_temporal_analytic(X, 2, kt=kt, compose_at=3)


def test_two_layer_temporal_ntk_expectations_match_monte_carlo():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((4, 3))
    A = rng.standard_normal((4, 8))
    kt = normalize_diag(A @ A.T)
    rec = ntk_temporal_analytic(X, 2, kt=kt, compose_at=1)
    sig_t = rec.sigma[0]
    theta = rec.theta[0]
    for i, j in [(0, 1), (1, 2), (2, 3), (0, 3)]:
        cov = _pair_cov(sig_t, i, j)
        e1, se1 = gaussian_expectation_mc(cov, lambda u, v: relu(u) * relu(v), 10**5, rng)
        e0, se0 = gaussian_expectation_mc(cov, lambda u, v: step(u) * step(v), 10**5, rng)
        assert abs(rec.sigma[1][i, j] - (e1 + 1.0)) <= 3 * se1
        assert abs(rec.sigma_dot[1][i, j] - e0) <= 3 * se0
        assert rec.ntk[i, j] == pytest.approx(theta[i, j] * rec.sigma_dot[1][i, j] + rec.sigma[1][i, j], rel=1e-14)


def test_max_rel_error_and_normalization():
    K = np.array([[4.0, 2.0], [2.0, 9.0]])
    np.testing.assert_allclose(normalize_diag(K), [[1.0, 1 / 3], [1 / 3, 1.0]])
    assert max_rel_error(np.array([1.1, 2.0]), np.array([1.0, 2.0])) == pytest.approx(0.1)


# ---------------------------------------------------------------------------
# misspecification helpers


@pytest.mark.parametrize("delta", [0.1, 1.0, 4.0])
def test_shift_hits_chi2_budget(delta):
    assert chi2_divergence_gaussian(shift_for_chi2(delta), 1.0, 0.0, 1.0) == pytest.approx(delta, rel=1e-12)


def test_u_statistic_matches_brute_force():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((9, 3))
    phi = rng.standard_normal((9, 4))
    sig = x @ x.T / 3 + 1.0
    kt = phi @ phi.T
    brute = (np.sum(sig * kt) - np.trace(sig * kt)) / (9 * 8)
    assert composed_u_statistic(x, phi) == pytest.approx(brute, rel=1e-12)


def test_time_feature_mean_matches_quadrature():
    freqs = np.array([0.0, 0.7, -1.3, 2.5])
    t_max = 2.0
    got = theory._time_feature_mean(freqs, t_max)
    for k, w in enumerate(freqs):
        c, _ = integrate.quad(lambda t: math.cos(w * t), 0, t_max)
        s, _ = integrate.quad(lambda t: math.sin(w * t), 0, t_max)
        assert got[2 * k] == pytest.approx(c / t_max / 2.0, abs=1e-12)
        assert got[2 * k + 1] == pytest.approx(s / t_max / 2.0, abs=1e-12)


# ---------------------------------------------------------------------------
# reduced-size runs of each check (the full-size runs live in the acceptance suite)


def test_gp_check_small():
    rep = theory.gp_limit_check(widths=(64, 1024), n_draws=40, seeds=2)
    meds = [r[2] for r in rep.rows if r[1] == "median"]
    assert meds[1] < meds[0]


def test_ntk_check_small():
    rep = theory.ntk_check(width=512, seeds=2)
    assert rep.passed, rep.failures


def test_rff_check_small():
    rep = theory.rff_check(ms=(256, 1024), seeds=20, abs_tol=1.0)
    assert rep.passed, rep.failures


def test_flow_check_small():
    assert theory.flow_check(dims=(1, 3), n_samples=100).passed
    assert theory.flow_check(dims=(2,), n_samples=50, zero_init=True).passed


def test_misspec_check_small():
    rep = theory.misspecification_check(ns=(64, 1024), seeds=20)
    assert rep.passed, rep.failures


def test_report_csv(tmp_path):
    rep = theory.CheckReport("x", ["a", "b"])
    rep.rows.append((1, 2.5))
    rep.fail("bad")
    rep.write_csv(tmp_path / "r.csv")
    assert not rep.passed
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "check,a,b"


def test_parallel_map_is_order_preserving():
    assert theory._map(abs, [-3, 2, -1], jobs=2) == [3, 2, 1]
