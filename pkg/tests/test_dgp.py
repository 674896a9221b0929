import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from exactqr.dgp import (DgpId, DgpSpec, SingularDensityError, analytic_components, density, population_moment_le,
                         q_matrix, replication_rng, sample, theta_true, uniform_orderstat_bias)

import oracles

M = np.array([[1.0, 0.5], [0.5, 1.0 / 3.0]])


def test_sample_is_deterministic():
    a = sample(DgpSpec("dgp1", 40, seed=11))
    b = sample(DgpSpec("dgp1", 40, seed=11))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.w, b.w)
    c = sample(DgpSpec("dgp1", 40, seed=12))
    assert not np.array_equal(a.y, c.y)


def test_dgp1_errors_in_unit_interval():
    ds = sample(DgpSpec("dgp1", 500, seed=1))
    e = ds.y - ds.w[:, 1]
    assert e.min() >= 0.0 and e.max() <= 1.0
    np.testing.assert_array_equal(ds.z, ds.w)


def test_dgp3_median_zero():
    ds = sample(DgpSpec("dgp3", 100_000, seed=5))
    assert abs(np.median(ds.y - ds.w[:, 1])) < 0.01


def test_univariate_design():
    ds = sample(DgpSpec("uniform1d", 20, seed=2))
    assert ds.k == 1 and np.all(ds.w == 1.0)
    assert np.all((ds.y >= 0) & (ds.y <= 1))


def test_replication_streams_differ_and_repeat():
    a = replication_rng(7, 3).random(4)
    np.testing.assert_array_equal(a, replication_rng(7, 3).random(4))
    assert not np.array_equal(a, replication_rng(7, 4).random(4))
    assert not np.array_equal(a, replication_rng(8, 3).random(4))


@pytest.mark.parametrize("dgp, tau, expected", [
    ("dgp1", 0.5, (0.5, 1.0)), ("dgp2", 0.25, (0.5, 1.0)), ("dgp3", 0.5, (0.0, 1.0))])
def test_theta_true(dgp, tau, expected):
    np.testing.assert_allclose(theta_true(DgpId.parse(dgp), tau), expected, atol=1e-15)


def test_dgp_parse_rejects_unknown():
    with pytest.raises(ValueError):
        DgpId.parse("dgp9")
    assert DgpId.parse(DgpId.CAUCHY) is DgpId.CAUCHY


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.85])
def test_dgp1_components(tau):
    t = analytic_components("dgp1", tau)
    np.testing.assert_allclose(t.G, M, atol=1e-15)
    assert np.all(t.Q == 0)
    np.testing.assert_allclose(t.Omega, tau * (1 - tau) * M, atol=1e-15)


def test_dgp1_median_kappa1_zero():
    assert np.all(analytic_components("dgp1", 0.5).kappa1 == 0)


def test_dgp2_jacobian_matches_numerical_derivative():
    t = analytic_components("dgp2", 0.25)
    np.testing.assert_allclose(t.G, M, atol=1e-14)
    np.testing.assert_allclose(oracles.jacobian_fd("dgp2", t.theta0), t.G, atol=1e-7)


@pytest.mark.parametrize("dgp", ["dgp1", "dgp2", "dgp3"])
@pytest.mark.parametrize("tau", [0.15, 0.5, 0.8])
def test_components_match_quadrature_oracle(dgp, tau):
    t = analytic_components(dgp, tau)
    G, Omega, kappa1, dG = oracles.location_components(dgp, tau)
    np.testing.assert_allclose(t.G, G, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(t.Omega, Omega, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(t.kappa1, kappa1, rtol=1e-9, atol=1e-12)
    for a, b in zip(t.dG, dG):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("dgp", ["dgp1", "dgp2", "dgp3"])
def test_population_moment_matches_oracle(dgp):
    theta = np.array([0.3, 1.2])
    np.testing.assert_allclose(population_moment_le(DgpId.parse(dgp), theta),
                               oracles.population_moment(dgp, theta), atol=1e-10)


def test_population_moment_is_tau_at_truth():
    for tau in (0.2, 0.7):
        np.testing.assert_allclose(population_moment_le(DgpId.TRIANGULAR, theta_true(DgpId.TRIANGULAR, tau)),
                                   tau * np.array([1.0, 0.5]), atol=1e-12)


def test_singular_density_rejected():
    # density of DGP2 vanishes only in the limit; a tiny quantile level is still fine
    analytic_components("dgp2", 1e-6)
    with pytest.raises(SingularDensityError):
        analytic_components("dgp2", 1e-30)


@pytest.mark.parametrize("dgp", [DgpId.TRIANGULAR, DgpId.CAUCHY])
def test_densities_integrate_to_one(dgp):
    f = lambda t: float(density(dgp, t))
    if dgp is DgpId.TRIANGULAR:
        total = integrate.quad(f, 0, 1)[0]
    else:
        total = integrate.quad(f, -np.inf, np.inf, epsabs=1e-12)[0]
    assert abs(total - 1) < 1e-8


def test_q_matrix_vec_identity(rng):
    for k in (2, 3):
        G = rng.normal(size=(k, k)) + 3 * np.eye(k)
        dG = [rng.normal(size=(k, k)) for _ in range(k)]
        Q = q_matrix(G, dG)
        Gi = np.linalg.inv(G)
        for j in range(k):
            np.testing.assert_allclose(Q[:, j].reshape(k, k, order="F"), Gi.T @ dG[j] @ Gi, atol=1e-12)


# ---------------------------------------------------------------------------
# order statistics

def test_orderstat_examples():
    assert uniform_orderstat_bias(10, 0.5, "lower", "exact") == pytest.approx(-1 / 22, abs=1e-15)
    assert uniform_orderstat_bias(10, 0.5, "lower", "asymptotic") == pytest.approx(-0.05, abs=1e-15)
    gap = uniform_orderstat_bias(10, 0.5, "upper", "exact") - uniform_orderstat_bias(10, 0.5, "lower", "exact")
    assert gap == pytest.approx(1 / 11, abs=1e-15)


@given(st.integers(2, 10_000), st.integers(1, 99), st.sampled_from(["lower", "upper"]))
def test_orderstat_expansion_error(n, pct, corner):
    tau = pct / 100
    k = math.floor(round(tau * n, 9))
    if (corner == "lower" and k < 1) or k + 1 > n and corner == "upper":
        with pytest.raises(ValueError):
            uniform_orderstat_bias(n, tau, corner)
        return
    exact = uniform_orderstat_bias(n, tau, corner, "exact")
    asym = uniform_orderstat_bias(n, tau, corner, "asymptotic")
    assert n * abs(exact - asym) <= 2 / (n + 1) + 1e-12
    upper = corner == "upper"
    assert exact == pytest.approx(float(oracles.orderstat_exact(n, tau, upper)), abs=1e-14)
    assert asym == pytest.approx(float(oracles.orderstat_asymptotic(n, tau, upper)), abs=1e-14)
