import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neural_bridge.densities import (
    TiltedDensity,
    gaussian,
    log_rho,
    log_rho_k,
    mountaincar_prior,
    neg_relu,
    product,
    sample_base,
    standard_gaussian,
    uniform,
)
from neural_bridge.model import InvariantError, Particles, make_problem

from conftest import fd_grad


@pytest.mark.parametrize("z,out", [(1.0, 0.0), (-1.0, -1.0), (0.0, 0.0)])
def test_neg_relu(z, out):
    assert neg_relu(z) == out


def test_log_rho_beta_zero_is_base():
    base = standard_gaussian(2)
    z = np.array([[0.3, -1.2]])
    lp, g = log_rho(base, 0.0, -3.0, z, np.array([5.0]), np.array([[1.0, 1.0]]))
    lp0, g0 = base.log_prob(z)
    np.testing.assert_array_equal(lp, lp0)
    np.testing.assert_array_equal(g, g0)


def test_log_rho_example():
    # -log 2pi - beta |gamma - f| with gamma=-3, f=-2, beta=2
    lp, _ = log_rho(standard_gaussian(2), 2.0, -3.0, np.zeros((1, 2)), np.array([-2.0]))
    assert lp[0] == pytest.approx(-1.837877 - 2.0, abs=1e-6)
    assert lp[0] == pytest.approx(-math.log(2 * math.pi) - 2.0, rel=1e-12)


def test_log_rho_no_tilt_below_threshold():
    base = standard_gaussian(2)
    z = np.array([[1.0, 2.0]])
    for beta in (0.5, 3.0, 100.0):
        lp, _ = log_rho(base, beta, -3.0, z, np.array([-4.0]))
        assert lp[0] == base.log_prob(z)[0][0]


def test_log_rho_k_uses_caches_without_queries():
    p = make_problem(2, "std-gaussian", "synthetic", -3.0)
    parts = Particles.from_query(p, np.array([[0.5, 0.5], [4.0, 4.0]]))
    n0 = p.query_count
    lp, g = log_rho_k(p, 1.5, parts)
    assert p.query_count == n0
    assert lp.shape == (2,) and g.shape == (2, 2)
    parts.grad = None
    with pytest.raises(InvariantError):
        log_rho_k(p, 1.5, parts)


def test_limit_density():
    t = TiltedDensity(standard_gaussian(1), math.inf, 0.0)
    lp, _ = t.log_prob(np.array([[0.0], [0.0]]), np.array([1.0, -1.0]), None)
    assert lp[0] == -math.inf and np.isfinite(lp[1])


def test_tilted_gradient_matches_fd_synthetic():
    """Gradient of log rho_k (synthetic f, beta=1.7) at 100 off-ridge points."""
    p = make_problem(2, "std-gaussian", "synthetic", -1.0)
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 100:
        z = rng.standard_normal(2) * 2
        a, b = abs(z[0]), z[1]
        if abs(a - b) < 1e-3 or abs(z[0]) < 1e-3:
            continue
        def fn(v):
            f, _ = p.simulator(v[None], False)
            return log_rho(p.base, 1.7, p.gamma, v[None], f)[0][0]
        f, gf = p.simulator(z[None], True)
        if abs(f[0] - p.gamma) < 1e-3:
            continue
        _, g = log_rho(p.base, 1.7, p.gamma, z[None], f, gf)
        np.testing.assert_allclose(g[0], fd_grad(fn, z), rtol=1e-4, atol=1e-8)
        checked += 1


def test_uniform_factor_gradient_matches_fd():
    base = mountaincar_prior()
    rng = np.random.default_rng(4)
    for _ in range(100):
        z = rng.standard_normal(2) * np.array([2.0, 0.02])
        _, g = base.log_prob(z[None])
        np.testing.assert_allclose(g[0], fd_grad(lambda v: base.log_prob(v[None])[0][0], z, h=1e-7),
                                   rtol=1e-4, atol=1e-6)


@given(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-6), st.floats(0, 10), st.floats(0.01, 10))
def test_log_rho_monotone_in_beta(f_minus_gamma, beta, dbeta):
    base = standard_gaussian(1)
    z = np.zeros((1, 1))
    f = np.array([f_minus_gamma])
    lo, _ = log_rho(base, beta, 0.0, z, f)
    hi, _ = log_rho(base, beta + dbeta, 0.0, z, f)
    if f_minus_gamma > 0:
        assert hi[0] < lo[0]
    else:
        assert hi[0] == lo[0]
    assert lo[0] <= base.log_prob(z)[0][0]


def test_normalizer_nonincreasing_in_beta():
    # d=1, f(x) = x, gamma = 0: Z_beta by grid integration
    base = standard_gaussian(1)
    x = np.linspace(-10, 10, 20001)[:, None]
    zs = []
    for beta in (0.0, 0.5, 1.0, 2.0, 5.0):
        lp, _ = log_rho(base, beta, 0.0, x, x[:, 0])
        zs.append(np.trapezoid(np.exp(lp), x[:, 0]))
    assert zs[0] == pytest.approx(1.0, abs=1e-8)
    assert all(a >= b for a, b in zip(zs, zs[1:]))


def test_sample_gaussian_moments():
    x = sample_base(standard_gaussian(2), 10**6, np.random.default_rng(0))
    assert np.all(np.abs(x.mean(axis=0)) < 4e-3)


def test_sample_uniform_support():
    base = product([uniform(-0.59, -0.4)])
    x = base.to_constrained(base.sample(10**6, np.random.default_rng(1)))
    assert x.min() >= -0.59 and x.max() <= -0.4
    # uniform moments
    assert abs(x.mean() - (-0.495)) < 4 * 0.19 / math.sqrt(12 * 10**6)


def test_mountaincar_prior_factors():
    base = mountaincar_prior()
    assert base.factors[0] == uniform(-0.59, -0.4)
    assert base.factors[1] == gaussian(0.0, 1e-2)
    x = base.to_constrained(base.sample(200_000, np.random.default_rng(2)))
    assert abs(x[:, 1].var() - 1e-4) < 1e-5


@given(st.floats(-0.589, -0.401))
def test_logistic_roundtrip(x):
    base = mountaincar_prior()
    pt = np.array([[x, 0.01]])
    np.testing.assert_allclose(base.to_constrained(base.to_unconstrained(pt)), pt, atol=1e-12)


def test_uniform_density_in_z_integrates_to_one():
    base = product([uniform(2.0, 5.0)])
    z = np.linspace(-40, 40, 40001)[:, None]
    lp, _ = base.log_prob(z)
    assert np.trapezoid(np.exp(lp), z[:, 0]) == pytest.approx(1.0, abs=1e-6)
