"""Acceptance criteria 1-11, one test each, with a PASS/FAIL line per criterion.

The NB ladder runs are shared: seeds 0-9 serve criteria 1, 2 and 9, and
seeds 0-29 serve criterion 5.
"""

import math
import os

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from neural_bridge import bridge, flows, hmc
from neural_bridge.densities import log_rho
from neural_bridge.engine import (AmsConfig, ams_particles_for_budget, expected_queries, extract_curve, run_ams,
                                  run_mc, run_neural_bridge)
from neural_bridge.envs import MlpController, MountainCarEnv, demo_controller, mountaincar_step
from neural_bridge.model import Particles, RunConfig, make_problem, query, rng_stream
from neural_bridge.surrogate import GpSurrogate

from conftest import CRITERIA, P_SYNTH_M2, P_SYNTH_M3
from test_flows import random_flow

BUDGET = 111_000
FIXTURE_ENV = "NEURAL_BRIDGE_CONTROLLER"


def verdict(key, ok, detail):
    CRITERIA[key] = ("PASS" if ok else "FAIL", detail)
    print(f"CRITERION {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def rel_mse(p_hats, truth):
    return float(np.mean((np.asarray(p_hats) / truth - 1.0) ** 2))


def synth(gamma=-3.0):
    return make_problem(2, "std-gaussian", "synthetic", gamma)


_NB_RUNS = {}


def nb_runs(n):
    for seed in range(n):
        if seed not in _NB_RUNS:
            _NB_RUNS[seed] = run_neural_bridge(synth(), RunConfig(master_seed=seed))
    return [_NB_RUNS[s] for s in range(n)]


def test_criterion_01_synthetic_headline():
    runs = nb_runs(10)
    err = rel_mse([r.p_hat for r in runs], P_SYNTH_M3)
    verdict("1", err <= 0.05, f"NB empirical rel-MSE {err:.4f} over 10 trials (threshold 0.05)")


def test_criterion_02_iteration_law():
    runs = nb_runs(10)
    ks = [r.k_iterations for r in runs]
    law = all(r.query_count == 1000 * (1 + 8 * r.k_iterations) + 2 * 1000 * r.k_iterations for r in runs)
    ok = all(k in (10, 11) for k in ks) and law and expected_queries(1000, 11, 8, True) == BUDGET
    verdict("2", ok, f"K per trial {ks}; queries {sorted({r.query_count for r in runs})}")


def test_criterion_03_method_ordering():
    nb = rel_mse([r.p_hat for r in nb_runs(10)], P_SYNTH_M3)
    b_runs = [run_neural_bridge(synth(), RunConfig(warping=False, master_seed=s)) for s in range(10)]
    n_ams = ams_particles_for_budget(BUDGET, P_SYNTH_M3)
    ams_runs = [run_ams(synth(), AmsConfig(n_particles=n_ams, master_seed=s)) for s in range(10)]
    mc_runs = [run_mc(synth(), BUDGET, seed=s) for s in range(10)]
    b = rel_mse([r.p_hat for r in b_runs], P_SYNTH_M3)
    ams = rel_mse([r.p_hat for r in ams_runs], P_SYNTH_M3)
    mc = rel_mse([r.p_hat for r in mc_runs], P_SYNTH_M3)
    budgets = [BUDGET, np.mean([r.query_count for r in b_runs]), np.mean([r.query_count for r in ams_runs]),
               BUDGET]
    ok = nb < b and nb < ams < mc
    verdict("3", ok, f"rel-MSE NB {nb:.4f} B {b:.4f} AMS {ams:.4f} MC {mc:.4f}; "
                     f"mean queries {[int(q) for q in budgets]}")


def gaussian_pair(d, seed, n=1000):
    """rho_prev = exp(-x^2/2), rho_next = 2 exp(-(x-d)^2/2): true ratio 2."""
    rng = np.random.default_rng(seed)
    xp = rng.standard_normal((n, 1))
    xn = rng.standard_normal((n, 1)) + d
    lp = lambda x: -0.5 * x[:, 0] ** 2
    ln = lambda x: math.log(2.0) - 0.5 * (x[:, 0] - d) ** 2
    return xp, xn, lp, ln


def test_criterion_04_bridge_oracle():
    details, ok = [], True
    for d in (0.5, 1.0, 2.0):
        g2 = math.exp(-d * d / 4)
        closed = 2 / 1000 * (1 / g2 - 1)
        hits_plain = hits_warp = 0
        est_rel = []
        for seed in range(100):
            xp, xn, lp, ln = gaussian_pair(d, seed)
            plain = bridge.bridge_from_log_ratios(ln(xp) - lp(xp), lp(xn) - ln(xn))
            # flows fitted on independent pilot draws from each rung
            pilot = np.random.default_rng(10_000 + seed)
            fp = flows.whitening_flow(pilot.standard_normal((1000, 1)))
            fn = flows.whitening_flow(pilot.standard_normal((1000, 1)) + d)
            warped = bridge.warped_bridge_general(xp, lp(xp), xn, ln(xn), lp, ln, fp, fn)
            hits_plain += abs(plain.log_ratio - math.log(2)) <= 3 * math.sqrt(plain.rel_var)
            hits_warp += abs(warped.log_ratio - math.log(2)) <= 3 * math.sqrt(warped.rel_var)
            est_rel.append(plain.rel_mse)
        ratio = np.mean(est_rel) / closed
        ok &= hits_plain >= 95 and hits_warp >= 95 and abs(ratio - 1) <= 0.2
        details.append(f"d={d}: plain {hits_plain}/100, warped {hits_warp}/100, rel-MSE est/closed {ratio:.3f}")
    verdict("4", ok, "; ".join(details))


def test_criterion_05_error_estimator_consistency():
    runs = nb_runs(30)
    logs = np.array([r.log_p_hat for r in runs])
    emp = float(np.var(logs, ddof=1))
    est = float(np.mean([r.rel_mse_estimate for r in runs]))
    ratio = emp / est
    verdict("5", 1 / 3 <= ratio <= 3, f"var(log p) {emp:.5f} vs mean estimate {est:.5f} (ratio {ratio:.2f})")


def test_criterion_06_hmc_correctness():
    p = synth(10.0)  # beta = 0 throughout: target N(0, I)
    parts = Particles.from_query(p, p.base.sample(1000, rng_stream(6, "init")))
    state = hmc.HmcState.init(1000, math.pi / 8)
    all_one = True
    rng = np.random.default_rng(6)
    for block in range(8):
        _, prob, acc = hmc.warped_hmc_step(parts, state.epsilon, None, 0.0, p, rng.standard_normal((1000, 2)),
                                           rng.random(1000))
        all_one &= bool(np.all(acc) and np.all(prob >= 1 - 1e-12))
        parts, state, _ = hmc.run_chain(parts, state, None, 0.0, p, 8, 6, ("acc", block))
    x = parts.x
    from scipy import stats
    z = stats.norm.ppf(0.995)
    mean_ok = np.all(np.abs(x.mean(axis=0)) < z / math.sqrt(1000))
    lo, hi = stats.chi2.ppf([0.005, 0.995], 999) / 999
    var = x.var(axis=0, ddof=1)
    var_ok = np.all((var > lo) & (var < hi))

    flow = random_flow(2, seed=4)
    q = synth(-1.0)
    xs = np.random.default_rng(1).standard_normal((200, 2)) * 2
    f0, g0 = query(q, xs)
    y, _ = flows.forward(flow, xs)

    def evaluate(yy):
        xx, _ = flows.inverse(flow, yy)
        f, g = query(q, xx)
        return f, flows.vjp_inverse(flow, yy, g, x=xx)

    v = np.random.default_rng(2).standard_normal((200, 2))
    eps = np.full(200, 0.3)
    gy0 = flows.vjp_inverse(flow, y, g0, x=xs)
    y1, v1, f1, gy1, _ = hmc.proposal_map(y, v, eps, 2.5, q.gamma, f0, gy0, evaluate)
    y2, v2, *_ = hmc.proposal_map(y1, v1, eps, 2.5, q.gamma, f1, gy1, evaluate)
    rev = max(np.abs(y2 - y).max(), np.abs(v2 - v).max())
    ok = all_one and mean_ok and var_ok and rev < 1e-9
    verdict("6", ok, f"acceptance exactly 1: {all_one}; 64-step mean/var tests: {bool(mean_ok)}/{bool(var_ok)}; "
                     f"reversibility error {rev:.1e}")


def _fd(fn, x, h):
    out = np.zeros_like(x)
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h[j] if np.ndim(h) else h
        out[:, j] = (fn(x + e) - fn(x - e)) / (2 * e[j])
    return out


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def test_criterion_07_gradient_suites():
    rng = np.random.default_rng(7)
    p = synth(-1.0)
    # tilted density at points away from the ridges of f
    z = rng.uniform(-3, 3, (400, 2))
    z = z[(np.abs(np.abs(z[:, 0]) - z[:, 1]) > 0.05) & (np.abs(z[:, 0]) > 0.05)][:50]

    def tilted(zz):
        f, _ = query(p, zz)
        return log_rho(p.base, 1.7, p.gamma, zz, f)[0]

    f, g = query(p, z)
    e_tilt = _rel_err(log_rho(p.base, 1.7, p.gamma, z, f, g)[1], _fd(tilted, z, 1e-6))

    flow = random_flow(2, seed=3)
    y = rng.standard_normal((50, 2))
    v = rng.standard_normal((50, 2))
    vjp = flows.vjp_inverse(flow, y, v)
    e_flow = _rel_err(vjp, _fd(lambda yy: np.sum(flows.inverse(flow, yy)[0] * v, axis=1), y, 1e-6))

    xg = rng.uniform(-2, 2, (40, 2))
    gp = GpSurrogate.fit(xg, np.sin(xg[:, 0]) + xg[:, 1] ** 2, length_scale=0.8)
    pts = rng.uniform(-2, 2, (50, 2))
    e_gp = _rel_err(gp.grad_mean(pts), _fd(lambda xx: gp.predict(xx)[0], pts, 1e-5))

    env = MountainCarEnv(MlpController.from_flat(0.3 * np.random.default_rng(3).standard_normal(337)), horizon=200)
    x0 = np.column_stack([rng.uniform(-0.9, -0.2, 200), rng.uniform(-0.03, 0.03, 200)])
    r, gr = env.rollout(x0)
    fd = _fd(lambda xx: env.rollout(xx, need_grad=False)[0], x0, [1e-5, 1e-6])
    smooth = np.all(np.abs(fd) < 1e4, axis=1)  # drop starts whose perturbations straddle the goal jump
    idx = np.flatnonzero(smooth)[:50]
    e_mc = _rel_err(gr[idx], fd[idx])
    ok = e_tilt < 1e-4 and e_flow < 1e-4 and e_gp < 1e-4 and e_mc < 1e-3 and len(idx) == 50
    verdict("7", ok, f"max rel err: tilted {e_tilt:.1e}, flow VJP {e_flow:.1e}, GP {e_gp:.1e}, "
                     f"rollout {e_mc:.1e} ({len(idx)} starts)")


def test_criterion_08_warping_benefit():
    lp = lambda x: -0.5 * np.sum(x ** 2, axis=1)
    ln = lambda x: -0.5 * np.sum((x - 2.0) ** 2, axis=1)
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        xp = rng.standard_normal((1000, 2))
        xn = rng.standard_normal((1000, 2)) + 2.0
        plain = bridge.bridge_from_log_ratios(ln(xp) - lp(xp), lp(xn) - ln(xn))
        warped = bridge.warped_bridge_general(xp, lp(xp), xn, ln(xn), lp, ln,
                                              flows.whitening_flow(xp), flows.whitening_flow(xn))
        wins += warped.rel_mse <= plain.rel_mse
    verdict("8", wins >= 15, f"warped <= unwarped estimated rel-MSE in {wins}/20 seeds (need 15)")


def test_criterion_09_curve_extraction():
    rep = nb_runs(1)[0]
    pt = extract_curve(rep, [-2.0])[0]
    se = math.sqrt(pt["rel_mse_estimate"]) * pt["p_hat"]
    dev = abs(pt["p_hat"] - P_SYNTH_M2)
    verdict("9", dev <= 3 * se, f"p(-2) = {pt['p_hat']:.4e} vs {P_SYNTH_M2:.4e}, |dev| {dev:.2e} <= 3 SE "
                                f"{3 * se:.2e}; rung k*={pt['k']}, queries {pt['queries']}")


def test_criterion_10_mountaincar_properties():
    s, v = mountaincar_step(np.array([-0.5]), np.array([0.0]), np.array([0.0]))
    _, v1 = mountaincar_step(np.array([-0.5]), np.array([0.0]), np.array([1.0]))
    steps_ok = (abs(v[0] + 1.76843e-4) < 1e-9 and abs(s[0] + 0.50017684) < 1e-8
                and abs(v1[0] - 1.323157e-3) < 1e-9)
    zero = MountainCarEnv(MlpController.zeros())
    r0, _ = zero.rollout(np.array([[-0.5, 0.0], [-0.45, 0.02]]))
    env = MountainCarEnv(demo_controller())
    x0 = np.column_stack([np.linspace(-0.59, -0.4, 50), np.linspace(-0.02, 0.02, 50)])
    ra, _ = env.rollout(x0)
    rb, _ = env.rollout(x0[::-1])
    determ = np.array_equal(ra, rb[::-1]) and np.all(ra <= 100)

    p = make_problem(2, "mountaincar-prior", "mountaincar", 81.0, controller=demo_controller())
    rep = run_neural_bridge(p, RunConfig(master_seed=0, n_particles=300, flow_epochs=20))
    K = rep.k_iterations
    law = rep.query_count == 300 * (1 + 8 * K) + 2 * 300 * K and expected_queries(1000, 10, 8, True) == 101_000
    ok = steps_ok and np.all(r0 == 0) and determ and law
    verdict("10", ok, f"step examples {steps_ok}; zero controller reward {r0.tolist()}; determinism {determ}; "
                      f"NB run K={K} queries {rep.query_count} (law holds: {law}); K=10 budget 101000; "
                      f"p(reward<=81) ~ {rep.p_hat:.2e}")


@pytest.mark.slow
@pytest.mark.fixture
@pytest.mark.skipif(not os.environ.get(FIXTURE_ENV), reason=f"set {FIXTURE_ENV} to the verified controller file")
def test_criterion_10_mountaincar_fixture():
    path = os.environ[FIXTURE_ENV]
    truth = run_mc(make_problem(2, "mountaincar-prior", "mountaincar", 90.0, controller=path), 5_000_000, seed=99)
    reps = [run_neural_bridge(make_problem(2, "mountaincar-prior", "mountaincar", 90.0, controller=path),
                              RunConfig(master_seed=s)) for s in range(10)]
    err = rel_mse([r.p_hat for r in reps], truth.p_hat)
    verdict("10 fixture", err <= 0.3, f"NB rel-MSE {err:.4f} vs MC truth {truth.p_hat:.3e} (threshold 0.3)")


def test_criterion_11_out_of_scope_coverage():
    # Rocket/CarRacing are not reproducible here; the surrogate property suite and PCA examples stand in.
    from neural_bridge.cli import pca_failures

    rng = np.random.default_rng(11)
    xg = rng.uniform(-1, 1, (30, 3))
    gp = GpSurrogate.fit(xg, np.cos(2 * xg).sum(axis=1), length_scale=0.6)
    pts = rng.uniform(-1, 1, (50, 3))
    e_gp = _rel_err(gp.grad_mean(pts), _fd(lambda xx: gp.predict(xx)[0], pts, 1e-5))
    far = np.full((1, 3), 10.0)
    far_ok = cdist(far, gp.x).min() >= 10 * gp.length_scale and (
        np.linalg.norm(gp.grad_mean(far)) < 1e-6 * gp.signal_variance * np.abs(gp.alpha).sum())
    proj = pca_failures([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
    pca_ok = abs(abs(proj.components[0, 0]) - 1) < 1e-12 and abs(proj.explained_variance_ratio[0] - 1) < 1e-12
    ok = e_gp < 1e-4 and far_ok and pca_ok
    verdict("11", ok, f"not reproducible at desk scale; stand-ins: GP gradient rel err {e_gp:.1e}, "
                      f"far-field bound {far_ok}, PCA example {pca_ok}")
