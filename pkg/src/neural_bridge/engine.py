"""Estimators: neural bridge / plain bridge ladders, naive Monte Carlo and
adaptive multilevel splitting, plus per-threshold curve extraction."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import isotonic_regression

from . import bridge, flows, hmc, schedule
from .model import (
    ConfigError,
    EstimateReport,
    InvariantError,
    LadderRung,
    NeuralBridgeError,
    Particles,
    ProblemSpec,
    RunConfig,
    TrainingFault,
    parallel_query,
    rng_stream,
)
from .densities import neg_relu
from .surrogate import GpSurrogate, hybrid_schedule, surrogate_steps

log = logging.getLogger(__name__)

METHODS = ("mc", "ams", "b", "nb")


class EngineAbort(NeuralBridgeError):
    """A run failed part-way; ``report`` holds what was computed so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class AmsConfig:
    n_particles: int = 920
    cull_fraction: float = 0.1
    mcmc_steps: int = 10
    master_seed: int = 0
    step_size_init: float | None = None
    acceptance_band: tuple[float, float] = (0.4, 0.8)
    max_iterations: int = 100_000
    workers: int = 1

    def __post_init__(self):
        if self.step_size_init is None:
            self.step_size_init = math.pi / max(self.mcmc_steps, 1)
        if self.n_particles < 2 or not 0 < self.cull_fraction < 1:
            raise ConfigError("AMS needs n_particles >= 2 and cull_fraction in (0, 1)")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class SurrogateConfig:
    """GP gradients for a fraction of HMC steps (refit on the current
    particles after every block of T steps)."""

    d_fraction: float = 0.0
    hyper_mode: str = "fixed"
    signal_variance: float = 1.0
    length_scale: float = 1.0
    noise_variance: float = 1e-6


def expected_queries(n: int, k: int, T: int, warping: bool) -> int:
    return n * (1 + k * T) + (2 * k * n if warping else 0)


def _emit(progress, **event):
    if progress is not None:
        progress(event)


def _ladder_log_p(rungs: list[LadderRung], k: int, frac: float) -> float:
    total = 0.0
    for r in rungs[1:k + 1]:
        total += r.log_ratio
    return total + (math.log(frac) if frac > 0 else -math.inf)


def _surrogate_schedule(sur_cfg: SurrogateConfig | None, T: int, problem: ProblemSpec):
    if sur_cfg is None:
        return 0
    if problem.gradient_mode == "surrogate":
        return T
    if problem.gradient_mode == "finite-difference" and sur_cfg.d_fraction > 0:
        raise ConfigError("surrogate steps cannot be mixed with finite-difference gradients")
    try:
        return surrogate_steps(sur_cfg.d_fraction, T)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run_neural_bridge(problem: ProblemSpec, config: RunConfig, progress: Callable | None = None,
                      surrogate: SurrogateConfig | None = None) -> EstimateReport:
    """Adaptive ladder of tilted densities with HMC moves and bridge ratios.

    With ``config.warping`` a masked autoregressive flow is trained on every
    rung and used both to precondition HMC and to warp the bridge.
    """
    t0 = time.perf_counter()
    problem.counter.reset()
    N, T, seed = config.n_particles, config.mcmc_steps, config.master_seed
    alpha, s, gamma = config.step_fraction, config.stop_fraction, problem.gamma
    workers = config.workers
    method = "nb" if config.warping else "b"
    n_surrogate = _surrogate_schedule(surrogate, T, problem)
    train_cfg = flows.TrainConfig(config.flow_epochs, config.flow_batch_size,
                                  config.flow_learning_rate, config.flow_lr_decay,
                                  clip_norm=config.flow_clip_norm)

    x0 = problem.base.sample(N, rng_stream(seed, "init"))
    particles = Particles.from_query(problem, x0, workers)
    state = hmc.HmcState.init(N, config.step_size_init)
    # rung-0 flow: standardise the i.i.d. base samples (zero queries); HMC's exact
    # rotation assumes N(0, I) in flow coordinates, which a raw base need not be
    flow = flows.whitening_flow(particles.x) if config.warping else None
    flow_params = flows.identity_flow(problem.dimension, config.flow_units, config.flow_hidden, seed=seed)
    rungs = [LadderRung(0, 0.0, particles.x, particles.f, a_k=particles.fraction_below(gamma))]
    bridges: list[bridge.BridgeEstimate] = []
    beta = 0.0

    def report(partial=False):
        frac = particles.fraction_below(gamma)
        k = len(rungs) - 1
        err = bridge.estimate_rel_mse(bridges, frac, N)
        for i, r in enumerate(rungs):
            r.g2 = err.g2[i - 1] if i >= 1 else float("nan")
            r.cov_factor = err.cov_factors[i - 1] if 1 <= i <= len(err.cov_factors) else float("nan")
        log_p = _ladder_log_p(rungs, k, frac)
        exp_q = expected_queries(N, k, T, config.warping)
        rep = EstimateReport(
            method=method, log_p_hat=log_p, p_hat=math.exp(log_p), rel_mse_estimate=err.total,
            query_count=problem.counter.calls, k_iterations=k, seed=seed, gamma=gamma,
            n_particles=N, mcmc_steps=T, warping=config.warping, stop_fraction=s,
            wall_time=time.perf_counter() - t0, grad_query_count=problem.counter.grad_calls,
            expected_query_count=exp_q if problem.gradient_mode != "finite-difference" else None,
            rel_mse_clamped=err.clamped, final_fraction=frac, rungs=rungs,
            problem=_problem_dict(problem), config=config.to_dict(),
            extra={"error_breakdown": err.to_dict(), "partial": partial,
                   "surrogate": None if surrogate is None else surrogate.__dict__},
        )
        return rep

    try:
        stop_bound_hit = False
        while particles.fraction_below(gamma) < s and not stop_bound_hit:
            k = len(rungs)
            if k > config.max_iterations:
                raise InvariantError(f"no convergence after {config.max_iterations} rungs")
            dec = schedule.select_beta(particles.f, gamma, beta, alpha, s)
            if dec.beta_next < beta:
                raise InvariantError("beta decreased")
            idx = schedule.resample(particles.f, gamma, beta, dec.beta_next, rng_stream(seed, "resample", k))
            prev = particles
            moved = particles.take(idx)

            sched = None
            if n_surrogate:
                gp = GpSurrogate.fit(prev.x, prev.f, surrogate.hyper_mode, surrogate.signal_variance,
                                     surrogate.length_scale, surrogate.noise_variance)
                sched = hybrid_schedule(gp, n_surrogate)
            # without warping, HMC still gets a diagonal mass-matrix style preconditioner
            hmc_flow = flow if config.warping else flows.whitening_flow(prev.x)
            moved, state, acc = hmc.run_chain(moved, state, hmc_flow, dec.beta_next, problem, T, seed,
                                              ("hmc", k), workers, band=config.acceptance_band,
                                              surrogate_schedule=sched)
            rung = LadderRung(k, dec.beta_next, moved.x, moved.f, acceptance_rate=acc,
                              mean_step_size=float(state.epsilon.mean()), a_k=dec.a_k,
                              crude_ratio=dec.b_k_at_beta, binding_constraint=dec.binding_constraint)
            if config.warping:
                try:
                    new_params = flows.train(flow_params, moved.x, train_cfg, rng_stream(seed, "flow", k))
                except (TrainingFault, FloatingPointError) as exc:
                    log.warning("rung %d: flow training failed (%s); using whitening only", k, exc)
                    new_params = flows.whitening_flow(moved.x)
                    rung.flow_fallback = True
                rung.flow_loss = flows.loss(new_params, moved.x)
                est = bridge.warped_bridge_ratio(prev, moved, flow, new_params, beta, dec.beta_next,
                                                 problem, workers)
                flow_params, flow = new_params, new_params
            else:
                est = bridge.bridge_ratio(prev.f, moved.f, beta, dec.beta_next, gamma)
            rung.log_ratio = est.log_ratio
            rung.ratio_estimate = est.ratio
            bridges.append(est)
            rungs.append(rung)
            particles, beta = moved, dec.beta_next
            # A stop-bound rung targets fraction s exactly; at finite N it lands
            # just below s half the time, so it is always the last rung.
            stop_bound_hit = dec.binding_constraint == "stop-bound"
            _emit(progress, event="rung", method=method, k=k, beta=beta, ratio=est.ratio,
                  fraction=particles.fraction_below(gamma), acceptance=acc,
                  queries=problem.counter.calls)
    except NeuralBridgeError as exc:
        raise EngineAbort(str(exc), report(partial=True)) from exc

    rep = report()
    _emit(progress, event="done", method=method, log_p_hat=rep.log_p_hat, k=rep.k_iterations,
          queries=rep.query_count)
    return rep


def _problem_dict(problem: ProblemSpec) -> dict:
    return {"name": problem.name, "dimension": problem.dimension, "gamma": problem.gamma,
            "gradient_mode": problem.gradient_mode, "base_density": problem.base.to_dict(),
            **problem.info}


def run_mc(problem: ProblemSpec, n: int, seed: int = 0, keep_values: bool = False,
           chunk: int = 1_000_000, workers: int = 1) -> EstimateReport:
    """Naive Monte Carlo with n simulator calls (f only)."""
    t0 = time.perf_counter()
    problem.counter.reset()
    if n < 1:
        raise ConfigError("MC needs at least one sample")
    hits = 0
    kept = []
    for i, start in enumerate(range(0, n, chunk)):
        m = min(chunk, n - start)
        x = problem.base.sample(m, rng_stream(seed, "mc", i))
        f, _ = parallel_query(problem, x, workers, need_grad=False)
        hits += int(np.sum(f <= problem.gamma))
        if keep_values:
            kept.append(f)
    p = hits / n
    undefined = hits == 0
    rel = None if undefined else (1.0 - p) / (p * n)
    rep = EstimateReport(
        method="mc", log_p_hat=math.log(p) if p > 0 else -math.inf, p_hat=p, rel_mse_estimate=rel,
        query_count=problem.counter.calls, k_iterations=0, seed=seed, gamma=problem.gamma,
        n_particles=n, wall_time=time.perf_counter() - t0, expected_query_count=n,
        rel_mse_undefined=undefined, final_fraction=p, problem=_problem_dict(problem),
        config={"n": n}, extra={"hits": hits},
    )
    if keep_values:
        rep.extra["f_values"] = np.concatenate(kept).tolist()
    return rep


def ams_rel_mse(kills, n: int, final_frac: float) -> float:
    """Independent-stage approximation: sum of binomial relative variances."""
    q = 1.0 - np.asarray(kills, dtype=float) / n
    stages = float(np.sum((1.0 - q) / (q * n))) if len(q) else 0.0
    if final_frac <= 0:
        return float("inf")
    return stages + (1.0 - final_frac) / (final_frac * n)


def run_ams(problem: ProblemSpec, config: AmsConfig, progress: Callable | None = None) -> EstimateReport:
    """Adaptive multilevel splitting with HMC rejuvenation under the level constraint.

    Each iteration kills every particle with f >= L, where L is the f-value
    of the ceil(cull_fraction * N)-th worst particle, and replaces it by a
    clone of a uniformly chosen survivor moved by T constrained HMC steps.
    """
    t0 = time.perf_counter()
    problem.counter.reset()
    N, T, seed, gamma = config.n_particles, config.mcmc_steps, config.master_seed, problem.gamma
    n_cut = math.ceil(config.cull_fraction * N)
    x0 = problem.base.sample(N, rng_stream(seed, "ams-init"))
    particles = Particles.from_query(problem, x0, config.workers)
    state = hmc.HmcState.init(N, config.step_size_init)
    levels, kills, stage_f = [], [], []
    log_p = 0.0
    extinct = False
    for j in range(config.max_iterations):
        stage_f.append(particles.f.copy())
        level = float(np.sort(particles.f)[::-1][n_cut - 1])
        levels.append(level)
        if level <= gamma:
            break
        killed = np.flatnonzero(particles.f >= level)
        survivors = np.flatnonzero(particles.f < level)
        if len(survivors) == 0:
            extinct = True
            log.warning("AMS extinction at iteration %d (level %g)", j, level)
            break
        kills.append(len(killed))
        log_p += math.log1p(-len(killed) / N)
        rng = rng_stream(seed, "ams-clone", j)
        parents = rng.choice(survivors, size=len(killed), replace=True)
        clones = particles.take(parents)
        cstate = state.take(parents)
        clones, cstate, acc = hmc.run_chain(clones, cstate, None, 0.0, problem, T, seed, ("ams-hmc", j),
                                            config.workers, level=level, band=config.acceptance_band)
        particles.x[killed] = clones.x
        particles.f[killed] = clones.f
        particles.grad[killed] = clones.grad
        state.epsilon[killed] = cstate.epsilon
        _emit(progress, event="ams-iteration", j=j, level=level, killed=len(killed), acceptance=acc,
              queries=problem.counter.calls)
    else:
        raise EngineAbort("AMS did not reach the threshold within max_iterations")
    frac = particles.fraction_below(gamma)
    if extinct:
        log_p, frac = -math.inf, 0.0
    else:
        log_p += math.log(frac) if frac > 0 else -math.inf
    rel = ams_rel_mse(kills, N, frac) if not extinct else None
    return EstimateReport(
        method="ams", log_p_hat=log_p, p_hat=math.exp(log_p), rel_mse_estimate=rel,
        query_count=problem.counter.calls, k_iterations=len(kills), seed=seed, gamma=gamma,
        n_particles=N, mcmc_steps=T, wall_time=time.perf_counter() - t0,
        grad_query_count=problem.counter.grad_calls,
        expected_query_count=N + T * int(np.sum(kills)), rel_mse_undefined=extinct,
        final_fraction=frac, problem=_problem_dict(problem), config=config.to_dict(),
        extra={"extinct": extinct, "levels": levels, "kills": kills,
               "stage_f": [f.tolist() for f in stage_f]},
    )


def ams_particles_for_budget(budget: int, p_ref: float, cull_fraction: float = 0.1, T: int = 10) -> int:
    """N_AMS with N (1 + cull_fraction T K_AMS) = budget, K_AMS = log p / log(1 - cull_fraction)."""
    k_ams = math.log(p_ref) / math.log1p(-cull_fraction)
    return int(round(budget / (1.0 + cull_fraction * T * k_ams)))


def extract_curve(report: EstimateReport, gamma_test_grid, budgets=None) -> list[dict]:
    """Estimates of P(f <= gamma_test) for every gamma_test >= gamma from one run.

    Ladder runs stop the ladder at the first rung whose fraction below
    gamma_test reaches the stop fraction; AMS stops at the first level at or
    below gamma_test. MC uses the first ``budgets[i]`` kept samples when
    budgets are given.
    """
    out = []
    grid = [float(g) for g in gamma_test_grid]
    for i, gt in enumerate(grid):
        if gt < report.gamma - 1e-12:
            raise ConfigError(f"gamma_test {gt} is below the run's gamma {report.gamma}")
        if report.method in ("nb", "b"):
            out.append(_ladder_point(report, gt))
        elif report.method == "ams":
            out.append(_ams_point(report, gt))
        elif report.method == "mc":
            budget = None if budgets is None else budgets[i]
            out.append(_mc_point(report, gt, budget))
        else:
            raise ConfigError(f"unknown method {report.method!r}")
    _add_monotone(out)
    return out


def _add_monotone(points: list[dict]) -> None:
    """Attach ``log_p_hat_monotone``: an inverse-variance weighted isotonic fit across the grid.

    Different gamma_test values may end at different rungs, so the raw
    curve can dip where the chosen rung changes. The true curve is
    nondecreasing, and projecting onto nondecreasing curves never moves
    the estimate further from it in the weighted least-squares sense.
    """
    finite = [i for i, pt in enumerate(points) if np.isfinite(pt["log_p_hat"])]
    for pt in points:
        pt["log_p_hat_monotone"] = pt["log_p_hat"]
    if len(finite) < 2:
        return
    order = sorted(finite, key=lambda i: points[i]["gamma_test"])
    y = np.array([points[i]["log_p_hat"] for i in order])
    rel = [points[i]["rel_mse_estimate"] for i in order]
    w = np.array([1.0 / max(r, 1e-12) if r is not None and np.isfinite(r) else 1.0 for r in rel])
    fit = isotonic_regression(y, weights=w).x
    for i, v in zip(order, fit):
        points[i]["log_p_hat_monotone"] = float(v)


def _ladder_point(report: EstimateReport, gt: float) -> dict:
    N, T, s = report.n_particles, report.mcmc_steps, report.stop_fraction
    rungs = report.rungs
    if not rungs:
        raise InvariantError("report has no retained rungs")
    for k, r in enumerate(rungs):
        if np.mean(np.asarray(r.f) <= gt) >= s:
            break
    else:
        # only legal when gt == gamma and the last rung ended on the stop bound
        if gt > report.gamma + 1e-12 and np.mean(np.asarray(rungs[-1].f) <= gt) < report.final_fraction:
            raise InvariantError(f"no rung reaches the stop fraction at gamma_test={gt}")
    w = threshold_weights(rungs[k].f, rungs[k].beta, report.gamma, gt)
    frac = float(np.mean(w))
    log_p = _ladder_log_p(rungs, k, frac)
    g2 = [r.g2 for r in rungs[1:k + 1]]
    cov = [r.cov_factor for r in rungs[1:k]]
    rel, _, _ = bridge.rel_mse_formula(g2, cov, frac, N, final_term=_weighted_final_term(w))
    return {"gamma_test": gt, "log_p_hat": log_p, "p_hat": math.exp(log_p), "rel_mse_estimate": rel,
            "k": k, "queries": expected_queries(N, k, T, report.warping)}


def threshold_weights(f, beta: float, gamma: float, gamma_test: float) -> np.ndarray:
    """I{f <= gamma_test} rho_0 / rho_beta at rung samples.

    Samples with gamma < f <= gamma_test were down-weighted by the tilt, so
    they count exp(beta (f - gamma)) toward P_0(f <= gamma_test). At
    gamma_test = gamma this is the plain indicator.
    """
    f = np.asarray(f, dtype=float)
    hit = f <= gamma_test
    w = np.zeros(len(f))
    if beta == 0.0:
        w[hit] = 1.0
    else:
        w[hit] = np.exp(-beta * neg_relu(gamma - f[hit]))
    return w


def _weighted_final_term(w: np.ndarray) -> float:
    m = float(np.mean(w))
    if m <= 0:
        return float("inf")
    return float(np.var(w)) / (m * m * len(w))


def _ams_point(report: EstimateReport, gt: float) -> dict:
    N, T = report.n_particles, report.mcmc_steps
    levels, kills = report.extra["levels"], report.extra["kills"]
    stage_f = report.extra["stage_f"]
    for j, level in enumerate(levels):
        if level <= gt or j >= len(kills):
            break
    frac = float(np.mean(np.asarray(stage_f[j]) <= gt))
    log_p = float(np.sum(np.log1p(-np.asarray(kills[:j], dtype=float) / N))) if j else 0.0
    log_p += math.log(frac) if frac > 0 else -math.inf
    return {"gamma_test": gt, "log_p_hat": log_p, "p_hat": math.exp(log_p),
            "rel_mse_estimate": ams_rel_mse(kills[:j], N, frac), "k": j,
            "queries": N + T * int(np.sum(kills[:j]))}


def _mc_point(report: EstimateReport, gt: float, budget: int | None) -> dict:
    values = report.extra.get("f_values")
    if values is None:
        if abs(gt - report.gamma) > 1e-12:
            raise InvariantError("MC report kept no samples; rerun with keep_values=True")
        p, n = report.p_hat, report.n_particles
    else:
        vals = np.asarray(values)
        n = len(vals) if budget is None else min(int(budget), len(vals))
        p = float(np.mean(vals[:n] <= gt))
    return {"gamma_test": gt, "log_p_hat": math.log(p) if p > 0 else -math.inf, "p_hat": p,
            "rel_mse_estimate": (1 - p) / (p * n) if p > 0 else None, "k": 0, "queries": n}


def estimate(method: str, problem: ProblemSpec, config, progress: Callable | None = None,
             surrogate: SurrogateConfig | None = None, keep_values: bool = False) -> EstimateReport:
    """Single entry point used by the CLI.

    ``config`` is a RunConfig for "b"/"nb", an AmsConfig for "ams" and a
    RunConfig whose ``n_particles`` is the sample count for "mc".
    """
    method = method.lower()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if method in ("b", "nb"):
        want = method == "nb"
        if config.warping != want:
            raise ConfigError(f"method {method!r} requires warping={want}")
        return run_neural_bridge(problem, config, progress, surrogate)
    if method == "ams":
        return run_ams(problem, config, progress)
    return run_mc(problem, config.n_particles, config.master_seed, keep_values=keep_values,
                  workers=config.workers)
