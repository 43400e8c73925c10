"""Split HMC in flow-warped coordinates.

One call of :func:`warped_hmc_step` is one step: half kick from the
barrier potential, an exact rotation for the Gaussian part in y-space,
one simulator query at the proposal, a second half kick, momentum flip,
and a Metropolis-Hastings test against the true Hamiltonian.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import flows
from .densities import log_rho
from .model import Particles, ProblemSpec, map_rows, query, rng_stream

log = logging.getLogger(__name__)


@dataclass
class HmcState:
    """Per-chain step sizes and the acceptance window of the last run."""

    epsilon: np.ndarray
    running_acceptance: np.ndarray

    @classmethod
    def init(cls, n: int, epsilon: float) -> "HmcState":
        return cls(np.full(n, float(epsilon)), np.full(n, np.nan))

    def take(self, idx) -> "HmcState":
        return HmcState(self.epsilon[idx].copy(), self.running_acceptance[idx].copy())


def rotate(y, v, eps):
    """Exact flow of H = |y|^2/2 + |v|^2/2 for time ``eps`` (per-row)."""
    c = np.cos(eps)[:, None]
    s = np.sin(eps)[:, None]
    return y * c + v * s, v * c - y * s


def _barrier_grad(beta, gamma, f, grad_y):
    if beta == 0.0:
        return np.zeros_like(grad_y)
    return beta * (f > gamma)[:, None] * grad_y


def proposal_map(y, v, eps, beta, gamma, f0, grad_y0, evaluate):
    """Deterministic kick-rotate-kick-flip map.

    ``evaluate(y_new)`` must return ``(f, grad_y)`` at V(y_new), where
    ``grad_y`` is J_V^T grad f. Returns (y_new, v_new, f_new, grad_y_new, extra)
    with ``extra`` whatever else ``evaluate`` returned.
    """
    half = 0.5 * eps[:, None]
    v_hat = v - half * _barrier_grad(beta, gamma, f0, grad_y0)
    y_new, v_hat = rotate(y, v_hat, eps)
    f1, gy1, *extra = evaluate(y_new)
    v_hat = v_hat - half * _barrier_grad(beta, gamma, f1, gy1)
    return y_new, -v_hat, f1, gy1, extra


def hamiltonian(base, beta, gamma, x, f, logdet_v, v):
    """-log rho_beta(V(y)) - log|det J_V(y)| + |v|^2/2."""
    lp, _ = log_rho(base, beta, gamma, x, f)
    return -lp - logdet_v + 0.5 * (v * v).sum(axis=1)


def warped_hmc_step(particles: Particles, epsilon: np.ndarray, flow, beta: float,
                    problem: ProblemSpec, normal: np.ndarray, uniform: np.ndarray,
                    level: float | None = None, surrogate=None):
    """One warped split-HMC step for every row of ``particles``.

    ``normal`` (n, d) and ``uniform`` (n,) are the momentum and acceptance
    draws. ``level`` adds the hard constraint f < level used by multilevel
    splitting. With ``surrogate`` the kicks use the surrogate's gradient at
    both ends while f still comes from the (single) query.

    Returns (new particles, acceptance probabilities, accepted mask).
    Exactly one simulator query per row.
    """
    gamma = problem.gamma
    x = particles.x
    y, ld_w = flows.forward(flow, x)
    v = normal

    def grad_y_at(yy, xx, g):
        return flows.vjp_inverse(flow, yy, g, x=xx) if flow is not None else g

    if surrogate is not None:
        g0 = surrogate.grad_mean(x)
    else:
        g0 = particles.grad
    needs = particles.f > gamma if beta > 0 else np.zeros(len(x), bool)
    gy0 = np.zeros_like(y)
    if needs.any():
        gy0[needs] = grad_y_at(y[needs], x[needs], g0[needs])

    state = {}

    def evaluate(y_new):
        x_new, ld_v = flows.inverse(flow, y_new)
        f1, g1 = query(problem, x_new, charge_grad=surrogate is None)
        gk = surrogate.grad_mean(x_new) if surrogate is not None else g1
        gy1 = np.zeros_like(y_new)
        act = (f1 > gamma) if beta > 0 else np.zeros(len(f1), bool)
        if act.any():
            gy1[act] = grad_y_at(y_new[act], x_new[act], gk[act])
        state.update(x=x_new, ld_v=ld_v, g=g1)
        return f1, gy1

    y_new, v_new, f1, _, _ = proposal_map(y, v, epsilon, beta, gamma, particles.f, gy0, evaluate)
    h0 = hamiltonian(problem.base, beta, gamma, x, particles.f, -ld_w, v)
    h1 = hamiltonian(problem.base, beta, gamma, state["x"], f1, state["ld_v"], v_new)
    with np.errstate(over="ignore", invalid="ignore"):
        prob = np.minimum(1.0, np.exp(h0 - h1))
    bad = ~np.isfinite(prob)
    if bad.any():
        log.debug("rejecting %d proposals with non-finite Hamiltonian", int(bad.sum()))
        prob[bad] = 0.0
    if level is not None:
        prob[f1 >= level] = 0.0
    accept = uniform < prob
    out_x = np.where(accept[:, None], state["x"], x)
    out_f = np.where(accept, f1, particles.f)
    out_g = np.where(accept[:, None], state["g"], particles.grad)
    return Particles(out_x, out_f, out_g, particles.chain_id), prob, accept


def adapt_step_size(epsilon, acceptance, band=(0.4, 0.8)):
    """Push the step size so the running acceptance re-enters ``band``.

    Outside the band, eps <- asin(min(1, sin(eps) exp((p - C)/2))) with C
    the violated edge. Step sizes are kept in (0, pi/2] by the asin.
    """
    eps = np.asarray(epsilon, dtype=float).copy()
    p = np.asarray(acceptance, dtype=float)
    lo, hi = band
    for edge, sel in ((lo, p < lo), (hi, p > hi)):
        if np.any(sel):
            eps[sel] = np.arcsin(np.minimum(1.0, np.sin(eps[sel]) * np.exp((p[sel] - edge) / 2.0)))
    return eps


def run_chain(particles: Particles, state: HmcState, flow, beta: float, problem: ProblemSpec,
              T: int, seed: int, key: tuple, workers: int = 1, level: float | None = None,
              band=(0.4, 0.8), surrogate_schedule=None):
    """T HMC steps per chain followed by one step-size adaptation.

    Random draws come from a stream keyed by (seed, key, step) and are
    indexed by chain, so results do not depend on ``workers``.
    ``surrogate_schedule(t)`` may return a surrogate for step t.
    Returns (particles, new HmcState, mean acceptance probability).
    """
    n, d = len(particles), particles.dimension
    if T == 0:
        return particles, state, float("nan")
    draws = []
    for t in range(T):
        g = rng_stream(seed, *key, t)
        draws.append((g.standard_normal((n, d)), g.random(n)))
    surrogates = [surrogate_schedule(t) if surrogate_schedule else None for t in range(T)]

    def block(x, f, grad, chain, eps, *noise):
        p = Particles(x, f, grad, chain)
        probs = np.zeros((len(x), T))
        for t in range(T):
            p, probs[:, t], _ = warped_hmc_step(p, eps, flow, beta, problem, noise[2 * t],
                                                noise[2 * t + 1], level=level, surrogate=surrogates[t])
        return p.x, p.f, p.grad, probs

    flat_noise = [a for pair in draws for a in pair]
    x, f, grad, probs = map_rows(block, (particles.x, particles.f, particles.grad,
                                         particles.chain_id, state.epsilon, *flat_noise), workers)
    acc = probs.mean(axis=1)
    new_state = HmcState(adapt_step_size(state.epsilon, acc, band), acc)
    return Particles(x, f, grad, particles.chain_id), new_state, float(acc.mean())


def default_step_size(T: int) -> float:
    return math.pi / T
