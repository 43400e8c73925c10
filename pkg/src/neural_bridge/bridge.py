"""Geometric bridge sampling for ratios of normalizing constants.

Every estimator keeps its per-sample log integrands so the error
estimate can reuse them without touching the simulator again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import flows
from .densities import log_rho, neg_relu
from .model import NumericFault, ProblemSpec, parallel_query, InvariantError


def _log_mean(a: np.ndarray) -> float:
    return float(logsumexp(a) - np.log(len(a)))


@dataclass
class BridgeEstimate:
    """Ê = mean(exp(log_num)) / mean(exp(log_den)).

    ``log_num[i]`` is log sqrt(rho_k / rho_{k-1}) at the i-th sample of the
    previous rung, ``log_den[i]`` is log sqrt(rho_{k-1} / rho_k) at the
    i-th sample of the next rung (both in warped space when warping).
    """

    log_num: np.ndarray
    log_den: np.ndarray
    queries: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.log_num, self.log_den):
            if np.any(np.isnan(arr)) or np.any(arr == np.inf):
                raise NumericFault("non-finite bridge integrand")

    @property
    def log_num_mean(self) -> float:
        return _log_mean(self.log_num)

    @property
    def log_den_mean(self) -> float:
        return _log_mean(self.log_den)

    @property
    def log_ratio(self) -> float:
        out = self.log_num_mean - self.log_den_mean
        if not np.isfinite(out):
            raise NumericFault(f"bridge log-ratio is {out}")
        return out

    @property
    def ratio(self) -> float:
        return float(np.exp(self.log_ratio))

    @property
    def g2(self) -> float:
        """Estimated squared Bhattacharyya coefficient (Z^B/Z_prev)(Z^B/Z_next)."""
        return float(np.exp(self.log_num_mean + self.log_den_mean))

    @property
    def rel_mse(self) -> float:
        """Asymptotic relative MSE of this single bridge, (1/n1 + 1/n2)(1/G^2 - 1), clamped at 0."""
        n1, n2 = len(self.log_num), len(self.log_den)
        return max(0.0, (1.0 / n1 + 1.0 / n2) * (1.0 / self.g2 - 1.0))

    @property
    def rel_var(self) -> float:
        """Delta-method relative variance from the integrands' sample second moments.

        Same limit as ``rel_mse`` (E[num^2]/E[num]^2 = 1/G^2) but never
        negative and still informative when G is close to 1.
        """
        out = 0.0
        for a in (self.log_num, self.log_den):
            w = np.exp(a - a.max())
            out += float(np.var(w, ddof=1) / (np.mean(w) ** 2 * len(w)))
        return out


def bridge_from_log_ratios(log_r_prev: np.ndarray, log_r_next: np.ndarray) -> BridgeEstimate:
    """Geometric bridge from log(rho_k/rho_{k-1}) at previous-rung samples and
    log(rho_{k-1}/rho_k) at next-rung samples."""
    return BridgeEstimate(0.5 * np.asarray(log_r_prev, float), 0.5 * np.asarray(log_r_next, float))


def bridge_ratio(f_prev, f_next, beta_prev: float, beta_next: float, gamma: float) -> BridgeEstimate:
    """Unwarped estimate of Z_k / Z_{k-1} between two tilted rungs; zero queries.

    The base density cancels, so only the cached f values enter.
    """
    dbeta = beta_next - beta_prev
    lp = dbeta * neg_relu(gamma - np.asarray(f_prev, float))
    ln = -dbeta * neg_relu(gamma - np.asarray(f_next, float))
    return bridge_from_log_ratios(lp, ln)


def warped_bridge_general(x_prev, log_rho_prev_own, x_next, log_rho_next_own,
                          log_rho_prev_fn, log_rho_next_fn, flow_prev, flow_next,
                          workers: int = 1) -> BridgeEstimate:
    """Warped geometric bridge for arbitrary unnormalized densities.

    ``log_rho_*_own`` are the rungs' own log-densities at their own samples;
    ``log_rho_*_fn(x)`` evaluate a rung's log-density at cross points
    (one call per point; this is where simulator queries happen).
    """
    y_prev, ldw_prev = flows.forward(flow_prev, x_prev)
    x_cross_prev, ldv_next_at_prev = flows.inverse(flow_next, y_prev)
    # log phi_k(y) - log phi_{k-1}(y), y = W_{k-1}(x_prev); log|det J_V_{k-1}(y)| = -ldw_prev
    num = (log_rho_next_fn(x_cross_prev) + ldv_next_at_prev) - (np.asarray(log_rho_prev_own) - ldw_prev)

    y_next, ldw_next = flows.forward(flow_next, x_next)
    x_cross_next, ldv_prev_at_next = flows.inverse(flow_prev, y_next)
    den = (log_rho_prev_fn(x_cross_next) + ldv_prev_at_next) - (np.asarray(log_rho_next_own) - ldw_next)
    est = bridge_from_log_ratios(num, den)
    est.queries = len(x_prev) + len(x_next)
    return est


def warped_bridge_ratio(prev, next_, flow_prev, flow_next, beta_prev: float, beta_next: float,
                        problem: ProblemSpec, workers: int = 1) -> BridgeEstimate:
    """Warped bridge between two tilted rungs; exactly len(prev) + len(next) queries.

    ``prev`` and ``next_`` are Particles with cached f.
    """
    base, gamma = problem.base, problem.gamma

    def rho_fn(beta):
        def fn(x):
            f, _ = parallel_query(problem, x, workers, need_grad=False)
            lp, _ = log_rho(base, beta, gamma, x, f)
            return lp
        return fn

    own_prev, _ = log_rho(base, beta_prev, gamma, prev.x, prev.f)
    own_next, _ = log_rho(base, beta_next, gamma, next_.x, next_.f)
    return warped_bridge_general(prev.x, own_prev, next_.x, own_next,
                                 rho_fn(beta_prev), rho_fn(beta_next), flow_prev, flow_next, workers)


def final_fraction(f, gamma: float, s: float | None = None) -> float:
    """Fraction of final-rung samples with f <= gamma."""
    frac = float(np.mean(np.asarray(f) <= gamma))
    if s is not None and frac < s:
        raise InvariantError(f"final fraction {frac:.4f} below stop fraction {s}")
    return frac


@dataclass
class ErrorBreakdown:
    g2: list[float]
    cov_factors: list[float]
    final_fraction: float
    n: int
    bridge_term: float
    cov_term: float
    final_term: float
    total: float
    clamped: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def covariance_factor(left: BridgeEstimate, right: BridgeEstimate) -> float:
    """Z^C_k Z_k / (Z^B_k Z^B_{k+1}) from bridges k (left) and k+1 (right).

    Both integrands live on the same rung-k samples, index-aligned.
    """
    if len(left.log_den) != len(right.log_num):
        raise InvariantError("adjacent bridges must share the middle rung's samples")
    joint = _log_mean(left.log_den + right.log_num)
    return float(np.exp(joint - left.log_den_mean - right.log_num_mean))


def rel_mse_formula(g2, cov_factors, final_fraction: float, n: int, final_term: float | None = None):
    """Asymptotic relative MSE of the product estimator; returns (total, parts, clamped).

    ``final_term`` overrides the binomial term for a weighted final fraction.
    """
    g2 = np.asarray(g2, dtype=float)
    cov = np.asarray(cov_factors, dtype=float)
    bridge_term = 2.0 / n * float(np.sum(1.0 / g2 - 1.0)) if len(g2) else 0.0
    cov_term = -2.0 / n * float(np.sum(cov - 1.0)) if len(cov) else 0.0
    if final_term is not None:
        pass
    elif final_fraction > 0:
        final_term = (1.0 - final_fraction) / (final_fraction * n)
    else:
        final_term = float("inf")
    total = bridge_term + cov_term + final_term
    clamped = total < 0
    return max(total, 0.0), (bridge_term, cov_term, final_term), clamped


def estimate_rel_mse(bridges: list[BridgeEstimate], final_frac: float, n: int) -> ErrorBreakdown:
    g2 = [b.g2 for b in bridges]
    cov = [covariance_factor(bridges[k], bridges[k + 1]) for k in range(len(bridges) - 1)]
    total, (bt, ct, ft), clamped = rel_mse_formula(g2, cov, final_frac, n)
    return ErrorBreakdown(g2, cov, final_frac, n, bt, ct, ft, total, clamped)
