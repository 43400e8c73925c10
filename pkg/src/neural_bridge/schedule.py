"""Adaptive inverse-temperature selection and multinomial resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .densities import neg_relu
from .model import InvariantError

MAX_DOUBLINGS = 60
BISECTION_RTOL = 1e-9


@dataclass(frozen=True)
class AnnealDecision:
    beta_next: float
    a_k: float
    b_k_at_beta: float
    binding_constraint: str  # "alpha-bound" or "stop-bound"


def _log_b(barrier: np.ndarray, delta: float) -> float:
    return float(logsumexp(delta * barrier) - np.log(len(barrier)))


def compute_ab(f, gamma: float, beta_k: float, beta: float) -> tuple[float, float]:
    """Fraction below threshold and the importance estimate b_k(beta)."""
    f = np.asarray(f, dtype=float)
    a = float(np.mean(f <= gamma))
    b = float(np.exp(_log_b(neg_relu(gamma - f), beta - beta_k)))
    return a, b


def select_beta(f, gamma: float, beta_k: float, alpha: float, s: float) -> AnnealDecision:
    """Largest beta with b_k(beta) >= alpha and a_k / b_k(beta) <= s.

    Both constraints reduce to b_k(beta) >= max(alpha, a_k / s); b_k is
    decreasing in beta, so bracket by doubling the offset and bisect.
    """
    f = np.asarray(f, dtype=float)
    barrier = neg_relu(gamma - f)
    a = float(np.mean(f <= gamma))
    if not barrier.any():
        raise InvariantError("every sample already satisfies f <= gamma; the ladder should have stopped")
    if a >= s:
        raise InvariantError(f"fraction {a:.4f} >= stop fraction {s}; no further rung needed")
    target = max(alpha, a / s)
    binding = "alpha-bound" if alpha >= a / s else "stop-bound"
    log_target = np.log(target)

    def feasible(delta):
        return _log_b(barrier, delta) >= log_target

    # start the bracket at the scale of the largest barrier so tiny barriers need few doublings
    with np.errstate(divide="ignore", over="ignore"):
        hi = float(1.0 / np.abs(barrier).max())
    if not np.isfinite(hi):
        raise InvariantError("barrier values too small to bracket beta")
    lo = 0.0
    for _ in range(MAX_DOUBLINGS):
        if not feasible(hi):
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise InvariantError("could not bracket beta within 60 doublings")
    while hi - lo > BISECTION_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    beta_next = beta_k + lo
    b = float(np.exp(_log_b(barrier, lo)))
    return AnnealDecision(beta_next, a, b, binding)


def resample_weights(f, gamma: float, beta_k: float, beta_next: float) -> np.ndarray:
    """Normalised weights rho_next / rho_k at cached f."""
    f = np.asarray(f, dtype=float)
    return softmax((beta_next - beta_k) * neg_relu(gamma - f))


def resample(f, gamma: float, beta_k: float, beta_next: float, rng: np.random.Generator) -> np.ndarray:
    """N i.i.d. multinomial draws of particle indices."""
    w = resample_weights(f, gamma, beta_k, beta_next)
    return rng.choice(len(w), size=len(w), replace=True, p=w)
