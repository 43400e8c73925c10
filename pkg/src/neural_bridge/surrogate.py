"""Gaussian-process surrogate for simulator gradients.

Only the posterior-mean gradient is used: the HMC kicks on surrogate
steps read it instead of the exact gradient, while f itself is always
simulated so the Metropolis test stays exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.spatial.distance import cdist

from .model import NumericFault

log = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
HYPER_MODES = ("fixed", "marginal-likelihood")
MAX_JITTER = 1e-4


def matern52(r, signal_variance: float = 1.0, length_scale: float = 1.0):
    a = SQRT5 * np.asarray(r, dtype=float) / length_scale
    return signal_variance * (1.0 + a + a * a / 3.0) * np.exp(-a)


def _chol(K: np.ndarray):
    jitter = 0.0
    while True:
        try:
            return cho_factor(K + jitter * np.eye(len(K)), lower=True), jitter
        except LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
            if jitter > MAX_JITTER:
                raise NumericFault("GP kernel matrix not positive definite even with jitter 1e-4")


@dataclass
class GpSurrogate:
    x: np.ndarray
    alpha: np.ndarray
    mean: float
    signal_variance: float
    length_scale: float
    noise_variance: float
    jitter: float = 0.0
    chol: tuple | None = None

    @classmethod
    def fit(cls, x, y, hyper_mode: str = "fixed", signal_variance: float = 1.0,
            length_scale: float = 1.0, noise_variance: float = 1e-6, max_steps: int = 100) -> "GpSurrogate":
        if hyper_mode not in HYPER_MODES:
            raise ValueError(f"hyper_mode must be one of {HYPER_MODES}")
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        mu = float(y.mean())
        r = cdist(x, x)
        s2, ell, nv = signal_variance, length_scale, noise_variance
        if hyper_mode == "marginal-likelihood":
            theta = np.log([s2, ell, max(nv, 1e-12)])
            s2, ell, nv = np.exp(_ascend(r, y - mu, theta, max_steps))
        K = matern52(r, s2, ell) + nv * np.eye(len(x))
        c, jitter = _chol(K)
        alpha = cho_solve(c, y - mu)
        return cls(x, alpha, mu, float(s2), float(ell), float(nv), jitter, c)

    def predict(self, xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ks = matern52(cdist(xs, self.x), self.signal_variance, self.length_scale)
        mean = self.mean + ks @ self.alpha
        v = cho_solve(self.chol, ks.T)
        var = self.signal_variance - np.sum(ks * v.T, axis=1)
        return mean, np.maximum(var, 0.0)

    def grad_mean(self, xs):
        """Gradient of the posterior mean, shape (n, d)."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        diff = xs[:, None, :] - self.x[None, :, :]
        r = np.sqrt(np.sum(diff * diff, axis=2))
        a = SQRT5 * r / self.length_scale
        w = -(5.0 * self.signal_variance / (3.0 * self.length_scale ** 2)) * (1.0 + a) * np.exp(-a)
        return np.einsum("ij,ijk->ik", w * self.alpha[None, :], diff)


def log_marginal_likelihood(r, y, theta):
    """Log evidence and its gradient with respect to log hyperparameters."""
    s2, ell, nv = np.exp(theta)
    a = SQRT5 * r / ell
    ea = np.exp(-a)
    Kf = s2 * (1.0 + a + a * a / 3.0) * ea
    K = Kf + nv * np.eye(len(y))
    c, _ = _chol(K)
    alpha = cho_solve(c, y)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    ll = -0.5 * y @ alpha - 0.5 * logdet - 0.5 * len(y) * math.log(2 * math.pi)
    W = np.outer(alpha, alpha) - cho_solve(c, np.eye(len(y)))
    dks = (Kf, s2 * a * a * (1.0 + a) / 3.0 * ea, nv * np.eye(len(y)))
    grad = np.array([0.5 * np.sum(W * dk) for dk in dks])
    return float(ll), grad


def _ascend(r, y, theta, max_steps):
    """Gradient ascent with backtracking; the evidence never decreases."""
    ll, g = log_marginal_likelihood(r, y, theta)
    step = 0.1
    for _ in range(max_steps):
        gn = np.linalg.norm(g)
        if gn < 1e-6:
            break
        moved = False
        while step > 1e-8:
            cand = theta + step * g / gn
            try:
                ll_c, g_c = log_marginal_likelihood(r, y, cand)
            except NumericFault:
                ll_c = -np.inf
            if ll_c > ll:
                theta, ll, g = cand, ll_c, g_c
                step *= 1.5
                moved = True
                break
            step *= 0.5
        if not moved:
            break
    return theta


def surrogate_steps(d_fraction: float, T: int) -> int:
    """Number of the T steps per block that use surrogate gradients."""
    if not 0.0 <= d_fraction <= 1.0 - 1.0 / T + 1e-12:
        raise ValueError(f"d_fraction must lie in [0, 1 - 1/T]; got {d_fraction}")
    return int(round(d_fraction * T))


def hybrid_schedule(gp: GpSurrogate, n_surrogate: int):
    """Step t uses the surrogate for the first n_surrogate steps, then exact gradients."""
    return lambda t: gp if t < n_surrogate else None
