"""Base distributions and the exponentially tilted ladder densities.

Positions handled by the samplers are always *unconstrained*: uniform
factors are carried through a logistic map so HMC never sees a boundary.
``BaseDensity.to_constrained`` recovers the physical input that the
simulator consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Factor:
    """One independent 1-D factor of a product base density.

    kind is ``"gaussian"`` (params = mean, std) or ``"uniform"``
    (params = lower, upper).
    """

    kind: str
    a: float
    b: float

    def __post_init__(self):
        if self.kind == "gaussian":
            if not self.b > 0:
                raise ValueError(f"gaussian std must be positive, got {self.b}")
        elif self.kind == "uniform":
            if not self.b > self.a:
                raise ValueError(f"uniform needs lower < upper, got ({self.a}, {self.b})")
        else:
            raise ValueError(f"unknown factor kind {self.kind!r}")


def gaussian(mean: float, std: float) -> Factor:
    return Factor("gaussian", float(mean), float(std))


def uniform(lower: float, upper: float) -> Factor:
    return Factor("uniform", float(lower), float(upper))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class BaseDensity:
    """Product density P_0 over unconstrained coordinates.

    Gaussian factors are used as-is. A uniform(a, b) factor is represented
    by z with x = a + (b - a) * sigmoid(z); the logistic Jacobian is folded
    into ``log_prob`` so that z has a smooth density on the real line.
    """

    factors: tuple[Factor, ...]
    name: str = "product"

    @property
    def dimension(self) -> int:
        return len(self.factors)

    def _split(self):
        kinds = np.array([f.kind == "uniform" for f in self.factors])
        a = np.array([f.a for f in self.factors], dtype=float)
        b = np.array([f.b for f in self.factors], dtype=float)
        return kinds, a, b

    def log_prob(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Log-density and gradient at unconstrained points ``z`` (n, d)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        is_unif, a, b = self._split()
        lp = np.empty_like(z)
        grad = np.empty_like(z)
        g = ~is_unif
        if g.any():
            r = (z[:, g] - a[g]) / b[g]
            lp[:, g] = -0.5 * r * r - np.log(b[g]) - 0.5 * LOG_2PI
            grad[:, g] = -r / b[g]
        if is_unif.any():
            zu = z[:, is_unif]
            # log sigmoid(z) + log(1 - sigmoid(z)); constant 1/(b-a) cancels the Jacobian scale
            lp[:, is_unif] = -np.logaddexp(0.0, -zu) - np.logaddexp(0.0, zu)
            grad[:, is_unif] = 1.0 - 2.0 * _sigmoid(zu)
        return lp.sum(axis=1), grad

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact i.i.d. draws in unconstrained coordinates, shape (n, d)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        is_unif, a, b = self._split()
        out = np.empty((n, self.dimension))
        for j, fac in enumerate(self.factors):
            if fac.kind == "gaussian":
                out[:, j] = fac.a + fac.b * rng.standard_normal(n)
            else:
                out[:, j] = rng.logistic(size=n)
        return out

    def to_constrained(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        is_unif, a, b = self._split()
        if not is_unif.any():
            return z.copy()
        x = z.copy()
        x[..., is_unif] = a[is_unif] + (b[is_unif] - a[is_unif]) * _sigmoid(z[..., is_unif])
        return x

    def to_unconstrained(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        is_unif, a, b = self._split()
        z = x.copy()
        if is_unif.any():
            u = (x[..., is_unif] - a[is_unif]) / (b[is_unif] - a[is_unif])
            z[..., is_unif] = np.log(u) - np.log1p(-u)
        return z

    def constrained_jacobian(self, z: np.ndarray) -> np.ndarray:
        """Diagonal of dx/dz, same shape as ``z``."""
        z = np.asarray(z, dtype=float)
        is_unif, a, b = self._split()
        jac = np.ones_like(z)
        if is_unif.any():
            sg = _sigmoid(z[..., is_unif])
            jac[..., is_unif] = (b[is_unif] - a[is_unif]) * sg * (1.0 - sg)
        return jac

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "factors": [{"kind": f.kind, "params": [f.a, f.b]} for f in self.factors],
        }


def standard_gaussian(d: int) -> BaseDensity:
    return BaseDensity(tuple(gaussian(0.0, 1.0) for _ in range(d)), name="std-gaussian")


def product(factors: Sequence[Factor], name: str = "product") -> BaseDensity:
    return BaseDensity(tuple(factors), name=name)


def mountaincar_prior() -> BaseDensity:
    # velocity perturbation has variance 1e-4, i.e. std 1e-2
    return BaseDensity((uniform(-0.59, -0.4), gaussian(0.0, 1e-2)), name="mountaincar-prior")


def sample_base(density: BaseDensity, n: int, rng: np.random.Generator) -> np.ndarray:
    return density.sample(n, rng)


def neg_relu(z):
    """``z * I{z < 0}``; the value and the subgradient at 0 are both 0."""
    z = np.asarray(z, dtype=float)
    return np.minimum(z, 0.0)


@dataclass(frozen=True)
class TiltedDensity:
    """rho_beta(x) = rho_0(x) exp(beta [gamma - f(x)]_-).

    ``beta = inf`` gives the failure-conditioned limit rho_0(x) I{f(x) <= gamma}.
    """

    base: BaseDensity
    beta: float
    gamma: float

    @property
    def is_limit(self) -> bool:
        return bool(np.isinf(self.beta))

    def log_prob(self, z, f, grad_f):
        return log_rho(self.base, self.beta, self.gamma, z, f, grad_f)


def tilt(beta: float, gamma: float, f) -> np.ndarray:
    """Log tilt term ``beta [gamma - f]_-`` (zero wherever f <= gamma)."""
    f = np.asarray(f, dtype=float)
    if np.isinf(beta):
        return np.where(f > gamma, -np.inf, 0.0)
    if beta == 0.0:
        return np.zeros_like(f)
    return beta * neg_relu(gamma - f)


def log_rho(base: BaseDensity, beta: float, gamma: float, z, f, grad_f=None):
    """Log tilted density (and its gradient when ``grad_f`` is given).

    Uses cached simulator outputs only. The barrier gradient is switched
    off at f == gamma (measure-zero boundary).
    """
    lp0, g0 = base.log_prob(z)
    f = np.asarray(f, dtype=float)
    lp = lp0 + tilt(beta, gamma, f)
    if grad_f is None:
        return lp, None
    if beta == 0.0:
        return lp, g0
    active = (f > gamma)[:, None]
    return lp, g0 - beta * active * np.asarray(grad_f, dtype=float)


def log_rho_k(problem, beta: float, particles):
    """Tilted log-density of rung ``beta`` at cached particles, no queries."""
    if particles.f is None or particles.grad is None:
        from .model import InvariantError

        raise InvariantError("particle caches are missing; query before evaluating densities")
    return log_rho(problem.base, beta, problem.gamma, particles.x, particles.f, particles.grad)
