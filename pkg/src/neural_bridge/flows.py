"""Masked autoregressive flows in plain numpy.

``forward`` is the Gaussianizing direction W (one parallel pass per unit);
``inverse`` is V = W^{-1} (d sequential passes per unit). Training minimises
the negative log-likelihood of the samples under N(0, I) pulled back
through W, with hand-written backpropagation.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import TrainingFault, NumericFault

LOG_SCALE_CLAMP = 7.0
FORMAT_NAME = "neural-bridge-maf"
FORMAT_VERSION = 1
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class MadeUnit:
    """One MADE block: tanh hidden layer, shift and log-scale heads.

    ``rank[i]`` is the position of coordinate i in the autoregressive
    ordering; output i only sees inputs with a smaller rank.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    mask_in: np.ndarray
    mask_out: np.ndarray
    rank: np.ndarray

    @classmethod
    def create(cls, d: int, hidden: int, rank: np.ndarray, rng: np.random.Generator) -> "MadeUnit":
        rank = np.asarray(rank)
        deg_in = rank + 1
        if d > 1:
            deg_h = np.arange(hidden) % (d - 1) + 1
        else:
            deg_h = np.zeros(hidden, dtype=int)
        mask_in = (deg_h[:, None] >= deg_in[None, :]).astype(float)
        mask_out = (deg_in[:, None] > deg_h[None, :]).astype(float)
        w1 = rng.standard_normal((hidden, d)) / np.sqrt(max(d, 1))
        # zero heads: the unit starts as the identity map
        return cls(w1, np.zeros(hidden), np.zeros((d, hidden)), np.zeros(d),
                   np.zeros((d, hidden)), np.zeros(d), mask_in, mask_out, rank)

    def masked(self):
        return self.w1 * self.mask_in, self.w2 * self.mask_out, self.w3 * self.mask_out

    def heads(self, u):
        w1, w2, w3 = self.masked()
        h = np.tanh(u @ w1.T + self.b1)
        m = h @ w2.T + self.b2
        a_raw = h @ w3.T + self.b3
        return h, m, a_raw

    def forward(self, u):
        h, m, a_raw = self.heads(u)
        a = np.clip(a_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        y = (u - m) * np.exp(-a)
        return y, -a.sum(axis=1), (u, h, m, a_raw, a, y)

    def inverse(self, y):
        u = np.zeros_like(y)
        a = np.zeros_like(y)
        for i in np.argsort(self.rank):
            _, m, a_raw = self.heads(u)
            a_i = np.clip(a_raw[:, i], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
            u[:, i] = y[:, i] * np.exp(a_i) + m[:, i]
            a[:, i] = a_i
        return u, a.sum(axis=1)

    def jacobian(self, u):
        """Per-row dy/du, shape (n, d, d)."""
        w1, w2, w3 = self.masked()
        h, m, a_raw = self.heads(u)
        a = np.clip(a_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        y = (u - m) * np.exp(-a)
        dh = 1.0 - h * h
        dm = np.einsum("ih,nh,hj->nij", w2, dh, w1)
        inside = (np.abs(a_raw) < LOG_SCALE_CLAMP).astype(float)
        da = np.einsum("ih,nh,hj->nij", w3, dh, w1) * inside[:, :, None]
        eye = np.eye(u.shape[1])
        return np.exp(-a)[:, :, None] * (eye - dm) - y[:, :, None] * da

    def backward(self, cache, g_y, g_logdet):
        """Backprop through one unit.

        ``g_y`` is dL/dy, ``g_logdet`` the scalar weight of this unit's
        log-determinant in L. Returns (dL/du, parameter gradients).
        """
        u, h, m, a_raw, a, y = cache
        w1, w2, w3 = self.masked()
        e = np.exp(-a)
        g_m = -g_y * e
        g_a = (-g_y * y - g_logdet) * (np.abs(a_raw) < LOG_SCALE_CLAMP)
        g_h = g_m @ w2 + g_a @ w3
        g_pre = g_h * (1.0 - h * h)
        grads = {
            "w1": (g_pre.T @ u) * self.mask_in,
            "b1": g_pre.sum(axis=0),
            "w2": (g_m.T @ h) * self.mask_out,
            "b2": g_m.sum(axis=0),
            "w3": (g_a.T @ h) * self.mask_out,
            "b3": g_a.sum(axis=0),
        }
        g_u = g_y * e + g_pre @ w1
        return g_u, grads

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "MadeUnit":
        return cls(**{k: np.asarray(d[k], dtype=float if k != "rank" else int)
                      for k in cls.__dataclass_fields__})


@dataclass
class FlowParams:
    """Whitening layer followed by a stack of MADE units (W direction)."""

    shift: np.ndarray
    scale: np.ndarray
    units: list[MadeUnit] = field(default_factory=list)

    @property
    def dimension(self) -> int:
        return len(self.shift)

    def copy(self) -> "FlowParams":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "units": [u.to_dict() for u in self.units],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowParams":
        if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
            raise ValueError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} document")
        return cls(np.asarray(d["shift"], dtype=float), np.asarray(d["scale"], dtype=float),
                   [MadeUnit.from_dict(u) for u in d["units"]])


def save(params: FlowParams, path) -> None:
    Path(path).write_text(json.dumps(params.to_dict()))


def load(path) -> FlowParams:
    return FlowParams.from_dict(json.loads(Path(path).read_text()))


def identity_flow(d: int, n_units: int = 5, hidden: int = 100, seed: int = 0) -> FlowParams:
    """Flow that is exactly the identity map; orderings alternate between units."""
    rng = np.random.default_rng(seed)
    units = []
    for k in range(n_units):
        rank = np.arange(d) if k % 2 == 0 else np.arange(d)[::-1]
        units.append(MadeUnit.create(d, hidden, rank, rng))
    return FlowParams(np.zeros(d), np.ones(d), units)


def whitening_flow(samples: np.ndarray) -> FlowParams:
    """Per-coordinate standardisation fitted to sample moments."""
    samples = np.atleast_2d(samples)
    std = samples.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return FlowParams(samples.mean(axis=0), std, [])


def _check(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values in flow {where}")


def forward(params: FlowParams | None, x: np.ndarray):
    """y = W(x) and log|det dW/dx| per row."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if params is None:
        return x.copy(), np.zeros(len(x))
    y = (x - params.shift) / params.scale
    logdet = np.full(len(x), -np.log(params.scale).sum())
    for i, unit in enumerate(params.units):
        y, ld, _ = unit.forward(y)
        logdet = logdet + ld
        _check(y, f"unit {i} (forward)")
    return y, logdet


def inverse(params: FlowParams | None, y: np.ndarray):
    """x = V(y) and log|det dV/dy| per row."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if params is None:
        return y.copy(), np.zeros(len(y))
    x = y
    logdet = np.zeros(len(y))
    for i in reversed(range(len(params.units))):
        x, ld = params.units[i].inverse(x)
        logdet = logdet + ld
        _check(x, f"unit {i} (inverse)")
    x = x * params.scale + params.shift
    return x, logdet + np.log(params.scale).sum()


def jacobian_forward(params: FlowParams, x: np.ndarray) -> np.ndarray:
    """Full dW/dx per row, shape (n, d, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    jac = np.broadcast_to(np.diag(1.0 / params.scale), (len(x),) + (params.dimension,) * 2).copy()
    u = (x - params.shift) / params.scale
    for unit in params.units:
        jac = unit.jacobian(u) @ jac
        u, _, _ = unit.forward(u)
    return jac


def vjp_inverse(params: FlowParams | None, y: np.ndarray, v: np.ndarray, x: np.ndarray | None = None):
    """J_V(y)^T v: gradient with respect to y of v . V(y).

    Uses J_V = (J_W at x = V(y))^{-1}; each unit's Jacobian is triangular
    in its ordering, so the solves are cheap. Pass ``x`` if V(y) is known.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if params is None:
        return v.copy()
    if x is None:
        x, _ = inverse(params, y)
    w = v * params.scale
    u = (np.atleast_2d(x) - params.shift) / params.scale
    for unit in params.units:
        jac = unit.jacobian(u)
        w = np.linalg.solve(np.transpose(jac, (0, 2, 1)), w[:, :, None])[:, :, 0]
        u, _, _ = unit.forward(u)
    return w


def log_prob(params: FlowParams | None, x: np.ndarray) -> np.ndarray:
    """Density of V(Z), Z ~ N(0, I), at x (the flow as an importance sampler)."""
    y, ld = forward(params, x)
    return -0.5 * (y * y).sum(axis=1) - y.shape[1] * _HALF_LOG_2PI + ld


def sample(params: FlowParams | None, n: int, rng: np.random.Generator):
    d = params.dimension if params is not None else 1
    z = rng.standard_normal((n, d))
    x, _ = inverse(params, z)
    return x


def loss(params: FlowParams | None, x: np.ndarray) -> float:
    """Mean negative log-likelihood of ``x`` under the flow."""
    return float(-np.mean(log_prob(params, x)))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 0.01
    lr_decay: float = 0.95
    refit_whitening: bool = True
    # global gradient-norm cap; None gives unclipped SGD
    clip_norm: float | None = 5.0


def _sgd_step(params: FlowParams, xb: np.ndarray, lr: float, clip_norm: float | None = None) -> float:
    n = len(xb)
    u = (xb - params.shift) / params.scale
    caches = []
    logdet = np.full(n, -np.log(params.scale).sum())
    for unit in params.units:
        u, ld, cache = unit.forward(u)
        caches.append(cache)
        logdet = logdet + ld
    batch_loss = float(np.mean(0.5 * (u * u).sum(axis=1) - logdet)) + u.shape[1] * _HALF_LOG_2PI
    g = u / n
    all_grads = []
    for unit, cache in zip(reversed(params.units), reversed(caches)):
        g, grads = unit.backward(cache, g, -1.0 / n)
        all_grads.append((unit, grads))
    if clip_norm is not None:
        norm = math.sqrt(sum(float((v * v).sum()) for _, grads in all_grads for v in grads.values()))
        if norm > clip_norm:
            lr = lr * clip_norm / norm
    for unit, grads in all_grads:
        for name, val in grads.items():
            setattr(unit, name, getattr(unit, name) - lr * val)
    return batch_loss


def train(params_init: FlowParams, samples: np.ndarray, config: TrainConfig = TrainConfig(),
          rng: np.random.Generator | None = None) -> FlowParams:
    """Fit the flow to ``samples`` by minibatch SGD, warm-started from ``params_init``.

    The whitening layer is refitted to the sample moments first. The
    returned parameters are the best seen on the full sample (the initial
    ones included), so the loss never increases. Raises TrainingFault if
    SGD diverges.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if config.epochs <= 0:
        return params_init
    rng = rng if rng is not None else np.random.default_rng()
    best = params_init
    best_loss = loss(params_init, samples)
    params = params_init.copy()
    if config.refit_whitening:
        white = whitening_flow(samples)
        params.shift, params.scale = white.shift, white.scale
        cur = loss(params, samples)
        if cur < best_loss:
            best, best_loss = params.copy(), cur
    n = len(samples)
    lr = config.learning_rate
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            bl = _sgd_step(params, samples[order[start:start + config.batch_size]], lr, config.clip_norm)
            if not np.isfinite(bl):
                raise TrainingFault("flow training diverged (non-finite loss)")
        lr *= config.lr_decay
        try:
            cur = loss(params, samples)
        except NumericFault as exc:
            raise TrainingFault(str(exc)) from exc
        if not np.isfinite(cur):
            raise TrainingFault("flow training diverged (non-finite loss)")
        if cur < best_loss:
            best, best_loss = params.copy(), cur
    return best


def entropy_bound(d: int) -> float:
    """Minimal achievable mean NLL for standard-Gaussian data: d/2 (1 + log 2 pi)."""
    return 0.5 * d * (1.0 + np.log(2.0 * np.pi))
