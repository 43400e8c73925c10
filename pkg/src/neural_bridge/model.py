"""Shared data model: problems, particles, run configuration and reports.

Every simulator evaluation goes through :func:`query`, which is the only
place the query counter moves.
"""

from __future__ import annotations

import math
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .densities import BaseDensity


class NeuralBridgeError(Exception):
    exit_code = 3


class ConfigError(NeuralBridgeError):
    exit_code = 2


class SimulatorFault(NeuralBridgeError):
    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class NumericFault(NeuralBridgeError):
    pass


class TrainingFault(NumericFault):
    pass


class InvariantError(NeuralBridgeError):
    pass


class InsufficientData(NeuralBridgeError):
    exit_code = 4


class QueryCounter:
    """Monotone, thread-safe simulator call counter."""

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0
        self.grad_calls = 0

    def add(self, n: int, with_grad: bool = True) -> None:
        with self._lock:
            self.calls += n
            if with_grad:
                self.grad_calls += n

    def reset(self) -> None:
        with self._lock:
            self.calls = 0
            self.grad_calls = 0


GRADIENT_MODES = ("exact", "surrogate", "finite-difference")


@dataclass
class ProblemSpec:
    """Target system: base density, simulator and threshold.

    ``simulator(x, need_grad)`` takes constrained inputs of shape (n, d)
    and returns ``(f, grad)``; the problem itself works in the base
    density's unconstrained coordinates.
    """

    dimension: int
    base: BaseDensity
    simulator: Callable
    gamma: float
    gradient_mode: str = "exact"
    name: str = "custom"
    counter: QueryCounter = field(default_factory=QueryCounter)
    fd_step: float = 1e-6
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dimension < 1:
            raise ConfigError("dimension must be >= 1")
        if self.base.dimension != self.dimension:
            raise ConfigError(
                f"base density has dimension {self.base.dimension}, problem expects {self.dimension}"
            )
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(f"unknown gradient mode {self.gradient_mode!r}")

    @property
    def query_count(self) -> int:
        return self.counter.calls

    def fresh(self) -> "ProblemSpec":
        """Same problem with its own zeroed counter."""
        return ProblemSpec(self.dimension, self.base, self.simulator, self.gamma,
                           self.gradient_mode, self.name, QueryCounter(), self.fd_step, dict(self.info))


def query(problem: ProblemSpec, z: np.ndarray, need_grad: bool = True, charge_grad: bool = True):
    """Evaluate f and grad f at unconstrained points ``z`` (n, d).

    Each row counts as one simulator call. In finite-difference mode the
    2d extra evaluations per row are counted too. In surrogate mode the
    returned gradient is zero and must come from a surrogate model.
    ``charge_grad=False`` records the call as an f-only query even though
    a jointly priced gradient is returned and cached.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if not np.all(np.isfinite(z)):
        bad = z[~np.all(np.isfinite(z), axis=1)][0]
        raise SimulatorFault(f"non-finite query point {bad}", x=bad)
    x = problem.base.to_constrained(z)
    mode = problem.gradient_mode
    exact = need_grad and mode == "exact"
    f, g = problem.simulator(x, exact)
    f = np.asarray(f, dtype=float)
    problem.counter.add(len(z), with_grad=exact and charge_grad)
    if not np.all(np.isfinite(f)):
        i = int(np.flatnonzero(~np.isfinite(f))[0])
        raise SimulatorFault(f"simulator returned {f[i]} at {x[i]}", x=x[i])
    if not need_grad:
        return f, None
    if mode == "exact":
        g = np.asarray(g, dtype=float)
        if not np.all(np.isfinite(g)):
            i = int(np.flatnonzero(~np.all(np.isfinite(g), axis=1))[0])
            raise SimulatorFault(f"non-finite gradient at {x[i]}", x=x[i])
    elif mode == "finite-difference":
        h = problem.fd_step
        g = np.empty_like(x)
        for j in range(problem.dimension):
            e = np.zeros(problem.dimension)
            e[j] = h
            fp, _ = problem.simulator(x + e, False)
            fm, _ = problem.simulator(x - e, False)
            g[:, j] = (np.asarray(fp) - np.asarray(fm)) / (2 * h)
        problem.counter.add(2 * problem.dimension * len(z), with_grad=False)
    else:
        g = np.zeros_like(x)
    return f, g * problem.base.constrained_jacobian(z)


def map_rows(fn, arrays, workers: int = 1):
    """Apply ``fn`` to contiguous row blocks of ``arrays`` and stitch results.

    Blocks are fixed by index, so the output does not depend on the
    worker count as long as ``fn`` is row-wise.
    """
    n = len(arrays[0])
    if workers <= 1 or n < 2:
        return fn(*arrays)
    edges = np.linspace(0, n, min(workers, n) + 1).astype(int)
    chunks = [tuple(a[lo:hi] for a in arrays) for lo, hi in zip(edges[:-1], edges[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: fn(*c), chunks))
    if isinstance(parts[0], tuple):
        return tuple(None if parts[0][i] is None else np.concatenate([p[i] for p in parts])
                     for i in range(len(parts[0])))
    return np.concatenate(parts)


def parallel_query(problem: ProblemSpec, z: np.ndarray, workers: int = 1, need_grad: bool = True):
    return map_rows(lambda zz: query(problem, zz, need_grad), (z,), workers)


def _tag(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    return int(key)


def rng_stream(master_seed: int, *keys) -> np.random.Generator:
    """Counter-based generator keyed by (seed, keys...); independent of call order."""
    seq = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1),
                                 spawn_key=tuple(_tag(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


@dataclass
class Particles:
    """A population of particles; row i is the particle on chain ``chain_id[i]``.

    ``f`` and ``grad`` always describe the current ``x`` (unconstrained
    coordinates). ``y`` optionally holds warped coordinates.
    """

    x: np.ndarray
    f: np.ndarray
    grad: np.ndarray | None
    chain_id: np.ndarray
    y: np.ndarray | None = None

    @classmethod
    def from_query(cls, problem: ProblemSpec, x: np.ndarray, workers: int = 1) -> "Particles":
        f, g = parallel_query(problem, x, workers)
        return cls(np.asarray(x, dtype=float), f, g, np.arange(len(x)))

    def __len__(self) -> int:
        return len(self.x)

    @property
    def dimension(self) -> int:
        return self.x.shape[1]

    def take(self, idx: np.ndarray) -> "Particles":
        """Copies selected rows onto chains 0..len(idx)-1 (resampling)."""
        idx = np.asarray(idx)
        return Particles(self.x[idx].copy(), self.f[idx].copy(),
                         None if self.grad is None else self.grad[idx].copy(),
                         np.arange(len(idx)), None)

    def fraction_below(self, gamma: float) -> float:
        return float(np.mean(self.f <= gamma))


@dataclass
class RunConfig:
    n_particles: int = 1000
    mcmc_steps: int | None = None
    step_fraction: float = 0.3
    stop_fraction: float = 2.0 / 3.0
    master_seed: int = 0
    warping: bool = True
    trials: int = 1
    step_size_init: float | None = None
    acceptance_band: tuple[float, float] = (0.4, 0.8)
    flow_units: int = 5
    flow_hidden: int = 100
    flow_epochs: int = 100
    flow_batch_size: int = 100
    flow_learning_rate: float = 0.01
    flow_lr_decay: float = 0.95
    flow_clip_norm: float | None = 5.0
    max_iterations: int = 200
    workers: int = 1

    def __post_init__(self):
        if self.mcmc_steps is None:
            self.mcmc_steps = 8 if self.warping else 10
        if self.step_size_init is None:
            self.step_size_init = math.pi / self.mcmc_steps
        self.acceptance_band = tuple(self.acceptance_band)
        self.validate()

    def validate(self) -> None:
        if self.n_particles < 2:
            raise ConfigError("n_particles must be >= 2")
        if self.mcmc_steps < 0:
            raise ConfigError("mcmc_steps must be >= 0")
        if not 0 < self.step_fraction < self.stop_fraction < 1:
            raise ConfigError("need 0 < step_fraction < stop_fraction < 1")
        if not 0 < self.step_size_init <= math.pi:
            raise ConfigError("step_size_init must lie in (0, pi]")
        lo, hi = self.acceptance_band
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("acceptance_band must satisfy 0 <= low <= high <= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["acceptance_band"] = list(self.acceptance_band)
        return d


@dataclass
class LadderRung:
    """Summary of one rung; samples are retained as positions plus cached f."""

    index: int
    beta: float
    x: np.ndarray
    f: np.ndarray
    ratio_estimate: float = 1.0
    log_ratio: float = 0.0
    acceptance_rate: float = float("nan")
    mean_step_size: float = float("nan")
    a_k: float = float("nan")
    crude_ratio: float = float("nan")
    binding_constraint: str = ""
    g2: float = float("nan")
    cov_factor: float = float("nan")
    flow_loss: float = float("nan")
    flow_fallback: bool = False

    def to_dict(self, samples: bool = True) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("x", "f")}
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        if samples:
            d["x"] = np.asarray(self.x).tolist()
            d["f"] = np.asarray(self.f).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LadderRung":
        kw = {k: (float("nan") if v is None else v) for k, v in d.items()
              if k in cls.__dataclass_fields__ and k not in ("x", "f")}
        x = np.asarray(d.get("x", []), dtype=float)
        f = np.asarray(d.get("f", []), dtype=float)
        return cls(x=x, f=f, **kw)


@dataclass
class EstimateReport:
    method: str
    log_p_hat: float
    p_hat: float
    rel_mse_estimate: float | None
    query_count: int
    k_iterations: int
    seed: int
    gamma: float
    n_particles: int
    mcmc_steps: int = 0
    warping: bool = False
    stop_fraction: float = float("nan")
    wall_time: float = 0.0
    grad_query_count: int = 0
    expected_query_count: int | None = None
    rel_mse_clamped: bool = False
    rel_mse_undefined: bool = False
    final_fraction: float = float("nan")
    rungs: list[LadderRung] = field(default_factory=list)
    curve: list[dict] = field(default_factory=list)
    problem: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self, samples: bool = True) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if k == "rungs":
                v = [r.to_dict(samples) for r in v]
            elif isinstance(v, float) and not math.isfinite(v):
                v = None
            elif isinstance(v, np.generic):
                v = v.item()
            out[k] = v
        out["schema_version"] = REPORT_SCHEMA_VERSION
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EstimateReport":
        kw = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        kw["rungs"] = [LadderRung.from_dict(r) for r in d.get("rungs", [])]
        for k in ("p_hat", "log_p_hat", "stop_fraction", "final_fraction"):
            if kw.get(k) is None:
                kw[k] = float("nan") if k != "log_p_hat" else float("-inf")
        return cls(**kw)


REPORT_SCHEMA_VERSION = 1


def make_problem(dimension: int, base_density_id: str, simulator_id: str, gamma: float,
                 controller=None, gradient_mode: str = "exact", horizon: int = 999) -> ProblemSpec:
    """Build a registered problem.

    ``controller`` (MountainCar only) is an :class:`~neural_bridge.envs.MlpController`
    or a path to a weight file; without it the first rollout raises ConfigError.
    """
    from . import densities, envs

    bases = {
        "std-gaussian": lambda d: densities.standard_gaussian(d),
        "mountaincar-prior": lambda d: densities.mountaincar_prior(),
    }
    if base_density_id not in bases:
        raise ConfigError(f"unknown base density {base_density_id!r}; known: {sorted(bases)}")
    base = bases[base_density_id](dimension)
    info = {"base": base_density_id, "simulator": simulator_id}
    if simulator_id == "synthetic":
        if dimension != 2:
            raise ConfigError("the synthetic simulator takes 2-D inputs")
        sim = envs.synthetic_eval
    elif simulator_id == "mountaincar":
        if dimension != 2:
            raise ConfigError("MountainCar takes (position, velocity) inputs")
        if controller is not None and not isinstance(controller, envs.MlpController):
            info["controller_path"] = str(controller)
            controller = envs.load_controller(controller)
        if controller is not None:
            info["controller_checksum"] = controller.checksum
            info["controller_activation"] = controller.activation
        sim = envs.MountainCarEnv(controller=controller, horizon=horizon)
    else:
        raise ConfigError(f"unknown simulator {simulator_id!r}; known: ['mountaincar', 'synthetic']")
    return ProblemSpec(dimension, base, sim, float(gamma), gradient_mode,
                       name=simulator_id, info=info)
