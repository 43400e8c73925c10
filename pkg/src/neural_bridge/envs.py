"""Benchmark environments: the 2-D synthetic problem and MountainCar.

Both simulators are batched: they take an (n, 2) array of inputs and
return the safety score and its gradient for each row.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def synthetic_eval(x: np.ndarray, need_grad: bool = True):
    """f(x) = -min(|x1|, x2) with its almost-everywhere gradient.

    Ties |x1| == x2 take the x2 branch; sign(0) is 0 so the x1 = 0 ridge
    gets a zero gradient.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.abs(x[:, 0])
    second = x[:, 1] <= a
    f = -np.where(second, x[:, 1], a)
    if not need_grad:
        return f, None
    grad = np.zeros_like(x)
    grad[second, 1] = -1.0
    first = ~second
    grad[first, 0] = -np.sign(x[first, 0])
    return f, grad


def synthetic_probability(gamma: float) -> float:
    """Closed-form P(f(X) <= gamma) for X ~ N(0, I_2).

    For gamma < 0 this is P(|X1| >= -gamma) P(X2 >= -gamma) = 2 Phi(gamma)^2;
    for gamma >= 0 the |X1| condition always holds and it is Phi(gamma).
    """
    from scipy.stats import norm

    if gamma < 0:
        return float(2.0 * norm.cdf(gamma) ** 2)
    return float(norm.cdf(gamma))


# standard continuous MountainCar constants
GOAL_POSITION = 0.45
MIN_POSITION, MAX_POSITION = -1.2, 0.6
MAX_SPEED = 0.07
POWER = 0.0015
GRAVITY = 0.0025
DEFAULT_SHAPE = (2, 16, 16, 1)


def road_height(s):
    return 0.45 * np.sin(3.0 * s) + 0.55


def n_params(shape=DEFAULT_SHAPE) -> int:
    return sum(shape[i] * shape[i + 1] + shape[i + 1] for i in range(len(shape) - 1))


@dataclass
class MlpController:
    """Fully connected tanh network with a tanh-squashed scalar output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    checksum: str = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.extend([w.ravel(), b.ravel()])
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, values, shape=DEFAULT_SHAPE, activation="tanh") -> "MlpController":
        values = np.asarray(values, dtype=float).ravel()
        expected = n_params(shape)
        if values.size != expected:
            raise ControllerFormatError(
                f"controller file has {values.size} values, shape {shape} needs {expected}"
            )
        weights, biases, pos = [], [], 0
        for n_in, n_out in zip(shape[:-1], shape[1:]):
            weights.append(values[pos:pos + n_in * n_out].reshape(n_out, n_in))
            pos += n_in * n_out
            biases.append(values[pos:pos + n_out].copy())
            pos += n_out
        digest = hashlib.sha256(values.astype("<f8").tobytes()).hexdigest()
        return cls(weights, biases, activation=activation, checksum=digest)

    @classmethod
    def zeros(cls, shape=DEFAULT_SHAPE) -> "MlpController":
        return cls.from_flat(np.zeros(n_params(shape)), shape)

    def __call__(self, obs: np.ndarray, d_obs: np.ndarray | None = None):
        """Control for a batch of observations (n, 2).

        With ``d_obs`` of shape (n, 2, m) (sensitivities of the observation
        to m parameters), also returns du of shape (n, m).
        """
        h = obs
        dh = d_obs
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ w.T + b
            if self.activation == "relu" and i < n_layers - 1:
                h = np.maximum(pre, 0.0)
                slope = (pre > 0).astype(float)
            else:
                h = np.tanh(pre)
                slope = 1.0 - h * h
            if dh is not None:
                dh = slope[:, :, None] * np.einsum("oi,nim->nom", w, dh)
        u = h[:, 0]
        return (u, None if dh is None else dh[:, 0, :])


def demo_controller(gain: float = 200.0) -> MlpController:
    """Energy-pumping controller, u ~ tanh(3 tanh(3 tanh(gain v))).

    Not the verified controller of any published run; it reaches the goal
    from most starts, so low rewards (slow climbs) are rare events.
    """
    ctrl = MlpController.zeros()
    ctrl.weights[0][0, 1] = gain
    ctrl.weights[1][0, 0] = 3.0
    ctrl.weights[2][0, 0] = 3.0
    ctrl.checksum = hashlib.sha256(ctrl.flat().astype("<f8").tobytes()).hexdigest()
    return ctrl


class ControllerFormatError(ValueError):
    pass


def load_controller(path, shape=DEFAULT_SHAPE, activation="tanh") -> MlpController:
    """Read a flat controller weight file (JSON list or little-endian float64).

    Layout: for each layer, the row-major (out, in) weight matrix followed
    by the bias vector.
    """
    path = Path(path)
    if not path.exists():
        from .model import ConfigError

        raise ConfigError(f"controller file not found: {path}")
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        data = json.loads(raw)
        if isinstance(data, dict):
            shape = tuple(data.get("shape", shape))
            activation = data.get("activation", activation)
            data = data["params"]
        values = np.asarray(data, dtype=float)
    else:
        if len(raw) % 8:
            raise ControllerFormatError("binary controller file is not a whole number of float64 values")
        values = np.array(struct.unpack(f"<{len(raw) // 8}d", raw))
    return MlpController.from_flat(values, shape=shape, activation=activation)


def save_controller(ctrl: MlpController, path) -> None:
    path = Path(path)
    values = ctrl.flat()
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps({"shape": list(ctrl.shape), "activation": ctrl.activation,
                                    "params": values.tolist()}))
    else:
        path.write_bytes(values.astype("<f8").tobytes())


def mountaincar_step(s, v, u):
    """One step of the closed-form dynamics with clipping; returns (s', v')."""
    u = np.clip(u, -1.0, 1.0)
    v_new = np.clip(v + POWER * u - GRAVITY * np.cos(3.0 * s), -MAX_SPEED, MAX_SPEED)
    s_new = np.clip(s + v_new, MIN_POSITION, MAX_POSITION)
    return s_new, v_new


@dataclass
class MountainCarEnv:
    controller: MlpController | None = None
    horizon: int = 999
    goal: float = GOAL_POSITION
    controller_path: str | None = field(default=None, repr=False)

    def rollout(self, x0: np.ndarray, need_grad: bool = True):
        """Total reward of closed-loop episodes started at rows of ``x0``.

        Gradients are propagated forward through the dynamics and the
        controller; clipped components and the +100 goal bonus carry zero
        sensitivity.
        """
        if self.controller is None:
            from .model import ConfigError

            raise ConfigError("MountainCar needs a controller weight file (controller_path)")
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        n = x0.shape[0]
        s = x0[:, 0].copy()
        v = x0[:, 1].copy()
        # sensitivities d(s, v)/d(s0, v0): rows (ds, dv), cols (s0, v0)
        sens = np.zeros((n, 2, 2))
        sens[:, 0, 0] = 1.0
        sens[:, 1, 1] = 1.0
        reward = np.zeros(n)
        d_reward = np.zeros((n, 2))
        done = np.zeros(n, dtype=bool)
        for _ in range(self.horizon):
            live = ~done
            if not live.any():
                break
            obs = np.stack([s[live], v[live]], axis=1)
            u, du = self.controller(obs, sens[live] if need_grad else None)
            u_raw = u
            u = np.clip(u, -1.0, 1.0)
            reward[live] -= 0.1 * u * u
            sl, vl = s[live], v[live]
            v_pre = vl + POWER * u - GRAVITY * np.cos(3.0 * sl)
            v_new = np.clip(v_pre, -MAX_SPEED, MAX_SPEED)
            s_pre = sl + v_new
            s_new = np.clip(s_pre, MIN_POSITION, MAX_POSITION)
            if need_grad:
                sl_sens = sens[live]
                du = du * (np.abs(u_raw) <= 1.0)[:, None]
                d_reward[live] -= 0.2 * u[:, None] * du
                dv = sl_sens[:, 1, :] + POWER * du + 3.0 * GRAVITY * np.sin(3.0 * sl)[:, None] * sl_sens[:, 0, :]
                dv *= (np.abs(v_pre) < MAX_SPEED)[:, None]
                ds = sl_sens[:, 0, :] + dv
                ds *= ((s_pre > MIN_POSITION) & (s_pre < MAX_POSITION))[:, None]
                sl_sens[:, 0, :] = ds
                sl_sens[:, 1, :] = dv
                sens[live] = sl_sens
            s[live] = s_new
            v[live] = v_new
            reached = s_new >= self.goal
            idx = np.flatnonzero(live)[reached]
            reward[idx] += 100.0
            done[idx] = True
        return reward, (d_reward if need_grad else None)

    def __call__(self, x, need_grad: bool = True):
        return self.rollout(x, need_grad)


def mountaincar_rollout(env: MountainCarEnv, x0):
    return env.rollout(x0)
