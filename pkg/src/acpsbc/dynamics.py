"""Discrete-time robot models and motion-noise sampling.

Two kinematic models ship:

* ``single_integrator``: state ``[x, y]``, control ``[vx, vy]``,
  ``p+ = p + (u + eps) * dt``.
* ``unicycle``: state ``[x, y, theta]``, control ``[v, omega]``, forward Euler
  on ``x' = v cos(theta)``, ``y' = v sin(theta)``, ``theta' = omega`` with the
  noise added to ``(v, omega)`` before integration.

Noise enters at the velocity level, so a zero draw reproduces the nominal step
bit for bit.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError

SINGLE_INTEGRATOR = "single_integrator"
UNICYCLE = "unicycle"
MODEL_KINDS = (SINGLE_INTEGRATOR, UNICYCLE)


def wrap_angle(theta):
    """Map an angle (or array of angles) into (-pi, pi]."""
    return math.pi - np.mod(math.pi - theta, 2.0 * math.pi)


@dataclass(frozen=True)
class DynamicsModel:
    kind: str
    dt: float

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}", field="model")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive", field="dt_s")

    @property
    def state_dim(self) -> int:
        return 2 if self.kind == SINGLE_INTEGRATOR else 3

    @property
    def control_dim(self) -> int:
        return 2


@dataclass(frozen=True)
class RobotState:
    position: np.ndarray
    heading: Optional[float] = None
    radius: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(2)
        object.__setattr__(self, "position", pos)
        if self.radius < 0:
            raise ConfigurationError("radius must be >= 0", field="radius_m")
        if self.heading is not None:
            object.__setattr__(self, "heading", float(wrap_angle(float(self.heading))))

    def as_array(self) -> np.ndarray:
        if self.heading is None:
            return self.position.copy()
        return np.array([self.position[0], self.position[1], self.heading])

    @classmethod
    def from_array(cls, x, radius=0.0):
        x = np.asarray(x, dtype=float)
        if x.shape == (2,):
            return cls(x, None, radius)
        if x.shape == (3,):
            return cls(x[:2], float(x[2]), radius)
        raise ConfigurationError(f"state must have 2 or 3 entries, got shape {x.shape}")


@dataclass(frozen=True)
class NoiseSpec:
    """Motion-noise distribution.

    ``kind`` is ``gaussian`` (zero mean, per-dimension ``sigma``), ``uniform``
    (per-dimension ``lo``/``hi``) or ``mixture`` (one of ``components`` picked
    uniformly at random on every draw). ``scale`` multiplies the draw
    componentwise.
    """

    kind: str
    sigma: tuple = (1.0, 1.0)
    lo: tuple = (-1.0, -1.0)
    hi: tuple = (1.0, 1.0)
    components: tuple = ()
    scale: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.kind == "gaussian":
            if any(s < 0 for s in self.sigma):
                raise ConfigurationError("sigma must be >= 0", field="noise.sigma")
        elif self.kind == "uniform":
            if any(a > b for a, b in zip(self.lo, self.hi)):
                raise ConfigurationError("lo must be <= hi", field="noise.lo")
        elif self.kind == "mixture":
            if not self.components:
                raise ConfigurationError("mixture needs at least one component", field="noise.components")
        elif self.kind != "none":
            raise ConfigurationError(f"unknown noise kind {self.kind!r}", field="noise.kind")

    @classmethod
    def gaussian(cls, sigma=1.0, scale=1.0, dim=2):
        return cls("gaussian", sigma=_vec(sigma, dim), scale=_vec(scale, dim))

    @classmethod
    def uniform(cls, lo=-1.0, hi=1.0, scale=1.0, dim=2):
        return cls("uniform", lo=_vec(lo, dim), hi=_vec(hi, dim), scale=_vec(scale, dim))

    @classmethod
    def mixture(cls, components: Sequence["NoiseSpec"], scale=1.0, dim=2):
        return cls("mixture", components=tuple(components), scale=_vec(scale, dim))

    @classmethod
    def zero(cls, dim=2):
        return cls("none", scale=_vec(0.0, dim))

    @property
    def dim(self) -> int:
        return len(self.scale)

    def draw(self, rng: np.random.Generator):
        """Return ``(sample, branch)``; ``branch`` is the mixture index or -1."""
        scale = np.asarray(self.scale, dtype=float)
        if self.kind == "gaussian":
            return rng.normal(0.0, 1.0, size=len(self.sigma)) * np.asarray(self.sigma) * scale, -1
        if self.kind == "uniform":
            return rng.uniform(np.asarray(self.lo), np.asarray(self.hi)) * scale, -1
        if self.kind == "mixture":
            branch = int(rng.integers(len(self.components)))
            sample, _ = self.components[branch].draw(rng)
            return sample * scale, branch
        return np.zeros(self.dim), -1


def _vec(value, dim):
    if np.ndim(value) == 0:
        return (float(value),) * dim
    return tuple(float(v) for v in value)


def sample_noise(spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    return spec.draw(rng)[0]


class RngStreams:
    """Named random streams spawned from one master seed.

    A stream is keyed by ``(robot_index, channel)``; keys never depend on how
    many robots exist, so adding a robot leaves the other streams untouched.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams = {}

    def get(self, robot: int, channel: str = "motion") -> np.random.Generator:
        key = (int(robot), channel)
        if key not in self._streams:
            ss = np.random.SeedSequence(self.seed, spawn_key=(int(robot), zlib.crc32(channel.encode())))
            self._streams[key] = np.random.Generator(np.random.PCG64(ss))
        return self._streams[key]


def _check_state(model: DynamicsModel, x: RobotState):
    if (x.heading is not None) != (model.kind == UNICYCLE):
        raise ConfigurationError(
            f"state {'has' if x.heading is not None else 'lacks'} a heading but model is {model.kind}",
            field="model",
        )


def integrate(model: DynamicsModel, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """One Euler step for stacked states ``X`` (N, n) under velocities ``U`` (N, 2)."""
    dt = model.dt
    if model.kind == SINGLE_INTEGRATOR:
        return X + U * dt
    theta = X[:, 2]
    out = np.empty_like(X)
    out[:, 0] = X[:, 0] + U[:, 0] * np.cos(theta) * dt
    out[:, 1] = X[:, 1] + U[:, 0] * np.sin(theta) * dt
    out[:, 2] = wrap_angle(theta + U[:, 1] * dt)
    return out


def step_nominal(model: DynamicsModel, x: RobotState, u) -> RobotState:
    _check_state(model, x)
    u = np.asarray(u, dtype=float).reshape(1, 2)
    nxt = integrate(model, x.as_array()[None, :], u)[0]
    return RobotState.from_array(nxt, x.radius)


def step_stochastic(model: DynamicsModel, x: RobotState, u, noise: NoiseSpec, rng: np.random.Generator) -> RobotState:
    _check_state(model, x)
    eps = sample_noise(noise, rng)
    u = np.asarray(u, dtype=float).reshape(2) + eps
    nxt = integrate(model, x.as_array()[None, :], u[None, :])[0]
    return RobotState.from_array(nxt, x.radius)


@dataclass
class NoiseSource:
    """Per-robot noise specs bound to their RNG streams."""

    specs: list
    streams: RngStreams = field(repr=False)

    def sample(self) -> np.ndarray:
        return np.stack([sample_noise(spec, self.streams.get(i)) for i, spec in enumerate(self.specs)])
