"""Squared-distance control barrier functions and their tightened certificates.

For a pair of discs with combined radius ``R`` and reference points ``p_i``,
``p_j`` the barrier is ``h = |p_i - p_j|^2 - R^2`` and the safety barrier
certificate with a linear class-K term is

    B(x, u) = 2 (p_i - p_j) . (pdot_i - pdot_j) + gamma * h,

which is affine in the controls because ``pdot = M(x) u`` for both shipped
models. Unicycles are evaluated at a look-ahead point ``p = c + d (cos, sin)``
so both linear and angular velocity enter ``M``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import SINGLE_INTEGRATOR, DynamicsModel, RobotState
from .errors import ConfigurationError, ContractViolation, DegenerateGradientError

ROBOT_ROBOT = "robot_robot"
ROBOT_OBSTACLE = "robot_obstacle"
DEFAULT_OFFSET = 0.05
_COINCIDENT = 1e-9


@dataclass(frozen=True)
class ObstacleSpec:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.radius < 0:
            raise ConfigurationError("obstacle radius must be >= 0", field="obstacles.radius_m")


@dataclass(frozen=True)
class BarrierPair:
    kind: str
    i: int
    j: int
    combined_radius: float

    def __post_init__(self):
        if self.kind not in (ROBOT_ROBOT, ROBOT_OBSTACLE):
            raise ConfigurationError(f"unknown pair kind {self.kind!r}")
        if self.kind == ROBOT_ROBOT and self.i == self.j:
            raise ConfigurationError("robot_robot pair needs two distinct robots")
        if not self.combined_radius > 0:
            raise ConfigurationError("combined radius must be positive", field="radius_m")

    @property
    def label(self) -> tuple:
        return (f"r{self.i}", f"r{self.j}" if self.kind == ROBOT_ROBOT else f"o{self.j}")


@dataclass
class BarrierTerms:
    """``B(u) = a . u + c`` over the joint control vector (robot-major)."""

    a: np.ndarray
    c: float
    h_val: float

    def value(self, u) -> float:
        return float(self.a @ np.asarray(u, dtype=float).ravel() + self.c)


@dataclass
class LinearConstraint:
    """``coef . u + offset >= 0``."""

    coef: np.ndarray
    offset: float

    def residual(self, u) -> float:
        return float(self.coef @ np.asarray(u, dtype=float).ravel() + self.offset)

    def holds(self, u, tol=0.0) -> bool:
        return self.residual(u) >= -tol


def make_pairs(radii: Sequence[float], obstacles: Sequence[ObstacleSpec] = ()) -> list:
    pairs = []
    n = len(radii)
    for i in range(n):
        for j in range(i + 1, n):
            pairs.append(BarrierPair(ROBOT_ROBOT, i, j, radii[i] + radii[j]))
    for i in range(n):
        for o, obs in enumerate(obstacles):
            pairs.append(BarrierPair(ROBOT_OBSTACLE, i, o, radii[i] + obs.radius))
    return pairs


class PairSet:
    """Array view of a pair list for vectorised barrier evaluation."""

    def __init__(self, pairs: Sequence[BarrierPair], obstacles: Sequence[ObstacleSpec] = ()):
        self.pairs = list(pairs)
        self.i = np.array([p.i for p in self.pairs], dtype=int)
        self.j = np.array([p.j for p in self.pairs], dtype=int)
        self.is_obstacle = np.array([p.kind == ROBOT_OBSTACLE for p in self.pairs], dtype=bool)
        self.radius = np.array([p.combined_radius for p in self.pairs], dtype=float)
        self.obstacle_centers = np.array([o.center for o in obstacles], dtype=float).reshape(-1, 2)

    def __len__(self):
        return len(self.pairs)

    def subset(self, idx) -> "PairSet":
        out = PairSet([self.pairs[p] for p in idx])
        out.obstacle_centers = self.obstacle_centers
        return out

    def other_points(self, P: np.ndarray) -> np.ndarray:
        """Second point of every pair; ``P`` may carry leading batch axes (..., N, 2)."""
        P = np.asarray(P, dtype=float)
        if not self.is_obstacle.any():
            return P[..., self.j, :]
        out = np.empty(P.shape[:-2] + (len(self.pairs), 2))
        rr = ~self.is_obstacle
        out[..., rr, :] = P[..., self.j[rr], :]
        out[..., self.is_obstacle, :] = self.obstacle_centers[self.j[self.is_obstacle]]
        return out

    def other_velocities(self, V: np.ndarray) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        out = np.zeros(V.shape[:-2] + (len(self.pairs), 2))
        rr = ~self.is_obstacle
        out[..., rr, :] = V[..., self.j[rr], :]
        return out

    def h(self, P: np.ndarray) -> np.ndarray:
        d = P[..., self.i, :] - self.other_points(P)
        return np.einsum("...i,...i->...", d, d) - self.radius**2

    def barrier(self, P: np.ndarray, V: np.ndarray, gamma: float) -> np.ndarray:
        d = P[..., self.i, :] - self.other_points(P)
        w = V[..., self.i, :] - self.other_velocities(V)
        return 2.0 * np.einsum("...i,...i->...", d, w) + gamma * (np.einsum("...i,...i->...", d, d) - self.radius**2)


# -- reference points and their derivatives ---------------------------------

def barrier_points(model: DynamicsModel, X: np.ndarray, offset: float = DEFAULT_OFFSET) -> np.ndarray:
    """Points the barrier is evaluated at: centres, or look-ahead points for unicycles.

    ``X`` is (..., N, n_x); the result is (..., N, 2).
    """
    if model.kind == SINGLE_INTEGRATOR:
        return X[..., :2].copy()
    th = X[..., 2]
    return X[..., :2] + offset * np.stack([np.cos(th), np.sin(th)], axis=-1)


def velocity_matrices(model: DynamicsModel, X: np.ndarray, offset: float = DEFAULT_OFFSET) -> np.ndarray:
    """``M(x)`` with ``pdot = M(x) u``, shape (..., N, 2, 2)."""
    if model.kind == SINGLE_INTEGRATOR:
        return np.broadcast_to(np.eye(2), X.shape[:-1] + (2, 2)).copy()
    c, s = np.cos(X[..., 2]), np.sin(X[..., 2])
    M = np.empty(X.shape[:-1] + (2, 2))
    M[..., 0, 0], M[..., 0, 1] = c, -offset * s
    M[..., 1, 0], M[..., 1, 1] = s, offset * c
    return M


def point_velocities(model: DynamicsModel, X: np.ndarray, U: np.ndarray, offset: float = DEFAULT_OFFSET) -> np.ndarray:
    if model.kind == SINGLE_INTEGRATOR:
        return np.array(U, dtype=float)
    c, s = np.cos(X[..., 2]), np.sin(X[..., 2])
    v, w = U[..., 0], U[..., 1]
    return np.stack([v * c - offset * w * s, v * s + offset * w * c], axis=-1)


def point_jacobians(model: DynamicsModel, X: np.ndarray, U: np.ndarray, offset: float = DEFAULT_OFFSET):
    """State derivatives of the reference point and of its velocity.

    Returns ``(Jp, Jv)``, each (..., N, 2, n_x): ``Jp = dp/dx`` and ``Jv = d(M(x)u)/dx``.
    """
    nx = X.shape[-1]
    Jp = np.zeros(X.shape[:-1] + (2, nx))
    Jv = np.zeros(X.shape[:-1] + (2, nx))
    Jp[..., 0, 0] = 1.0
    Jp[..., 1, 1] = 1.0
    if model.kind != SINGLE_INTEGRATOR:
        c, s = np.cos(X[..., 2]), np.sin(X[..., 2])
        v, w = U[..., 0], U[..., 1]
        Jp[..., 0, 2] = -offset * s
        Jp[..., 1, 2] = offset * c
        Jv[..., 0, 2] = -v * s - offset * w * c
        Jv[..., 1, 2] = v * c - offset * w * s
    return Jp, Jv


# -- scalar operations ---------------------------------------------------------

def _centres(pair: BarrierPair, robots: Sequence[RobotState], obstacles: Sequence[ObstacleSpec]):
    try:
        pi = robots[pair.i].position
        if pair.kind == ROBOT_ROBOT:
            pj = robots[pair.j].position
        else:
            pj = np.asarray(obstacles[pair.j].center, dtype=float)
    except IndexError as exc:
        raise ConfigurationError(f"pair {pair.label} references a missing index") from exc
    return pi, pj


def h_value(pair: BarrierPair, robots: Sequence[RobotState], obstacles: Sequence[ObstacleSpec] = ()) -> float:
    """Squared centre distance minus squared combined radius; positive means separated."""
    pi, pj = _centres(pair, robots, obstacles)
    d = pi - pj
    return float(d @ d - pair.combined_radius**2)


def barrier_terms(
    pair: BarrierPair,
    robots: Sequence[RobotState],
    model: DynamicsModel,
    gamma: float,
    obstacles: Sequence[ObstacleSpec] = (),
    offset: float = DEFAULT_OFFSET,
) -> BarrierTerms:
    """Affine certificate ``a . u + c`` over the joint control of all robots."""
    if not gamma > 0:
        raise ContractViolation("gamma must be positive")
    _centres(pair, robots, obstacles)
    X = np.stack([r.as_array() for r in robots])
    P = barrier_points(model, X, offset)
    M = velocity_matrices(model, X, offset)
    pi = P[pair.i]
    pj = P[pair.j] if pair.kind == ROBOT_ROBOT else np.asarray(obstacles[pair.j].center, dtype=float)
    d = pi - pj
    if math.hypot(d[0], d[1]) < _COINCIDENT:
        raise DegenerateGradientError(f"pair {pair.label} has coincident reference points")
    h = float(d @ d - pair.combined_radius**2)
    a = np.zeros(2 * len(robots))
    a[2 * pair.i: 2 * pair.i + 2] = 2.0 * d @ M[pair.i]
    if pair.kind == ROBOT_ROBOT:
        a[2 * pair.j: 2 * pair.j + 2] = -2.0 * d @ M[pair.j]
    return BarrierTerms(a=a, c=gamma * h, h_val=h)


def tighten(terms: BarrierTerms, e_r: float, mode: str = "barrier", lip: Optional[float] = None) -> LinearConstraint:
    """Shift the certificate by the conformal quantile (or ``lip * e_r``)."""
    if e_r < 0:
        raise ContractViolation(f"quantile must be non-negative, got {e_r}")
    if mode == "barrier":
        margin = e_r
    elif mode == "state_lipschitz":
        if lip is None or lip < 0:
            raise ContractViolation("state_lipschitz mode needs lip >= 0")
        margin = lip * e_r
    else:
        raise ConfigurationError(f"unknown tightening mode {mode!r}", field="cbf.tightening")
    return LinearConstraint(coef=np.asarray(terms.a, dtype=float).copy(), offset=terms.c - margin)


def lipschitz_bound(lip_lfh: float, lip_lgh: float, u_norm: float, lip_kh: float) -> float:
    if min(lip_lfh, lip_lgh, u_norm, lip_kh) < 0:
        raise ContractViolation("Lipschitz inputs must be non-negative")
    return lip_lfh + lip_lgh * u_norm + lip_kh


def integrator_lipschitz_constants(kind: str, workspace_diameter: float, gamma: float):
    """Analytic ``(L_Lfh, L_Lgh, L_Kh)`` for the squared-distance barrier.

    The state is the robot position for ``robot_obstacle`` and the stacked
    positions of both robots for ``robot_robot``; every point (and obstacle
    centre) lies in a convex workspace of the given diameter.
    """
    if kind == ROBOT_OBSTACLE:
        return 0.0, 2.0, 2.0 * gamma * workspace_diameter
    if kind == ROBOT_ROBOT:
        return 0.0, 4.0, 2.0 * math.sqrt(2.0) * gamma * workspace_diameter
    raise ConfigurationError(f"unknown pair kind {kind!r}")


def estimate_lipschitz(fn: Callable, xs: np.ndarray, ys: np.ndarray) -> float:
    """Largest secant slope ``|fn(x) - fn(y)| / |x - y|`` over paired samples.

    Any secant slope lower-bounds the true Lipschitz constant.
    """
    best = 0.0
    for x, y in zip(xs, ys):
        gap = np.linalg.norm(x - y)
        if gap == 0:
            continue
        diff = np.atleast_1d(np.asarray(fn(x), dtype=float) - np.asarray(fn(y), dtype=float))
        best = max(best, float(np.linalg.norm(diff)) / gap)
    return best
