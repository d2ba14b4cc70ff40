"""Adaptive conformal quantiles over time-lagged barrier prediction errors.

A ledger keeps, for each prediction lag ``tau = 1..H``, a sorted multiset of
non-negative nonconformity scores and an adaptive miscoverage level
``alpha_tau`` updated online by

    alpha_tau <- clip(alpha_tau + delta * (alpha - breached), alpha_min, alpha_max).

The conformal quantile of lag ``tau`` is the ``ceil((n + 1)(1 - alpha_tau))``-th
smallest score, clamped to the largest score when that rank exceeds ``n``.
"""
from __future__ import annotations

import math
from bisect import insort
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cbf import DEFAULT_OFFSET, BarrierPair, ObstacleSpec, barrier_terms
from .dynamics import DynamicsModel, RobotState
from .errors import ContractViolation


@dataclass(frozen=True)
class CoverageEvent:
    k: int
    tau: int
    score: float
    quantile: float
    breached: bool
    group: str = ""


class AcpLedger:
    """Per-lag score multisets and adaptive levels for one group of barrier pairs.

    With ``shared_set=True`` every lag writes into a single multiset (each lag
    still keeps its own level). ``min_scores`` is the warm-up size below which
    :meth:`quantile` returns ``e_init``; it defaults to ``ceil(1 / alpha)``.
    """

    def __init__(
        self,
        horizon: int,
        alpha: float = 0.05,
        delta: float = 0.05,
        e_init: float = 1.0,
        alpha_min: float = 0.001,
        alpha_max: float = 0.999,
        shared_set: bool = False,
        min_scores: Optional[int] = None,
    ):
        if horizon < 1:
            raise ContractViolation("horizon must be >= 1")
        if not 0 < alpha < 1:
            raise ContractViolation("alpha must lie in (0, 1)")
        if not alpha_min <= alpha <= alpha_max:
            raise ContractViolation("alpha must lie within the clamp bounds")
        self.horizon = horizon
        self.alpha = alpha
        self.delta = delta
        self.e_init = e_init
        self.alpha_min = alpha_min
        self.alpha_max = alpha_max
        self.shared_set = shared_set
        self.min_scores = math.ceil(1.0 / alpha) if min_scores is None else int(min_scores)
        self._shared: list = []
        self._scores = {tau: ([] if not shared_set else self._shared) for tau in range(1, horizon + 1)}
        self.alphas = {tau: alpha for tau in range(1, horizon + 1)}

    def _check_tau(self, tau):
        if not 1 <= tau <= self.horizon:
            raise ContractViolation(f"lag {tau} outside 1..{self.horizon}")

    def scores(self, tau: int) -> list:
        self._check_tau(tau)
        return self._scores[tau]

    def record_score(self, tau: int, score: float) -> None:
        self._check_tau(tau)
        if not score >= 0:
            raise ContractViolation(f"scores must be non-negative, got {score}")
        insort(self._scores[tau], float(score))

    def quantile(self, tau: int) -> float:
        self._check_tau(tau)
        scores = self._scores[tau]
        n = len(scores)
        if n == 0 or n < self.min_scores:
            return self.e_init
        r = math.ceil((n + 1) * (1.0 - self.alphas[tau]))
        if r > n:
            return scores[-1]
        return scores[max(r, 1) - 1]

    def update_alpha(self, tau: int, breached: bool) -> float:
        self._check_tau(tau)
        err = 1.0 if breached else 0.0
        a = self.alphas[tau] + self.delta * (self.alpha - err)
        self.alphas[tau] = min(max(a, self.alpha_min), self.alpha_max)
        return self.alphas[tau]

    def observe(self, k: int, tau: int, score: float, group: str = "") -> CoverageEvent:
        """Score against the current quantile, then record it and adapt the level."""
        q = self.quantile(tau)
        event = CoverageEvent(k=k, tau=tau, score=float(score), quantile=q, breached=bool(score > q), group=group)
        self.record_score(tau, score)
        self.update_alpha(tau, event.breached)
        return event

    def quantiles(self) -> np.ndarray:
        return np.array([self.quantile(tau) for tau in range(1, self.horizon + 1)])


class PredictionBuffer:
    """Ring buffer of predicted barrier values for the last ``capacity`` origins.

    ``store(s, tau, values)`` files the ``tau``-step-ahead prediction made at
    time ``s``; entries whose origin falls out of the window are dropped.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._entries: "OrderedDict[int, dict]" = OrderedDict()

    def store(self, s: int, tau: int, values) -> None:
        self._entries.setdefault(s, {})[tau] = np.array(values, dtype=float, copy=True)
        while self._entries and next(iter(self._entries)) < s - self.capacity:
            self._entries.popitem(last=False)

    def lookup(self, s: int, tau: int):
        return self._entries.get(s, {}).get(tau)

    def __len__(self):
        return len(self._entries)


def lagged_scores(buffer: PredictionBuffer, observed, k: int) -> list:
    """``[(tau, |observed - B^tau_{k-tau}|), ...]`` for every buffered lag."""
    out = []
    for tau in range(1, buffer.capacity + 1):
        if k - tau < 0:
            break
        pred = buffer.lookup(k - tau, tau)
        if pred is None:
            continue
        score = np.abs(np.asarray(observed, dtype=float) - pred)
        out.append((tau, float(score) if score.ndim == 0 else score))
    return out


def observed_barrier(
    robots: Sequence[RobotState],
    applied_u,
    pair: BarrierPair,
    gamma: float,
    model: DynamicsModel,
    obstacles: Sequence[ObstacleSpec] = (),
    offset: float = DEFAULT_OFFSET,
) -> float:
    """Barrier certificate at the observed (noisy) state under the applied control."""
    terms = barrier_terms(pair, robots, model, gamma, obstacles, offset)
    return terms.value(np.asarray(applied_u, dtype=float).ravel())
