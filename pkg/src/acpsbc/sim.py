"""Closed-loop execution of the ACP-tightened barrier MPC, plus metrics and logs.

Each step of :func:`run`:

1. observe the joint state ``X_k``;
2. evaluate the observed certificate ``B(X_k, u_{k-1})`` for every pair;
3. score it against the predictions made 1..H steps earlier, record the
   scores and adapt the per-lag levels;
4. read the per-lag quantiles and turn them into constraint margins;
5. solve the MPC (zero margins for the untightened baseline);
6. file the new predictions;
7. apply the first control through the noisy dynamics.

Scores are grouped: per group (pair kind by default) and lag, only the pair
with the smallest observed barrier value contributes a score, so every group
produces exactly one coverage event per lag and step.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .acp import AcpLedger, PredictionBuffer
from .cbf import (ROBOT_OBSTACLE, ROBOT_ROBOT, barrier_points, integrator_lipschitz_constants,
                  lipschitz_bound, point_velocities)
from .config import AcpSettings, Scenario, config_hash
from .dynamics import NoiseSource, RngStreams, integrate
from .errors import SolverAbort
from .mpc import RELAXED, MpcController, predicted_barriers, rollout

__all__ = [
    "AcpSettings", "Scenario", "TrajectoryLog", "Metrics", "run", "coverage_rate", "min_distance_series",
    "metrics", "batch_run", "write_log", "read_csv_rows", "rows_to_csv", "CSV_COLUMNS",
]

CSV_COLUMNS = ("k", "type", "id_a", "id_b", "tau", "h", "b_hat", "quantile", "alpha", "breached",
               "min_rr", "min_ro", "slack", "status")


@dataclass
class TrajectoryLog:
    scenario: str
    seed: int
    config_hash: str
    pair_labels: list
    pair_kinds: list
    groups: list
    horizon: int
    goal_tol: float
    goals: np.ndarray
    states: np.ndarray  # (T+1, N, n_x); the last entry is the state after the final step
    points: np.ndarray  # (T+1, N, 2) reference points: centres, or look-ahead points for unicycles
    controls: np.ndarray  # (T, N, 2)
    h: np.ndarray  # (T, n_pairs) barrier at the observed state, evaluated at the barrier points
    clearance: np.ndarray  # (T, n_pairs) barrier-point distance minus combined radius
    b_hat: np.ndarray  # (T, n_pairs) observed certificate (nan at k = 0)
    quantiles: np.ndarray  # (T, n_groups, H) quantiles used for tightening at step k
    alphas: np.ndarray  # (T, n_groups, H) adaptive levels after the step-k update
    events: list  # CoverageEvent, group field holds the group name
    event_pairs: list  # index of the representative pair of each event
    min_rr: np.ndarray  # (T,)
    min_ro: np.ndarray  # (T,)
    status: list
    slack: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray
    solve_time: np.ndarray
    braked: np.ndarray  # (T,) number of robots that fell back to braking

    def __len__(self):
        return len(self.status)

    @property
    def min_h(self) -> float:
        return float(self.h.min()) if self.h.size else math.inf


@dataclass
class Metrics:
    seed: int
    min_h: float
    collided: bool
    goal_step: Optional[int]
    min_clearance_rr: float
    min_clearance_ro: float
    coverage: dict
    relaxed_steps: int
    braked_steps: int
    mean_solve_time_s: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("min_h", "min_clearance_rr", "min_clearance_ro"):
            if math.isinf(d[key]):
                d[key] = None
        return d


def _group_names(pairs, granularity):
    if granularity == "kind":
        names = [p.kind for p in pairs]
    elif granularity == "pair":
        names = ["-".join(p.label) for p in pairs]
    else:
        names = ["all"] * len(pairs)
    order = list(dict.fromkeys(names))
    return order, np.array([order.index(n) for n in names], dtype=int)


def _lipschitz_factors(sc: Scenario, pairs) -> np.ndarray:
    """Per-pair ``L`` for state-space tightening (margin = L * quantile of state errors)."""
    x0, x1, y0, y1 = sc.workspace
    diam = math.hypot(x1 - x0, y1 - y0)
    umax = max(abs(v) for v in sc.mpc.u_min + sc.mpc.u_max)
    out = np.empty(len(pairs))
    for n, p in enumerate(pairs):
        lfh, lgh, lkh = integrator_lipschitz_constants(p.kind, diam, sc.gamma)
        joint = math.sqrt(2.0) * umax * (math.sqrt(2.0) if p.kind == ROBOT_ROBOT else 1.0)
        out[n] = lipschitz_bound(lfh, lgh, joint, lkh)
    return out


def run(scenario: Scenario) -> TrajectoryLog:
    """Simulate ``scenario.tn`` steps of the closed loop; deterministic for a fixed seed."""
    sc = scenario.validate()
    model, H = sc.model, sc.mpc.horizon
    n = sc.n_robots
    ps = sc.pairs()
    npairs = len(ps)
    groups, group_of = _group_names(ps.pairs, sc.acp.granularity)
    members = [np.flatnonzero(group_of == g) for g in range(len(groups))]
    a = sc.acp
    ledgers = [AcpLedger(H, a.alpha, a.delta, a.e_init, a.alpha_min, a.alpha_max, a.shared_set, a.min_scores)
               for _ in groups]
    state_mode = sc.tightening == "state_lipschitz"
    lip = _lipschitz_factors(sc, ps.pairs) if state_mode else np.ones(npairs)
    baseline = sc.method == "cbf_baseline"
    planned = a.predictions == "planned"

    ctrl = MpcController(model, sc.mpc, ps, sc.goals, sc.gamma, sc.offset)
    noise = NoiseSource(list(sc.noise), RngStreams(sc.seed))
    buffer = PredictionBuffer(H)
    origins: deque = deque()  # (s, nominal state at the current step propagated from X_s)

    X = sc.starts.astype(float).copy()
    last_u = np.zeros((n, 2))
    T = sc.tn
    G = len(groups)
    states = np.empty((T + 1,) + X.shape)
    controls = np.empty((T, n, 2))
    h_log = np.empty((T, npairs))
    clr_log = np.empty((T, npairs))
    b_log = np.full((T, npairs), np.nan)
    q_log = np.empty((T, G, H))
    a_log = np.empty((T, G, H))
    events, event_pairs, status = [], [], []
    slack = np.zeros(T)
    iters = np.zeros(T, dtype=int)
    resid = np.zeros(T)
    stime = np.zeros(T)
    braked = np.zeros(T, dtype=int)
    failures = 0
    rr_mask = ~ps.is_obstacle
    ro_mask = ps.is_obstacle

    for k in range(T):
        states[k] = X
        if npairs:
            # integrators: the robot centre; unicycles: the look-ahead point the barrier certifies
            pts = barrier_points(model, X, sc.offset)
            dvec = pts[ps.i] - ps.other_points(pts)
            dist = np.sqrt(np.einsum("ij,ij->i", dvec, dvec))
            h_log[k] = dist**2 - ps.radius**2
            clr_log[k] = dist - ps.radius

        # observe and score
        if k >= 1 and npairs:
            P = barrier_points(model, X, sc.offset)
            b_hat = ps.barrier(P, point_velocities(model, X, last_u, sc.offset), sc.gamma)
            b_log[k] = b_hat
            h_pts = ps.h(P)
            preds = {}
            if planned:
                for tau in range(1, H + 1):
                    val = buffer.lookup(k - tau, tau)
                    if val is not None:
                        preds[tau] = (val, None)
            else:
                for s, Xt in origins:
                    Pt = barrier_points(model, Xt, sc.offset)
                    preds[k - s] = (ps.barrier(Pt, point_velocities(model, Xt, last_u, sc.offset), sc.gamma), Xt)
            for g, idx in enumerate(members):
                rep = int(idx[np.argmin(h_pts[idx])])
                for tau in sorted(preds):
                    pred, Xt = preds[tau]
                    if state_mode:
                        score = _pair_state_error(ps, rep, X, Xt)
                    else:
                        score = abs(float(b_hat[rep] - pred[rep]))
                    events.append(ledgers[g].observe(k, tau, score, group=groups[g]))
                    event_pairs.append(rep)

        # tighten and solve
        Q = np.array([led.quantiles() for led in ledgers]).reshape(G, H)
        q_log[k] = Q
        a_log[k] = np.array([[led.alphas[t] for t in range(1, H + 1)] for led in ledgers]).reshape(G, H)
        margins = np.zeros((npairs, H)) if baseline else Q[group_of] * lip[:, None]
        active = np.linalg.norm(barrier_points(model, X, sc.offset) - sc.goals, axis=1) > sc.goal_tol
        t0 = time.perf_counter()
        res = ctrl.step(X, margins, last_u, active)
        stime[k] = time.perf_counter() - t0
        status.append(res.status)
        slack[k] = res.slack
        iters[k] = res.iterations
        resid[k] = res.residual
        braked[k] = int(res.failed.sum())
        failures = failures + 1 if res.failed.any() else 0
        if failures > sc.max_failures:
            raise SolverAbort(f"solver failed on {failures} consecutive steps (last at k={k})")
        u = res.controls
        controls[k] = u

        if planned and npairs:
            Xp = rollout(model, X, res.plan)
            Bp = predicted_barriers(model, ps, Xp, res.plan, sc.gamma, sc.offset)
            for tau in range(1, H + 1):
                buffer.store(k, tau, Bp[tau - 1])
        elif not planned:
            origins.append((k, X.copy()))

        # apply
        eps = noise.sample()
        X = integrate(model, X, u + eps)
        origins = deque((s, integrate(model, Xt, u)) for s, Xt in origins if k + 1 - s <= H)
        last_u = u

    states[T] = X
    inf = np.full(T, np.inf)
    return TrajectoryLog(
        scenario=sc.name, seed=sc.seed, config_hash=config_hash(sc),
        pair_labels=[p.label for p in ps.pairs], pair_kinds=[p.kind for p in ps.pairs], groups=groups,
        horizon=H, goal_tol=sc.goal_tol, goals=sc.goals.copy(),
        states=states, points=barrier_points(model, states, sc.offset), controls=controls, h=h_log, clearance=clr_log, b_hat=b_log,
        quantiles=q_log, alphas=a_log, events=events, event_pairs=event_pairs,
        min_rr=clr_log[:, rr_mask].min(axis=1) if rr_mask.any() else inf,
        min_ro=clr_log[:, ro_mask].min(axis=1) if ro_mask.any() else inf.copy(),
        status=status, slack=slack, iterations=iters, residual=resid, solve_time=stime, braked=braked,
    )


def _pair_state_error(ps, p, X, Xt) -> float:
    i = ps.i[p]
    err = [X[i, :2] - Xt[i, :2]]
    if not ps.is_obstacle[p]:
        j = ps.j[p]
        err.append(X[j, :2] - Xt[j, :2])
    return float(np.linalg.norm(np.concatenate(err)))


# -- metrics ---------------------------------------------------------------------

def coverage_rate(log: TrajectoryLog, tau: int, group: Optional[str] = None) -> Optional[float]:
    """Fraction of lag-``tau`` coverage events that were not breached; ``None`` without events."""
    evs = [e for e in log.events if e.tau == tau and (group is None or e.group == group)]
    if not evs:
        return None
    return sum(not e.breached for e in evs) / len(evs)


def min_distance_series(log: TrajectoryLog):
    """Per-step minimum clearance (distance minus combined radius), robot-robot and robot-obstacle.

    A series is ``None`` when the scenario has no pair of that kind.
    """
    kinds = np.array(log.pair_kinds)
    out = []
    for kind in (ROBOT_ROBOT, ROBOT_OBSTACLE):
        mask = kinds == kind
        out.append(log.clearance[:, mask].min(axis=1) if mask.any() else None)
    return tuple(out)


def goal_step(log: TrajectoryLog) -> Optional[int]:
    """Step by which every robot has entered the goal tolerance at least once."""
    d = np.linalg.norm(log.points[:-1] - log.goals[None], axis=2)
    inside = d <= log.goal_tol
    if not inside.any(axis=0).all():
        return None
    return int(inside.argmax(axis=0).max())


def metrics(log: TrajectoryLog) -> Metrics:
    rr, ro = min_distance_series(log)
    cov = {}
    for tau in range(1, log.horizon + 1):
        c = coverage_rate(log, tau)
        if c is not None:
            cov[str(tau)] = c
    min_h = log.min_h
    return Metrics(
        seed=log.seed, min_h=min_h, collided=bool(min_h < 0), goal_step=goal_step(log),
        min_clearance_rr=float(rr.min()) if rr is not None else math.inf,
        min_clearance_ro=float(ro.min()) if ro is not None else math.inf,
        coverage=cov, relaxed_steps=sum(s == RELAXED for s in log.status),
        braked_steps=int((log.braked > 0).sum()),
        mean_solve_time_s=float(log.solve_time.mean()) if len(log) else 0.0,
    )


def _run_metrics(sc: Scenario) -> Metrics:
    return metrics(run(sc))


def batch_run(scenario: Scenario, seeds: Sequence[int], workers: Optional[int] = None) -> list:
    """Metrics for independent runs over ``seeds`` (results in seed order)."""
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    scs = [scenario.with_(seed=s) for s in seeds]
    if workers is None:
        workers = min(len(scs), os.cpu_count() or 1)
    if workers <= 1 or len(scs) <= 1:
        return [_run_metrics(s) for s in scs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_metrics, scs))


# -- serialisation -----------------------------------------------------------------

def _f(x) -> str:
    return repr(float(x))


def log_rows(log: TrajectoryLog) -> list:
    """Rows of the trajectory CSV: one ``step`` row, then ``pair`` rows, then ``lag`` rows per step."""
    by_step: dict = {}
    for ev, rep in zip(log.events, log.event_pairs):
        by_step.setdefault(ev.k, {})[(ev.group, ev.tau)] = (ev, rep)
    rows = []
    for k in range(len(log)):
        rows.append({"k": k, "type": "step", "min_rr": _f(log.min_rr[k]), "min_ro": _f(log.min_ro[k]),
                     "slack": _f(log.slack[k]), "status": log.status[k]})
        for p, (a, b) in enumerate(log.pair_labels):
            rows.append({"k": k, "type": "pair", "id_a": a, "id_b": b, "h": _f(log.h[k, p]),
                         "b_hat": _f(log.b_hat[k, p])})
        evs = by_step.get(k, {})
        for g, name in enumerate(log.groups):
            for tau in range(1, log.horizon + 1):
                row = {"k": k, "type": "lag", "id_a": name, "tau": tau, "quantile": _f(log.quantiles[k, g, tau - 1]),
                       "alpha": _f(log.alphas[k, g, tau - 1])}
                hit = evs.get((name, tau))
                if hit is not None:
                    ev, rep = hit
                    row["id_b"] = "-".join(log.pair_labels[rep])
                    row["b_hat"] = _f(ev.score)
                    row["breached"] = "1" if ev.breached else "0"
                rows.append(row)
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({c: ("" if r.get(c) is None else str(r.get(c))) for c in CSV_COLUMNS})
    return buf.getvalue()


_INT_COLS = ("k", "tau")
_FLOAT_COLS = ("h", "b_hat", "quantile", "alpha", "min_rr", "min_ro", "slack")


def read_csv_rows(text: str) -> list:
    """Parse a trajectory CSV into typed rows (empty cells are dropped)."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    rows = []
    for raw in reader:
        row = {}
        for key, val in raw.items():
            if val == "":
                continue
            if key in _INT_COLS:
                row[key] = int(val)
            elif key in _FLOAT_COLS:
                row[key] = repr(float(val))
            else:
                row[key] = val
        if row.get("type") not in ("step", "pair", "lag"):
            raise ValueError(f"unknown row type {row.get('type')!r}")
        rows.append(row)
    return rows


def states_csv(log: TrajectoryLog) -> str:
    nx = log.states.shape[2]
    cols = ["k", "robot", "x", "y"] + (["theta"] if nx == 3 else []) + ["u0", "u1"]
    lines = [",".join(cols)]
    for k in range(log.states.shape[0]):
        for i in range(log.states.shape[1]):
            vals = [str(k), str(i)] + [_f(v) for v in log.states[k, i]]
            if k < len(log):
                vals += [_f(v) for v in log.controls[k, i]]
            else:
                vals += ["", ""]
            lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def write_log(log: TrajectoryLog, out_dir) -> Path:
    """Write ``trajectory.csv``, ``states.csv`` and the ``run.json`` sidecar; returns the CSV path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trajectory.csv"
    path.write_text(rows_to_csv(log_rows(log)))
    (out / "states.csv").write_text(states_csv(log))
    meta = {"scenario": log.scenario, "seed": log.seed, "config_hash": log.config_hash, "version": __version__,
            "columns": list(CSV_COLUMNS), "steps": len(log)}
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def write_metrics(m: Metrics, path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")
