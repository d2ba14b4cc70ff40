"""Finite-horizon MPC with tightened barrier constraints.

Decision vector: the stacked controls ``U[t, c, k]`` of the controlled robots
over ``t = 0..H-1`` (flattened time-major). The cost is

    sum_{t=1}^{H-1} |x_t - g|_Q^2 + |x_H - g|_P^2 + sum_{t=0}^{H-1} |u_t|_R^2

along the noise-free rollout. Horizon step ``tau`` carries one constraint per
barrier pair, ``B(x_{tau-1}, u_{tau-1}) - margin_tau >= 0``, linearised in ``U``
(through the predicted state) around a reference control sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import qp
from .cbf import (DEFAULT_OFFSET, LinearConstraint, PairSet, barrier_points, point_jacobians,
                  point_velocities, velocity_matrices)
from .dynamics import SINGLE_INTEGRATOR, UNICYCLE, DynamicsModel, integrate, wrap_angle
from .errors import ConfigurationError, DegenerateGradientError

OPTIMAL = "optimal"
RELAXED = "relaxed"
MAX_ITER = "max_iter"


@dataclass
class MpcParams:
    horizon: int = 8
    q_diag: tuple = (1.0, 1.0)
    r_diag: tuple = (0.1, 0.1)
    p_diag: tuple = (10.0, 10.0)
    u_min: tuple = (-1.0, -1.0)
    u_max: tuple = (1.0, 1.0)
    slack_penalty: float = 1e4
    eps_tol: float = 1e-6
    max_iter: int = 4000
    mode: str = "centralized"
    sqp_iters: int = 10
    sqp_step: float = 0.5
    activation_radius: Optional[float] = None
    qp_method: str = "auto"

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1", field="horizon")
        for name in ("q_diag", "r_diag", "p_diag"):
            if any(w < 0 for w in getattr(self, name)):
                raise ConfigurationError("weights must be non-negative", field=name)
        if any(lo > hi for lo, hi in zip(self.u_min, self.u_max)):
            raise ConfigurationError("u_min must not exceed u_max", field="u_min")
        if not self.slack_penalty > 0:
            raise ConfigurationError("slack penalty must be positive", field="slack_penalty")
        if self.mode not in ("centralized", "decoupled"):
            raise ConfigurationError(f"unknown mode {self.mode!r}", field="mode")
        if self.qp_method not in ("auto", "active_set", "admm"):
            raise ConfigurationError(f"unknown QP method {self.qp_method!r}", field="qp_method")

    def qp_settings(self) -> qp.QpSettings:
        return qp.QpSettings(eps_abs=self.eps_tol * 1e-2, eps_rel=self.eps_tol * 1e-2, max_iter=self.max_iter,
                             method=self.qp_method)


# -- rollout and sensitivities -------------------------------------------------

def rollout(model: DynamicsModel, x0: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Noise-free trajectory ``(H+1, N, n_x)`` from ``x0`` (N, n_x) under ``U`` (H, N, 2)."""
    X = np.empty((U.shape[0] + 1,) + x0.shape)
    X[0] = x0
    for t in range(U.shape[0]):
        X[t + 1] = integrate(model, X[t], U[t])
    return X


@lru_cache(maxsize=64)
def _integrator_sensitivity(H: int, nc: int, dt: float) -> np.ndarray:
    G = np.zeros((H + 1, nc, 2, H * nc * 2))
    for t in range(1, H + 1):
        for s in range(t):
            for c in range(nc):
                col = (s * nc + c) * 2
                G[t, c, 0, col] = dt
                G[t, c, 1, col + 1] = dt
    G.setflags(write=False)
    return G


def sensitivities(model: DynamicsModel, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``G[t, c] = d x_t[c] / d U`` along the rollout, shape (H+1, N, n_x, H*N*2)."""
    H, nc = U.shape[0], U.shape[1]
    if model.kind == SINGLE_INTEGRATOR:
        return _integrator_sensitivity(H, nc, model.dt)
    dt = model.dt
    G = np.zeros((H + 1, nc, 3, H * nc * 2))
    for t in range(H):
        th = X[t, :, 2]
        v = U[t, :, 0]
        c, s = np.cos(th), np.sin(th)
        G[t + 1] = G[t]
        G[t + 1, :, 0, :] += (-v * s * dt)[:, None] * G[t, :, 2, :]
        G[t + 1, :, 1, :] += (v * c * dt)[:, None] * G[t, :, 2, :]
        for k in range(nc):
            col = (t * nc + k) * 2
            G[t + 1, k, 0, col] += c[k] * dt
            G[t + 1, k, 1, col] += s[k] * dt
            G[t + 1, k, 2, col + 1] += dt
    return G


def _state_error(model: DynamicsModel, X: np.ndarray, goals: np.ndarray, offset: float = DEFAULT_OFFSET) -> np.ndarray:
    """Tracking error of the reference point (the look-ahead point for unicycles)."""
    err = X.copy()
    err[..., :2] = barrier_points(model, X, offset) - goals
    if model.kind == UNICYCLE:
        # goals carry no heading; the default heading weight is zero anyway
        err[..., 2] = wrap_angle(err[..., 2])
    return err


def _error_jacobian(model: DynamicsModel, X: np.ndarray, offset: float = DEFAULT_OFFSET) -> np.ndarray:
    """``d err / d x`` for :func:`_state_error`, shape (..., n_x, n_x)."""
    nx = X.shape[-1]
    J = np.broadcast_to(np.eye(nx), X.shape[:-1] + (nx, nx)).copy()
    if model.kind == UNICYCLE:
        J[..., 0, 2] = -offset * np.sin(X[..., 2])
        J[..., 1, 2] = offset * np.cos(X[..., 2])
    return J


def _weights(params: MpcParams, nx: int, H: int):
    q = np.zeros(nx)
    p = np.zeros(nx)
    q[: len(params.q_diag)] = params.q_diag[:nx]
    p[: len(params.p_diag)] = params.p_diag[:nx]
    W = np.tile(q, (H + 1, 1))
    W[0] = 0.0
    W[H] = p
    return W


# -- problem -------------------------------------------------------------------

@dataclass
class MpcProblem:
    """A linearised MPC instance plus everything needed to re-linearise it.

    Constraints are stored as rows ``G U >= lo`` (one per pair and horizon
    step); :attr:`constraints` exposes them as :class:`LinearConstraint`.
    """

    model: DynamicsModel
    params: MpcParams
    x0: np.ndarray  # (N, n_x) joint state of every robot
    goals: np.ndarray  # (N_c, 2)
    controlled: np.ndarray  # indices of the optimised robots
    pairs: PairSet
    margins: np.ndarray  # (n_pairs, H)
    gamma: float
    offset: float
    frozen_u: np.ndarray  # (N, 2) controls assumed for robots that are not optimised
    U_ref: np.ndarray  # (H, N_c, 2) linearisation point
    X_ref: np.ndarray = None  # (H+1, N, n_x) joint rollout at U_ref
    P: np.ndarray = None
    q: np.ndarray = None
    G: np.ndarray = None
    lo: np.ndarray = None
    row_step: np.ndarray = None
    row_pair: np.ndarray = None
    lb: np.ndarray = None
    ub: np.ndarray = None

    @property
    def horizon(self) -> int:
        return self.params.horizon

    @property
    def n_controls(self) -> int:
        return self.horizon * len(self.controlled) * 2

    @property
    def constraints(self) -> list:
        return [LinearConstraint(coef=self.G[r], offset=-self.lo[r]) for r in range(self.G.shape[0])]

    def joint_controls(self, U: np.ndarray) -> np.ndarray:
        """Full (H, N, 2) control trajectory: optimised robots from ``U``, others frozen."""
        H = self.horizon
        Ua = np.broadcast_to(self.frozen_u, (H,) + self.frozen_u.shape).copy()
        Ua[:, self.controlled] = U
        return Ua

    def joint_rollout(self, U: np.ndarray) -> np.ndarray:
        return rollout(self.model, self.x0, self.joint_controls(U))

    def cost(self, U: np.ndarray) -> float:
        """Nonlinear tracking cost of the control sequence ``U`` (H, N_c, 2)."""
        X = rollout(self.model, self.x0[self.controlled], U)
        err = _state_error(self.model, X, self.goals, self.offset)
        W = _weights(self.params, X.shape[-1], self.horizon)
        r = np.asarray(self.params.r_diag, dtype=float)
        return float(np.einsum("tcn,tn,tcn->", err, W, err) + np.einsum("tck,k,tck->", U, r, U))

    def barrier_residuals(self, U: np.ndarray) -> np.ndarray:
        """Exact ``B(x_{tau-1}, u_{tau-1}) - margin`` for every row, evaluated on the rollout."""
        X = self.joint_rollout(U)
        Ua = self.joint_controls(U)
        H = self.horizon
        P = barrier_points(self.model, X[:H], self.offset)
        V = point_velocities(self.model, X[:H], Ua, self.offset)
        B = self.pairs.barrier(P, V, self.gamma)  # (H, n_pairs)
        t = self.row_step - 1
        return B[t, self.row_pair] - self.margins[self.row_pair, t]

    def relinearize(self, U_ref: np.ndarray) -> "MpcProblem":
        prob = replace(self, U_ref=np.array(U_ref, dtype=float))
        _assemble(prob)
        return prob


def build_problem(
    model: DynamicsModel,
    params: MpcParams,
    x0: np.ndarray,
    goals: np.ndarray,
    pairs: PairSet,
    margins: np.ndarray,
    gamma: float,
    *,
    controlled: Optional[Sequence[int]] = None,
    frozen_u: Optional[np.ndarray] = None,
    warm: Optional[np.ndarray] = None,
    offset: float = DEFAULT_OFFSET,
) -> MpcProblem:
    """Linearise the MPC around ``warm`` (defaults to zero controls).

    ``margins[p, tau-1]`` is the tightening applied to pair ``p`` at horizon
    step ``tau`` (already multiplied by a Lipschitz factor if that mode is on).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if x0.shape[1] != model.state_dim:
        raise ConfigurationError(f"state width {x0.shape[1]} does not match model {model.kind}", field="model")
    n = x0.shape[0]
    ctrl = np.arange(n) if controlled is None else np.asarray(controlled, dtype=int)
    H = params.horizon
    margins = np.asarray(margins, dtype=float).reshape(len(pairs), H)
    if np.any(margins < 0):
        raise ConfigurationError("tightening margins must be non-negative")
    if frozen_u is None:
        frozen_u = np.zeros((n, 2))
    if warm is None:
        warm = np.zeros((H, len(ctrl), 2))
    prob = MpcProblem(
        model=model, params=params, x0=x0, goals=np.asarray(goals, dtype=float).reshape(len(ctrl), 2),
        controlled=ctrl, pairs=pairs, margins=margins, gamma=float(gamma), offset=offset,
        frozen_u=np.asarray(frozen_u, dtype=float).reshape(n, 2), U_ref=np.array(warm, dtype=float),
    )
    _assemble(prob)
    return prob


def _assemble(prob: MpcProblem) -> None:
    model, params = prob.model, prob.params
    H = params.horizon
    ctrl = prob.controlled
    nc = len(ctrl)
    nu = H * nc * 2
    U_ref = prob.U_ref
    Ua = prob.joint_controls(U_ref)
    X = rollout(model, prob.x0, Ua)
    prob.X_ref = X
    Xc = X[:, ctrl]
    G = sensitivities(model, Xc, U_ref)
    u_flat = U_ref.reshape(-1)

    # cost
    W = _weights(params, model.state_dim, H)
    err = _state_error(model, Xc, prob.goals, prob.offset)
    if model.kind == UNICYCLE:
        GE = np.einsum("tcmn,tcnj->tcmj", _error_jacobian(model, Xc, prob.offset), G)
    else:
        GE = G
    base = err - np.einsum("tcnj,j->tcn", GE, u_flat)
    GW = GE * W[:, None, :, None]
    Pm = 2.0 * np.einsum("tcnj,tcnk->jk", GW, GE)
    qv = 2.0 * np.einsum("tcnj,tcn->j", GW, base)
    Pm[np.diag_indices(nu)] += 2.0 * np.tile(np.asarray(params.r_diag, dtype=float), H * nc)
    prob.P, prob.q = Pm, qv

    # barrier rows
    local = np.full(prob.x0.shape[0], -1, dtype=int)
    local[ctrl] = np.arange(nc)
    pairs = prob.pairs
    npairs = len(pairs)
    if npairs:
        pi, pj = pairs.i, pairs.j
        rr = ~pairs.is_obstacle
        li = local[pi]
        lj = np.where(rr, local[np.where(rr, pj, 0)], -1)
        Xh = X[:H]
        P = barrier_points(model, Xh, prob.offset)
        M = velocity_matrices(model, Xh, prob.offset)
        V = point_velocities(model, Xh, Ua, prob.offset)
        Jp, Jv = point_jacobians(model, Xh, Ua, prob.offset)
        d = P[:, pi] - pairs.other_points(P)  # (H, n_pairs, 2)
        w = V[:, pi] - pairs.other_velocities(V)
        dd = np.einsum("tpi,tpi->tp", d, d)
        if np.any(dd[0] < 1e-18):
            raise DegenerateGradientError("a barrier pair has coincident reference points")
        Bbar = 2.0 * np.einsum("tpi,tpi->tp", d, w) + prob.gamma * (dd - pairs.radius**2)
        g_p = 2.0 * w + 2.0 * prob.gamma * d
        rows = np.zeros((H, npairs, nu))
        steps = np.arange(H)[:, None]
        for side, lidx, sign in ((pi, li, 1.0), (pj, lj, -1.0)):
            sel = np.flatnonzero(lidx >= 0)
            if sel.size == 0:
                continue
            rob = side[sel]
            gx = sign * (np.einsum("tpi,tpin->tpn", g_p[:, sel], Jp[:, rob])
                         + 2.0 * np.einsum("tpi,tpin->tpn", d[:, sel], Jv[:, rob]))
            gu = sign * 2.0 * np.einsum("tpi,tpik->tpk", d[:, sel], M[:, rob])
            rows[:, sel] += np.einsum("tpn,tpnj->tpj", gx, G[:H, lidx[sel]])
            cols = (steps * nc + lidx[sel][None, :]) * 2  # (H, n_sel)
            rows[steps, sel[None, :], cols] += gu[..., 0]
            rows[steps, sel[None, :], cols + 1] += gu[..., 1]
        prob.G = rows.reshape(H * npairs, nu)
        prob.lo = (prob.margins.T - Bbar).reshape(-1) + prob.G @ u_flat
        prob.row_step = np.repeat(np.arange(1, H + 1), npairs)
        prob.row_pair = np.tile(np.arange(npairs), H)
    else:
        prob.G = np.zeros((0, nu))
        prob.lo = np.zeros(0)
        prob.row_step = np.zeros(0, dtype=int)
        prob.row_pair = np.zeros(0, dtype=int)
    prob.lb = np.tile(np.asarray(params.u_min, dtype=float), H * nc)
    prob.ub = np.tile(np.asarray(params.u_max, dtype=float), H * nc)


# -- solution ------------------------------------------------------------------

@dataclass
class MpcSolution:
    controls: np.ndarray  # (H, N_c, 2)
    states: np.ndarray  # (H+1, N, n_x) joint nominal rollout
    predicted_b: np.ndarray  # (H, n_pairs): B(x_tau, u_{tau-1})
    slack: np.ndarray  # per constraint row
    status: str
    iterations: int = 0
    objective: float = float("nan")
    residual: float = 0.0
    qp_status: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def first(self) -> np.ndarray:
        return self.controls[0]


def predicted_barriers(model, pairs: PairSet, X: np.ndarray, U: np.ndarray, gamma: float, offset=DEFAULT_OFFSET):
    """``B(x_tau, u_{tau-1})`` for ``tau = 1..H`` along a joint trajectory."""
    H = U.shape[0]
    out = np.zeros((H, len(pairs)))
    if not len(pairs):
        return out
    P = barrier_points(model, X[1:H + 1], offset)
    V = point_velocities(model, X[1:H + 1], U, offset)
    return pairs.barrier(P, V, gamma)


def _qp_matrices(prob: MpcProblem, with_slack: bool):
    nu = prob.n_controls
    m = prob.G.shape[0]
    if not with_slack:
        A = np.vstack([prob.G, np.eye(nu)])
        l = np.concatenate([prob.lo, prob.lb])
        u = np.concatenate([np.full(m, np.inf), prob.ub])
        return prob.P, prob.q, A, l, u
    rho = prob.params.slack_penalty
    P = np.zeros((nu + m, nu + m))
    P[:nu, :nu] = prob.P
    P[nu:, nu:] = np.eye(m)
    q = np.concatenate([prob.q, np.full(m, rho)])
    A = np.zeros((2 * m + nu, nu + m))
    A[:m, :nu] = prob.G
    A[:m, nu:] = np.eye(m)
    A[m:m + nu, :nu] = np.eye(nu)
    A[m + nu:, nu:] = np.eye(m)
    l = np.concatenate([prob.lo, prob.lb, np.zeros(m)])
    u = np.concatenate([np.full(m, np.inf), prob.ub, np.full(m, np.inf)])
    return P, q, A, l, u


def _solve_linearized(prob: MpcProblem):
    """Hard-constrained QP first; on infeasibility or stall retry with penalised slacks."""
    settings = prob.params.qp_settings()
    nu = prob.n_controls
    m = prob.G.shape[0]
    res = qp.solve(*_qp_matrices(prob, with_slack=False), settings=settings)
    iters = res.iterations
    if res.status == qp.SOLVED:
        return np.clip(res.x, prob.lb, prob.ub), np.zeros(m), OPTIMAL, iters, res
    if m == 0:
        return np.clip(res.x, prob.lb, prob.ub), np.zeros(0), MAX_ITER, iters, res
    res2 = qp.solve(*_qp_matrices(prob, with_slack=True), settings=settings)
    iters += res2.iterations
    U = np.clip(res2.x[:nu], prob.lb, prob.ub)
    slack = np.maximum(res2.x[nu:], 0.0)
    if res2.status != qp.SOLVED:
        return U, slack, MAX_ITER, iters, res2
    status = RELAXED if slack.max() > prob.params.eps_tol else OPTIMAL
    if status == OPTIMAL:
        slack = np.zeros(m)
    return U, slack, status, iters, res2


def _finish(prob: MpcProblem, U: np.ndarray, slack, status, iters, res) -> MpcSolution:
    H, nc = prob.horizon, len(prob.controlled)
    Uc = U.reshape(H, nc, 2)
    X = prob.joint_rollout(Uc)
    Ua = prob.joint_controls(Uc)
    return MpcSolution(
        controls=Uc, states=X,
        predicted_b=predicted_barriers(prob.model, prob.pairs, X, Ua, prob.gamma, prob.offset),
        slack=np.asarray(slack, dtype=float), status=status, iterations=iters,
        objective=prob.cost(Uc), residual=max(res.prim_res, res.dual_res), qp_status=res.status,
    )


def solve_qp(problem: MpcProblem) -> MpcSolution:
    """Solve the single-integrator MPC as one QP at the problem's linearisation point."""
    if problem.model.kind != SINGLE_INTEGRATOR:
        raise ConfigurationError("solve_qp needs the single-integrator model; use solve_sqp", field="model")
    U, slack, status, iters, res = _solve_linearized(problem)
    return _finish(problem, U, slack, status, iters, res)


def _merit(prob: MpcProblem, U: np.ndarray) -> float:
    viol = np.maximum(-prob.barrier_residuals(U), 0.0)
    return prob.cost(U) + prob.params.slack_penalty * float(viol.sum())


def solve_sqp(problem: MpcProblem) -> MpcSolution:
    """Sequential QP: linearise at the rollout, solve, take a damped step, repeat.

    Each outer iteration compares the full step with the damped one on the
    exact cost plus penalised constraint violation and keeps the better.
    """
    params = problem.params
    prob = problem
    U = prob.U_ref.copy()
    total = 0
    status, slack, res = OPTIMAL, np.zeros(prob.G.shape[0]), None
    for _ in range(params.sqp_iters):
        Uq, slack, status, iters, res = _solve_linearized(prob)
        total += iters
        Uq = Uq.reshape(U.shape)
        full = Uq
        damped = U + params.sqp_step * (Uq - U)
        U_new = full if _merit(prob, full) <= _merit(prob, damped) else damped
        change = float(np.max(np.abs(U_new - U))) if U.size else 0.0
        U = U_new
        prob = prob.relinearize(U)
        if change < params.eps_tol:
            break
    if res is None:
        Uq, slack, status, total, res = _solve_linearized(prob)
        U = Uq.reshape(U.shape)
    sol = _finish(prob, U.reshape(-1), slack, status, total, res)
    sol.extra["problem"] = prob
    return sol


def solve(problem: MpcProblem) -> MpcSolution:
    if problem.model.kind == SINGLE_INTEGRATOR:
        return solve_qp(problem)
    return solve_sqp(problem)


def apply_brake(model: DynamicsModel) -> np.ndarray:
    """Zero velocity command for either model."""
    return np.zeros(model.control_dim)


# -- receding-horizon controller -------------------------------------------------

@dataclass
class StepResult:
    controls: np.ndarray  # (N, 2) first controls to apply
    plan: np.ndarray  # (H, N, 2) joint plan (non-optimised robots hold their frozen control)
    status: str
    slack: float
    iterations: int
    residual: float
    failed: np.ndarray  # (N,) robots that fell back to braking


class MpcController:
    """Receding-horizon wrapper: warm starts, pair culling and centralised/decoupled solves.

    Robots flagged inactive (parked at their goal) are not optimised and are
    assumed to stay put. In decoupled mode every active robot solves its own
    problem with the other robots frozen at their last applied control.
    """

    def __init__(self, model: DynamicsModel, params: MpcParams, pairs: PairSet, goals, gamma: float,
                 offset: float = DEFAULT_OFFSET):
        self.model = model
        self.params = params
        self.pairs = pairs
        self.goals = np.asarray(goals, dtype=float)
        self.gamma = gamma
        self.offset = offset
        self.n = self.goals.shape[0]
        self.warm = np.zeros((params.horizon, self.n, 2))

    def _active_pairs(self, X: np.ndarray, involved: np.ndarray) -> np.ndarray:
        ps = self.pairs
        if not len(ps):
            return np.zeros(0, dtype=int)
        rr = ~ps.is_obstacle
        touch = involved[ps.i] | (rr & involved[np.where(rr, ps.j, 0)])
        keep = touch
        if self.params.activation_radius is not None:
            d = np.linalg.norm(X[ps.i, :2] - ps.other_points(X[:, :2]), axis=1) - ps.radius
            keep = keep & (d <= self.params.activation_radius)
        return np.flatnonzero(keep)

    def _solve_group(self, X, margins, frozen, ctrl):
        involved = np.zeros(self.n, dtype=bool)
        involved[ctrl] = True
        idx = self._active_pairs(X, involved)
        sub = self.pairs.subset(idx)
        prob = build_problem(
            self.model, self.params, X, self.goals[ctrl], sub, margins[idx], self.gamma,
            controlled=ctrl, frozen_u=frozen, warm=self.warm[:, ctrl], offset=self.offset,
        )
        return solve(prob)

    def step(self, X: np.ndarray, margins: np.ndarray, last_u: np.ndarray, active: np.ndarray) -> StepResult:
        H = self.params.horizon
        frozen = np.where(active[:, None], last_u, 0.0)
        plan = np.broadcast_to(frozen, (H, self.n, 2)).copy()
        failed = np.zeros(self.n, dtype=bool)
        ctrl_all = np.flatnonzero(active)
        groups = [ctrl_all] if self.params.mode == "centralized" else [np.array([i]) for i in ctrl_all]
        statuses, slack, iters, resid = [], 0.0, 0, 0.0
        for ctrl in groups:
            if ctrl.size == 0:
                continue
            try:
                sol = self._solve_group(X, margins, frozen, ctrl)
            except DegenerateGradientError:
                failed[ctrl] = True
                statuses.append(MAX_ITER)
                continue
            statuses.append(sol.status)
            iters += sol.iterations
            resid = max(resid, sol.residual)
            if sol.slack.size:
                slack = max(slack, float(sol.slack.max()))
            if sol.status == MAX_ITER:
                failed[ctrl] = True
                continue
            plan[:, ctrl] = sol.controls
        plan[:, failed] = 0.0
        plan[:, ~active] = 0.0
        # shift the plan one step for the next warm start
        self.warm[:-1] = plan[1:]
        self.warm[-1] = plan[-1]
        if MAX_ITER in statuses:
            status = MAX_ITER
        elif RELAXED in statuses:
            status = RELAXED
        else:
            status = OPTIMAL
        return StepResult(controls=plan[0].copy(), plan=plan, status=status, slack=slack,
                          iterations=iters, residual=resid, failed=failed)

