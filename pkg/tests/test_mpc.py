import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acpsbc import mpc, qp
from acpsbc.cbf import ObstacleSpec, PairSet, barrier_points, barrier_terms, make_pairs
from acpsbc.dynamics import RobotState
from acpsbc.errors import ConfigurationError
from oracles import (INT, UNI, enumerate_qp, pairset, qp_objective, random_integrator_problem,
                     shooting_oracle, uni_params)


def test_params_validation_names_the_field():
    with pytest.raises(ConfigurationError, match="horizon"):
        mpc.MpcParams(horizon=0)
    with pytest.raises(ConfigurationError, match="slack_penalty"):
        mpc.MpcParams(slack_penalty=0.0)
    with pytest.raises(ConfigurationError, match="q_diag"):
        mpc.MpcParams(q_diag=(-1.0, 1.0))


def test_constraint_counts():
    p1 = mpc.MpcParams(horizon=1)
    prob = mpc.build_problem(INT, p1, np.zeros((1, 2)), [[1, 0]], pairset([0.1]), np.zeros((0, 1)), 1.0)
    assert prob.G.shape[0] == 0
    obs = [ObstacleSpec((1.0, 0.0), 0.2)]
    prob = mpc.build_problem(INT, p1, np.zeros((1, 2)), [[2, 0]], pairset([0.1], obs), np.zeros((1, 1)), 1.0)
    assert len(prob.constraints) == 1
    ps = pairset([0.1, 0.1, 0.1], [ObstacleSpec((0.0, 2.0), 0.2)])
    x0 = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, -1.0]])
    prob = mpc.build_problem(INT, mpc.MpcParams(horizon=8), x0, np.zeros((3, 2)), ps, np.zeros((6, 8)), 1.0)
    assert len(prob.constraints) == 48
    assert sorted(set(prob.row_step)) == list(range(1, 9))


def test_unconstrained_single_step_optimum():
    params = mpc.MpcParams(horizon=1, r_diag=(0.0, 0.0), p_diag=(1.0, 1.0))
    prob = mpc.build_problem(INT, params, np.zeros((1, 2)), [[0.05, 0.0]], pairset([0.1]), np.zeros((0, 1)), 1.0)
    sol = mpc.solve_qp(prob)
    assert sol.status == mpc.OPTIMAL
    assert np.allclose(sol.first, [[1.0, 0.0]], atol=1e-9)


def test_solve_qp_rejects_unicycle():
    prob = mpc.build_problem(UNI, uni_params(2), np.zeros((1, 3)), [[1, 0]], pairset([0.1]), np.zeros((0, 2)), 1.0)
    with pytest.raises(ConfigurationError):
        mpc.solve_qp(prob)


def test_random_mpc_qps_match_enumeration_oracle():
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 100:
        prob = random_integrator_problem(rng)
        nu = prob.n_controls
        A = np.vstack([prob.G, np.eye(nu)])
        l = np.concatenate([prob.lo, prob.lb])
        u = np.concatenate([np.full(prob.G.shape[0], np.inf), prob.ub])
        x_ref, f_ref = enumerate_qp(prob.P, prob.q, A, l, u)
        if x_ref is None:
            continue
        sol = mpc.solve_qp(prob)
        assert sol.status == mpc.OPTIMAL
        assert abs(qp_objective(prob, sol.controls) - f_ref) <= 1e-6
        checked += 1


def test_optimal_solutions_are_feasible_and_consistent():
    rng = np.random.default_rng(8)
    for _ in range(30):
        prob = random_integrator_problem(rng)
        sol = mpc.solve_qp(prob)
        if sol.status != mpc.OPTIMAL:
            continue
        u = sol.controls.reshape(-1)
        assert np.all(u >= prob.lb) and np.all(u <= prob.ub)
        for c in prob.constraints:
            assert c.residual(u) >= -prob.params.eps_tol
        assert np.all(sol.slack == 0)
        # the first horizon step is affine in the controls, so its exact barrier values also hold
        first = prob.row_step == 1
        assert np.all(prob.barrier_residuals(sol.controls)[first] >= -prob.params.eps_tol)


def test_predicted_barriers_are_self_consistent():
    obstacles = [ObstacleSpec((0.6, 0.3), 0.2)]
    pairs = make_pairs([0.1, 0.1], obstacles)
    ps = PairSet(pairs, obstacles)
    for model, params, x0 in ((INT, mpc.MpcParams(horizon=4), np.array([[0.0, 0.0], [1.2, 0.0]])),
                              (UNI, uni_params(4), np.array([[0.0, 0.0, 0.3], [1.2, 0.0, 3.0]]))):
        prob = mpc.build_problem(model, params, x0, [[1.2, 0.1], [0.0, -0.1]], ps, np.zeros((len(ps), 4)), 1.5)
        sol = mpc.solve(prob)
        for tau in range(1, 5):
            states = [RobotState.from_array(x) for x in sol.states[tau]]
            u = sol.controls[tau - 1].reshape(-1)
            for n, pair in enumerate(pairs):
                t = barrier_terms(pair, states, model, 1.5, obstacles)
                assert abs(sol.predicted_b[tau - 1, n] - t.value(u)) <= 1e-9


@given(st.integers(0, 2**31), st.floats(0.0, 0.5))
def test_objective_non_decreasing_in_margins(seed, extra):
    rng = np.random.default_rng(seed)
    prob = random_integrator_problem(rng)
    tighter = mpc.build_problem(INT, prob.params, prob.x0, prob.goals, prob.pairs, prob.margins + extra,
                                prob.gamma, warm=prob.U_ref)
    a, b = mpc.solve_qp(prob), mpc.solve_qp(tighter)
    if a.status == mpc.OPTIMAL and b.status == mpc.OPTIMAL:
        assert qp_objective(tighter, b.controls) >= qp_objective(prob, a.controls) - 1e-9


def test_infeasible_constraints_are_relaxed_with_slack():
    obs = [ObstacleSpec((0.3, 0.0), 0.1)]
    prob = mpc.build_problem(INT, mpc.MpcParams(horizon=2), np.zeros((1, 2)), [[1, 0]], pairset([0.1], obs),
                             np.full((1, 2), 50.0), 1.0)
    sol = mpc.solve_qp(prob)
    assert sol.status == mpc.RELAXED
    assert sol.slack.max() > 0
    assert np.all(np.abs(sol.controls) <= 1.0)


def test_sqp_drives_straight_at_a_goal_ahead():
    prob = mpc.build_problem(UNI, uni_params(5), np.zeros((1, 3)), [[2.0, 0.0]], pairset([0.1]), np.zeros((0, 5)), 1.0)
    sol = mpc.solve_sqp(prob)
    assert sol.status == mpc.OPTIMAL
    assert abs(sol.first[0, 0] - 0.08) <= 1e-6
    assert abs(sol.first[0, 1]) <= 1e-6


def test_sqp_goal_behind_is_bounded_and_deterministic():
    def solve():
        prob = mpc.build_problem(UNI, uni_params(5), np.zeros((1, 3)), [[-1.0, 0.0]], pairset([0.1]),
                                 np.zeros((0, 5)), 1.0)
        return mpc.solve_sqp(prob).controls

    a, b = solve(), solve()
    assert np.array_equal(a, b)
    assert np.all(np.abs(a[..., 0]) <= 0.08) and np.all(np.abs(a[..., 1]) <= 1.0)


def test_sqp_beats_random_shooting():
    rng = np.random.default_rng(10)
    H = 3
    done = 0
    while done < 20:
        obstacles = [ObstacleSpec(tuple(rng.uniform(-0.1, 0.1, 2) + [0.08, 0.0]), 0.02)]
        ps = pairset([0.01], obstacles)
        x0 = np.array([[0.0, 0.0, rng.uniform(-np.pi, np.pi)]])
        if ps.h(barrier_points(UNI, x0))[0] <= 0.001:
            continue
        done += 1
        goal = rng.uniform(-0.3, 0.3, (1, 2))
        params = uni_params(H)
        prob = mpc.build_problem(UNI, params, x0, goal, ps, np.zeros((len(ps), H)), 5.0)
        sol = mpc.solve_sqp(prob)
        lo, hi = np.array(params.u_min), np.array(params.u_max)
        own, _ = shooting_oracle(prob, sol.controls.reshape(1, H, 2))
        assert own[0] == pytest.approx(sol.objective, rel=1e-12, abs=1e-15)
        cost, feasible = shooting_oracle(prob, rng.uniform(lo, hi, (10_000, H, 2)))
        assert feasible.any()
        assert sol.objective <= cost[feasible].min() + 1e-9


def test_apply_brake():
    assert np.array_equal(mpc.apply_brake(INT), [0.0, 0.0])
    assert np.array_equal(mpc.apply_brake(UNI), [0.0, 0.0])
    obs = [ObstacleSpec((0.3, 0.0), 0.2)]
    ps = pairset([0.1], obs)
    x = np.array([[0.0, 0.0]])
    nxt = mpc.rollout(INT, x, mpc.apply_brake(INT).reshape(1, 1, 2))[1]
    assert ps.h(nxt)[0] >= ps.h(x)[0]


def test_decoupled_mode_solves_each_robot_with_others_frozen():
    ps = pairset([0.1, 0.1])
    x0 = np.array([[0.0, 0.0], [1.0, 0.0]])
    goals = np.array([[0.5, 0.5], [1.5, -0.5]])
    for mode in ("centralized", "decoupled"):
        ctrl = mpc.MpcController(INT, mpc.MpcParams(horizon=3, mode=mode), ps, goals, 1.0)
        res = ctrl.step(x0, np.zeros((1, 3)), np.zeros((2, 2)), np.array([True, True]))
        assert res.status == mpc.OPTIMAL
        assert np.all(res.controls[0] > 0) and res.controls[1, 0] > 0 > res.controls[1, 1]


def test_inactive_robots_hold_still():
    ps = pairset([0.1, 0.1])
    ctrl = mpc.MpcController(INT, mpc.MpcParams(horizon=3), ps, np.array([[1.0, 1.0], [2.0, 2.0]]), 1.0)
    res = ctrl.step(np.array([[0.0, 0.0], [2.0, 2.0]]), np.zeros((1, 3)), np.ones((2, 2)), np.array([True, False]))
    assert np.array_equal(res.controls[1], [0.0, 0.0])


def test_solver_failure_falls_back_to_braking(monkeypatch):
    real = qp.solve

    def stalled(*args, **kw):
        res = real(*args, **kw)
        res.status = qp.MAX_ITER
        return res

    monkeypatch.setattr(qp, "solve", stalled)
    obs = [ObstacleSpec((0.3, 0.0), 0.1)]
    ps = pairset([0.1], obs)
    ctrl = mpc.MpcController(INT, mpc.MpcParams(horizon=2), ps, [[1.0, 0.0]], 1.0)
    res = ctrl.step(np.zeros((1, 2)), np.full((1, 2), 0.1), np.ones((1, 2)), np.array([True]))
    assert res.status == mpc.MAX_ITER
    assert res.failed.all()
    assert np.array_equal(res.controls, np.zeros((1, 2)))
