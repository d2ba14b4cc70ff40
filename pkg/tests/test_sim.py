import dataclasses

import numpy as np
import pytest

from acpsbc import config, qp, sim
from acpsbc.cbf import ObstacleSpec
from acpsbc.dynamics import NoiseSource, NoiseSpec, RngStreams, integrate
from acpsbc.errors import SolverAbort


def small(name="param_analysis", **kw):
    sc = config.bundled(name)
    return sc.with_(**kw)


def two_robots(**kw):
    sc = config.bundled("swap30")
    idx = [0, 15]
    base = dict(starts=sc.starts[idx], goals=sc.goals[idx], radii=(0.075, 0.075),
                noise=sc.noise[:2], obstacles=(ObstacleSpec((0.0, 0.6), 0.2),), tn=120)
    base.update(kw)
    return sc.with_(**base)


@pytest.fixture(scope="module")
def colliding_log():
    return sim.run(small("distribution_compare", method="cbf_baseline"))


def test_noise_free_robot_without_obstacles_reaches_goal():
    log = sim.run(small(obstacles=(), noise=(NoiseSpec.zero(),), tn=150))
    m = sim.metrics(log)
    assert m.goal_step is not None
    assert m.min_h == np.inf and not m.collided


def test_acp_run_is_safe_on_the_obstacle_scenario():
    m = sim.metrics(sim.run(small("distribution_compare")))
    assert m.min_h >= 0 and not m.collided


def test_collision_flag_matches_logged_h(colliding_log):
    m = sim.metrics(colliding_log)
    assert m.collided == bool((colliding_log.h < 0).any())
    assert m.collided


def test_clearance_sign_matches_h_sign(colliding_log):
    assert np.array_equal(np.sign(colliding_log.clearance), np.sign(colliding_log.h))
    (_, ro) = sim.min_distance_series(colliding_log)
    assert np.array_equal(np.sign(ro), np.sign(colliding_log.h.min(axis=1)))


def test_min_distance_series_values(colliding_log):
    log = dataclasses.replace(colliding_log, pair_kinds=["robot_robot"], clearance=np.array([[1.0 - 0.15], [0.0]]))
    rr, ro = sim.min_distance_series(log)
    assert rr[0] == pytest.approx(0.85) and rr[1] == 0.0 and ro is None


def test_logged_controls_reproduce_logged_states():
    sc = two_robots()
    log = sim.run(sc)
    noise = NoiseSource(list(sc.noise), RngStreams(sc.seed))
    X = sc.starts.copy()
    for k in range(len(log)):
        assert np.array_equal(X, log.states[k])
        X = integrate(sc.model, X, log.controls[k] + noise.sample())
    assert np.array_equal(X, log.states[-1])


def test_one_event_per_group_and_lag_after_warm_up():
    for gran in ("kind", "pair", "all"):
        sc = two_robots(acp=dataclasses.replace(config.AcpSettings(shared_set=True), granularity=gran), tn=30)
        log = sim.run(sc)
        H = log.horizon
        for k in range(H, len(log)):
            keys = [(e.group, e.tau) for e in log.events if e.k == k]
            assert sorted(keys) == sorted((g, t) for g in log.groups for t in range(1, H + 1))


def test_coverage_rate_edge_cases(colliding_log):
    log = sim.run(small(noise=(NoiseSpec.zero(),), tn=60))
    for tau in range(1, log.horizon + 1):
        assert sim.coverage_rate(log, tau) == 1.0
    breached = [dataclasses.replace(e, breached=True) for e in colliding_log.events]
    assert sim.coverage_rate(dataclasses.replace(colliding_log, events=breached), 1) == 0.0
    assert sim.coverage_rate(colliding_log, 99) is None


def test_zero_noise_scores_vanish():
    log = sim.run(small(noise=(NoiseSpec.zero(),), tn=60))
    assert max(e.score for e in log.events) <= 1e-9


def test_alternative_modes_run():
    for kw in (dict(tightening="state_lipschitz"),
               dict(acp=config.AcpSettings(predictions="planned")),
               dict(acp=config.AcpSettings(shared_set=False))):
        m = sim.metrics(sim.run(small(tn=40, **kw)))
        assert not m.collided


def test_state_lipschitz_margins_are_larger():
    a = sim.run(small(tn=40))
    b = sim.run(small(tn=40, tightening="state_lipschitz"))
    assert b.min_ro.min() >= a.min_ro.min()


def test_batch_run_is_order_independent():
    sc = small(tn=60)
    fwd = sim.batch_run(sc, [1, 2, 3], workers=1)
    rev = sim.batch_run(sc, [3, 2, 1], workers=1)
    assert fwd == rev[::-1]
    assert sim.batch_run(sc, [2], workers=1)[0] == fwd[1]
    with pytest.raises(ValueError):
        sim.batch_run(sc, [1, 1])


def test_batch_run_in_worker_processes_matches_serial():
    sc = small(tn=40)
    assert sim.batch_run(sc, [1, 2], workers=2) == sim.batch_run(sc, [1, 2], workers=1)


def test_csv_round_trip_is_idempotent(tmp_path):
    log = sim.run(two_robots(tn=25))
    text = sim.rows_to_csv(sim.log_rows(log))
    rows = sim.read_csv_rows(text)
    assert sim.rows_to_csv(rows) == text
    assert {r["type"] for r in rows} == {"step", "pair", "lag"}
    path = sim.write_log(log, tmp_path)
    assert path.read_text() == text
    assert (tmp_path / "run.json").exists() and (tmp_path / "states.csv").exists()


def test_csv_rejects_foreign_headers():
    with pytest.raises(ValueError):
        sim.read_csv_rows("a,b\n1,2\n")


def test_log_metadata(colliding_log):
    sc = small("distribution_compare", method="cbf_baseline")
    assert colliding_log.config_hash == config.config_hash(sc)
    assert len(colliding_log) == sc.tn
    assert colliding_log.states.shape[0] == sc.tn + 1


def test_baseline_uses_zero_margins(monkeypatch):
    seen = []
    real = sim.MpcController.step

    def spy(self, X, margins, last_u, active):
        seen.append(margins.copy())
        return real(self, X, margins, last_u, active)

    monkeypatch.setattr(sim.MpcController, "step", spy)
    sim.run(small(tn=10, method="cbf_baseline"))
    assert all(not m.any() for m in seen)


def test_repeated_solver_failure_aborts(monkeypatch):
    real = qp.solve

    def stalled(*args, **kw):
        res = real(*args, **kw)
        res.status = qp.MAX_ITER
        return res

    monkeypatch.setattr(qp, "solve", stalled)
    with pytest.raises(SolverAbort):
        sim.run(small(tn=50, max_failures=3))
