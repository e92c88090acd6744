import numpy as np
import pytest

from gatemppi import sim
from gatemppi.gate_sdf import GateGeometry, GatePose
from gatemppi.geometry import RngStream

G = GateGeometry()
FAST = dict(num_rollouts=256, temperature=0.5, noise_basis="mixer", noise_std=(3, 1, 1, 1), noise_knot_interval=5,
            shift_fill="hold", q_sdf=2.0, q_speed=10.0, q_rate=0.01)


def one_gate_track(true_offset=(0, 0, 0), laps=1):
    nominal = GatePose.at((0, 0, 1.5), yaw=np.pi)  # flown along +x
    true = GatePose.at(np.add((0, 0, 1.5), true_offset), yaw=np.pi)
    return sim.Track((nominal,), (true,), G, laps)


def test_gate_pass_cases():
    gate = GatePose()
    assert sim.detect_gate_pass([1, 0, 0], [-1, 0, 0], gate, G)
    assert not sim.detect_gate_pass([1, 0.6, 0], [-1, 0.6, 0], gate, G)
    assert not sim.detect_gate_pass([1, 0, 0], [1, 0.3, 0], gate, G)
    assert not sim.detect_gate_pass([-1, 0, 0], [1, 0, 0], gate, G)  # wrong direction


def test_collision_cases():
    gate = GatePose()
    assert not sim.detect_collision([1, 0, 0], [-1, 0, 0], gate, G)
    assert sim.detect_collision([1, 0.6, 0], [0, 0.6, 0], gate, G)
    # the frame's top face is at z = 0.75; grazing exactly at the inflation radius counts
    assert sim.detect_collision([-1, 0, 0.85], [1, 0, 0.85], gate, G, inflation=0.1)
    assert not sim.detect_collision([-1, 0, 0.86], [1, 0, 0.86], gate, G, inflation=0.1)
    assert not sim.detect_collision([5, 5, 5], [6, 5, 5], gate, G)


def test_waypoint_sequencer_cases():
    tr = sim.circle_track(laps=2)
    g0, g3 = tr.nominal[0], tr.nominal[3]
    before, after = g0.transform.apply([0.2, 0, 0]), g0.transform.apply([-0.2, 0, 0])
    assert sim.waypoint_sequencer(before, after, tr, 0) == (1, "pass")
    far = g0.transform.apply([3, 0, 0])
    assert sim.waypoint_sequencer(far, far, tr, 0) == (0, None)
    near = g0.transform.apply([0.3, 0.1, 0])
    assert sim.waypoint_sequencer(far, near, tr, 0) == (1, "radius")
    b3, a3 = g3.transform.apply([0.2, 0, 0]), g3.transform.apply([-0.2, 0, 0])
    assert sim.waypoint_sequencer(b3, a3, tr, 7) == (sim.DONE, "pass")
    assert sim.waypoint_sequencer(b3, a3, tr, sim.DONE) == (sim.DONE, None)


def test_circle_track_geometry():
    tr = sim.circle_track()
    assert tr.n_gates == 4
    assert np.allclose(np.linalg.norm(tr.waypoints[:, :2], axis=1), 5.0)
    for i in range(4):
        # flight direction is the counter-clockwise tangent
        p = tr.waypoints[i]
        assert np.isclose(np.dot(tr.travel_direction(i), p), 0, atol=1e-12)
        assert np.cross(p, tr.travel_direction(i))[2] > 0
    assert np.isclose(tr.lap_length(), 4 * 5 * np.sqrt(2))


def test_track_validation():
    with pytest.raises(ValueError):
        sim.Track((), (), G)
    with pytest.raises(ValueError):
        sim.circle_track(laps=0)


def test_perturb_track_bounds():
    tr = sim.circle_track()
    pt = sim.perturb_track(tr, "position", 0.3, RngStream(0))
    d = np.array([a.position - b.position for a, b in zip(pt.true, tr.nominal)])
    assert np.all(np.abs(d) <= 0.3) and np.any(d != 0)
    yt = sim.perturb_track(tr, "yaw", np.pi / 6, RngStream(1))
    for a, b in zip(yt.true, tr.nominal):
        ang = np.arccos(np.clip(np.dot(a.normal, b.normal), -1, 1))
        assert ang <= np.pi / 6 + 1e-12 and np.allclose(a.position, b.position)
    assert sim.perturb_track(tr, "none", 1.0, RngStream(0)).true == tr.nominal
    shifted = one_gate_track(true_offset=(0, 1, 0))
    assert sim.perturb_track(shifted, "none", 0.0, RngStream(0)) is shifted
    with pytest.raises(ValueError):
        sim.perturb_track(tr, "roll", 1.0, RngStream(0))


def test_scenario_validation():
    for bad in (dict(perturbation="x"), dict(provider="x"), dict(magnitude=-1), dict(trials=0), dict(speed_cap=0),
                dict(mppi={"bogus": 1})):
        with pytest.raises(ValueError):
            sim.ScenarioConfig(**bad)


def test_single_gate_episode_succeeds_and_logs(tmp_path):
    sc = sim.ScenarioConfig(mppi=FAST, seed=3)
    r = sim.run_episode(one_gate_track(), sc, trial=0)
    assert r.success and r.failure is None and len(r.pass_times) == 1
    assert r.log.shape[1] == len(sim.LOG_COLUMNS)
    r.write_log(tmp_path / "log.csv")
    back = np.loadtxt(tmp_path / "log.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back, r.log)
    again = sim.run_episode(one_gate_track(), sc, trial=0)
    assert np.array_equal(again.log, r.log)


def test_unseen_displaced_gate_fails_as_miss_or_collision():
    # the sensor is blind for the whole approach, so only the nominal waypoint guides the flight
    sc = sim.ScenarioConfig(mppi=FAST, seed=4, provider="cached", blackout_duration=10.0, blackout_distance=10.0)
    r = sim.run_episode(one_gate_track(true_offset=(0, 1.0, 0)), sc, trial=0)
    assert not r.success and r.failure in ("missed-gate", "collision")


def test_cached_provider_episode():
    sc = sim.ScenarioConfig(mppi=FAST, seed=5, provider="cached", blackout_duration=0.3)
    assert sim.run_episode(one_gate_track(), sc, trial=0).success


def test_neural_provider_needs_model():
    with pytest.raises(ValueError):
        sim.run_episode(one_gate_track(), sim.ScenarioConfig(mppi=FAST, provider="neural"), 0)


def test_success_table_bookkeeping(tmp_path):
    t = sim.SuccessTable()
    for ok in (True, False, True):
        t.add((4.0, "none", 0.0), ok)
    t.add((4.0, "yaw", 0.5), True)
    assert t.rate((4.0, "none", 0.0)) == pytest.approx(2 / 3)
    t.to_csv(tmp_path / "t.csv")
    back = sim.SuccessTable.from_csv(tmp_path / "t.csv")
    assert back.cells == t.cells
    pooled = t.merge(back)
    assert pooled.cells[(4.0, "none", 0.0)] == [4, 6]
    assert "fingerprint" in t.to_json("abc") and "| 4 | none | 0 | 2/3 | 0.67 |" in t.markdown()


def test_run_batch_counts_and_determinism(tmp_path):
    track = one_gate_track()
    grid = [sim.ScenarioConfig(mppi=FAST, seed=6, speed_cap=v, trials=1) for v in (3.0, 4.0)]
    t1, by = sim.run_batch(track, grid, out_dir=tmp_path / "a", fingerprint="f")
    assert sorted(t1.cells) == [(3.0, "none", 0.0), (4.0, "none", 0.0)]
    assert all(t1.rate(c) in (0.0, 1.0) for c in t1.cells)
    assert len(list((tmp_path / "a" / "episodes").rglob("trial_*.csv"))) == 2
    t2, _ = sim.run_batch(track, grid, jobs=2)
    assert t2.cells == t1.cells


def test_lap_times():
    r = sim.EpisodeResult(True, None, [1.0, 2.0, 3.0, 4.0], 4.0, 0.1, 4.0)
    assert r.lap_times(2) == [2.0, 2.0]
