import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperfc.airframe import AirframeParams
from hyperfc.dynamics import D_AL, D_AR, D_R
from hyperfc.env import (CAUSE_HORIZON, CAUSE_OFF_PATH, N_LAMBDA, N_OBS_STATE, EnvConfig,
                         FlightEnv, ProtocolError, action_to_command, build_observation,
                         reference_record)
from hyperfc.reference import build_segment, concatenate_segments, trim_table
from hyperfc.scenarios import STUCK_FULL, STUCK_ONSET, ScenarioSpec

AF = AirframeParams()


def _meas_on_reference(rec):
    return np.concatenate([rec["omega"], [rec["V"]], rec["attitude"], rec["pos"], rec["f"],
                           [rec["chi"]]])


def _path(keys=((0.0, 0.0),), duration=10.0):
    tab, pose, segs = trim_table(AF), (0.0, 0.0, -100.0, 0.0), []
    for key in keys:
        segs.append(build_segment(tab[key], duration, pose, segment_id=len(segs)))
        pose = segs[-1].end_pose
    return concatenate_segments(segs)


def test_observation_on_reference():
    path = _path(((0.02, 0.11),))
    rec = reference_record(path, 30)
    obs, lam = build_observation(_meas_on_reference(rec), rec, rec["delta_cmd"], np.zeros(6), AF)
    assert obs.shape == (1, N_OBS_STATE) and lam.shape == (1, N_LAMBDA)
    assert np.all(obs[0, :13] == 0.0)
    assert np.all(obs[0, 21:25] == 1.0)       # margin 1 maps to +1
    assert np.array_equal(obs[0, 32:34], [0.0, 1.0])
    assert np.all(obs[0, 27:30] == 0.0)
    assert np.allclose(obs[0, 25:27], [1.0, 0.11 / 0.21])
    assert np.concatenate([obs, lam], axis=1).shape[1] == 40


def test_course_encoding():
    rec = reference_record(_path(), 0)
    meas = _meas_on_reference(rec)
    meas[13] = np.pi / 2
    obs, _ = build_observation(meas, rec, rec["delta_cmd"], np.zeros(6), AF)
    assert np.allclose(obs[0, 30:32], [1.0, 0.0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=14, max_size=14),
       st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.integers(0, 249))
def test_observation_always_clipped(meas, prev, k):
    rec = reference_record(_path(((0.02, 0.0),)), k)
    obs, _ = build_observation(np.array(meas), rec, np.array(prev), np.zeros(6), AF)
    assert np.all(np.abs(obs) <= 1.0)


def test_action_to_command():
    ref = trim_table(AF)[(0.0, 0.0)].delta_cmd
    assert np.array_equal(action_to_command(np.zeros(4), ref, AF), ref)
    hi = action_to_command(np.ones(4), ref, AF)
    lo = action_to_command(-np.ones(4), ref, AF)
    assert np.all(hi <= AF.cmd_max) and np.all(lo >= AF.cmd_min)
    assert np.allclose(hi - ref, ref - lo)
    assert np.array_equal(action_to_command(5 * np.ones(4), ref, AF), hi)


@pytest.mark.parametrize("keys", [((0.0, 0.0),), ((0.02, 0.0),), ((0.0, 0.0), (-0.012, 0.0))])
def test_zero_action_tracks_trim(keys):
    env = FlightEnv(EnvConfig.quiet(), AF, auto_reset=False)
    env.reset_member(0, 0, ScenarioSpec(), _path(keys))
    worst = 0.0
    for _ in range(125):
        _, _, _, done, info = env.step(np.zeros((1, 4)))
        worst = max(worst, info["pos_error"][0])
        assert not done[0]
    assert worst < 0.5


def test_off_path_termination():
    env = FlightEnv(EnvConfig.quiet(), AF, auto_reset=False)
    env.reset_member(0, 0, ScenarioSpec(), _path())
    env.x[0, 1] += 30.0
    _, _, _, done, info = env.step(np.zeros((1, 4)))
    assert done[0] and info["cause"][0] == CAUSE_OFF_PATH and not info["truncated"][0]
    with pytest.raises(ProtocolError):
        env.step(np.zeros((1, 4)))


def test_horizon_truncation():
    env = FlightEnv(EnvConfig.quiet(horizon=5), AF, auto_reset=False)
    env.reset_member(0, 0, ScenarioSpec(), _path())
    for _ in range(5):
        _, _, _, done, info = env.step(np.zeros((1, 4)))
    assert done[0] and info["cause"][0] == CAUSE_HORIZON and info["truncated"][0]


def test_reward_is_sum_of_terms():
    env = FlightEnv(EnvConfig(), AF, num_envs=4, seed=3)
    env.reset()
    rng = np.random.default_rng(0)
    for _ in range(50):
        _, _, total, _, info = env.step(rng.uniform(-0.3, 0.3, (4, 4)))
        assert np.array_equal(total, info["tracking"] + info["barrier"] + info["rate"])


def _rollout(seed, steps=120):
    env = FlightEnv(EnvConfig(), AF, num_envs=3, seed=seed)
    obs, lam = env.reset()
    rng = np.random.default_rng(99)
    out = [obs, lam]
    for _ in range(steps):
        obs, lam, total, done, _ = env.step(rng.uniform(-0.5, 0.5, (3, 4)))
        out += [obs, lam, total, done]
    return out


def test_determinism():
    a, b = _rollout(7), _rollout(7)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = _rollout(8)
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


@pytest.mark.parametrize("actuator,channel", [(0, D_AR), (1, D_AL), (2, D_R)])
def test_realized_deflection_matches_lambda(actuator, channel):
    env = FlightEnv(EnvConfig(), AF, auto_reset=False)
    env.reset_member(0, 5, ScenarioSpec(STUCK_FULL, actuator, -0.5))
    for _ in range(20):
        _, lam, _, _, _ = env.step(np.full((1, 4), 0.7))
        assert lam[0, 2 * actuator] == 1.0
        assert env.delta[0, channel] == lam[0, 2 * actuator + 1] * AF.sat_surface


def test_onset_flip():
    env = FlightEnv(EnvConfig(), AF, auto_reset=False)
    _, lam = env.reset_member(0, 1, ScenarioSpec(STUCK_ONSET, 2, 0.25, onset=10))
    seen = [lam[4]]
    for _ in range(15):
        _, lam, _, _, _ = env.step(np.zeros((1, 4)))
        seen.append(lam[0, 4])
    assert seen == [0.0] * 11 + [1.0] * 5


def test_state_dict_round_trip():
    env = FlightEnv(EnvConfig(), AF, num_envs=2, seed=4)
    env.reset()
    rng = np.random.default_rng(1)
    actions = rng.uniform(-0.4, 0.4, (60, 2, 4))
    for a in actions[:30]:
        env.step(a)
    state = env.state_dict()
    other = FlightEnv(EnvConfig(), AF, num_envs=2, seed=123)
    other.reset()
    other.load_state_dict(state)
    for a in actions[30:]:
        r1, r2 = env.step(a), other.step(a)
        for x, y in zip(r1[:4], r2[:4]):
            assert np.array_equal(x, y)


def test_recorded_log():
    env = FlightEnv(EnvConfig.quiet(horizon=10), AF, auto_reset=False, record=True)
    env.reset_member(0, 0, ScenarioSpec(), _path())
    for _ in range(10):
        env.step(np.zeros((1, 4)))
    (log,) = env.finished_logs
    assert len(log) == 10 and log[-1]["cause"] == CAUSE_HORIZON
    assert {"obs", "lambda", "reward", "p_ref", "delta_cmd"} <= set(log[0])


def test_auto_reset_reports_done():
    env = FlightEnv(EnvConfig.quiet(horizon=3), AF, num_envs=2, seed=0)
    env.reset()
    for _ in range(2):
        _, _, _, done, _ = env.step(np.zeros((2, 4)))
        assert not done.any()
    _, _, _, done, info = env.step(np.zeros((2, 4)))
    assert done.all() and len(info["episodes"]) == 2
    # members were restarted, and the returned flags were not touched by it
    assert not env.done.any() and done.all()
