import numpy as np
import pytest

from sacnf.autodiff import ConfigurationError, NumericError
from sacnf.envs import (
    DeceptiveRoomEnv,
    FourGoalEnv,
    SparseRadiusEnv,
    make_env,
    reward_field,
)


def test_reset_positions_and_step_count():
    assert np.array_equal(make_env("deceptive").reset().position, [4.5, 0.0])
    assert np.array_equal(make_env("four_goal").reset().position, [0.0, 0.0])
    assert np.array_equal(make_env("sparse").reset().position, [0.0, 0.0])
    assert make_env("deceptive").reset().steps == 0


def test_unknown_env_rejected():
    with pytest.raises(ConfigurationError):
        make_env("mujoco")


def test_four_goal_reward_at_origin():
    env = FourGoalEnv()
    state = env.reset()
    state, r, done = env.step(state, np.zeros(2))
    assert r == -5.0
    assert not done


def test_boundary_clipping():
    env = FourGoalEnv()
    state = env.reset()
    state.position = np.array([6.0, 0.0])
    state, _, _ = env.step(state, np.array([1.0, 0.0]))
    assert state.position[0] == 6.0


def test_action_clipped_before_integration():
    env = FourGoalEnv()
    state = env.reset()
    state, _, _ = env.step(state, np.array([10.0, -10.0]))
    assert np.array_equal(state.position, [1.0, -1.0])


def test_nonfinite_action_rejected():
    env = FourGoalEnv()
    with pytest.raises(NumericError):
        env.step(env.reset(), np.array([np.nan, 0.0]))


def test_sparse_threshold_reward():
    env = SparseRadiusEnv()
    state = env.reset()
    state, r, done = env.step(state, np.array([0.3, 0.0]))
    assert r == 0.0 and not done
    state, r, done = env.step(state, np.array([0.5, 0.0]))
    assert r == 1.0 and not done  # ||(0.8, 0)|| > 0.6, non-terminal


def test_deceptive_reward_map():
    env = DeceptiveRoomEnv()
    assert env.reward_at(np.array([4.5, 0.0])) == 0.5  # yellow strip
    assert env.reward_at(np.array([0.0, 0.0])) == -50.0  # pit center
    assert env.terminal_at(np.array([0.0, 0.0]))
    assert env.reward_at(np.array([-4.5, 0.0])) == 100.0  # goal disk
    assert env.terminal_at(np.array([-4.5, 0.0]))
    assert env.reward_at(np.array([0.0, 5.0])) == 0.0
    assert not env.terminal_at(np.array([0.0, 5.0]))


def test_horizon_termination():
    env = FourGoalEnv()
    state = env.reset()
    done = False
    steps = 0
    while not done:
        state, _, done = env.step(state, np.array([0.1, 0.0]))
        steps += 1
    assert steps == env.spec.horizon


def test_step_is_pure():
    env = DeceptiveRoomEnv()
    s0 = env.reset()
    out1 = env.step(s0, np.array([0.5, 0.5]))
    out2 = env.step(s0, np.array([0.5, 0.5]))
    assert np.array_equal(out1[0].position, out2[0].position)
    assert out1[1] == out2[1] and out1[2] == out2[2]
    assert s0.steps == 0  # input state untouched


def test_reward_bounds():
    grid = np.random.default_rng(0).uniform(-6, 6, size=(500, 2))
    dec = DeceptiveRoomEnv()
    four = FourGoalEnv()
    sparse = SparseRadiusEnv()
    room_diameter = 12.0 * np.sqrt(2.0)
    for p in grid:
        assert -50.0 <= dec.reward_at(p) <= 100.0
        assert -room_diameter <= four.reward_at(p) <= 0.0
        assert sparse.reward_at(p) in (0.0, 1.0)


def test_four_goal_symmetry_and_maxima():
    env = FourGoalEnv()
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    rng = np.random.default_rng(1)
    for p in rng.uniform(-6, 6, size=(200, 2)):
        assert env.reward_at(p) == pytest.approx(env.reward_at(rot @ p), abs=1e-12)
    # exactly the four goals achieve the maximum reward 0
    field = reward_field(env, 121)
    maxima = field[field[:, 2] >= -1e-9]
    assert len(maxima) == 4
    got = {tuple(row[:2]) for row in maxima}
    assert got == {(5.0, 0.0), (0.0, 5.0), (-5.0, 0.0), (0.0, -5.0)}


def scripted_rollout(env, actions):
    state = env.reset()
    total = 0.0
    for a in actions:
        state, r, done = env.step(state, np.asarray(a, dtype=float))
        total += r
        if done:
            break
    return total, state, done


def test_deceptive_structure_with_scripted_policies():
    env = DeceptiveRoomEnv()
    # straight line through the pit from (4.5, 0)
    total, state, done = scripted_rollout(env, [(-1.0, 0.0)] * 20)
    assert done and env.in_pit(state.position)
    assert total <= -49.0  # accumulated the pit penalty

    # boundary-following path: up, across the top, down into the goal disk
    path = [(0.0, 1.0)] * 5 + [(-1.0, 0.0)] * 9 + [(0.0, -1.0)] * 5
    total, state, done = scripted_rollout(env, path)
    assert done and env.in_goal(state.position)
    assert total > 0.0


def test_reward_field_shape_and_columns():
    env = DeceptiveRoomEnv()
    rows = reward_field(env, 121)
    assert rows.shape == (121 * 121, 3)
    assert rows[0, 0] == -6.0 and rows[0, 1] == -6.0
    assert rows[-1, 0] == 6.0 and rows[-1, 1] == 6.0
    # spot-check a strip sample
    mask = (rows[:, 0] == 4.5) & (rows[:, 1] == 0.0)
    assert rows[mask][0, 2] == 0.5
