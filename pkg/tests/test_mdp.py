import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bffq.mdp import (
    TWO_PI,
    CartPoleEnv,
    ContinuousRingEnv,
    FixedPolicy,
    InvalidActionError,
    RingGrid,
    TabularRingEnv,
    UniformPolicy,
    WindowError,
    circular_difference,
    generate_trajectory,
    load_trajectory,
    ring_policy,
    save_trajectory,
    window,
)


class ZeroNormal:
    """Stand-in generator whose normal draws are all zero."""

    def standard_normal(self, size=None):
        return 0.0 if size is None else np.zeros(size)


def test_continuous_step_zero_noise_draw():
    env = ContinuousRingEnv(epsilon=TWO_PI / 32, sigma=0.2)
    s1, r = env.step(np.array([0.0]), 1, ZeroNormal())
    np.testing.assert_allclose(s1, [0.19634954084936207], rtol=0, atol=1e-15)
    assert r == pytest.approx(1.1950903220161282, abs=1e-12)


def test_continuous_step_deterministic_is_exactly_epsilon():
    env = ContinuousRingEnv(epsilon=0.125, sigma=0.0)
    s1, _ = env.step(np.array([0.0]), 1, np.random.default_rng(0))
    assert s1[0] == 0.125


def test_tabular_snaps_small_move_to_origin():
    env = TabularRingEnv(n=32)
    assert env.grid.snap(np.array([0.09]))[0] == 0.0
    assert env.grid.index(np.array([[0.09]]))[0] == 0


def test_grid_points_increasing_in_range():
    g = RingGrid(32)
    assert len(g.points) == 32
    assert np.all(np.diff(g.points) > 0)
    assert g.points[0] == 0.0 and g.points[-1] < TWO_PI


@given(st.floats(-50, 50, allow_nan=False), st.integers(0, 1), st.floats(-4, 4))
def test_tabular_next_state_on_grid(s, a, z):
    env = TabularRingEnv(n=32)
    s0 = env.grid.snap(np.array([s]))
    s1 = env.advance(s0, np.array(a), np.array(z))
    k = env.grid.index(s1[None])[0]
    assert s1[0] == env.grid.points[k]


@given(st.floats(-100, 100, allow_nan=False))
def test_ring_state_wrapped(s):
    env = ContinuousRingEnv()
    s1 = env.advance(np.array([s]), np.array(1), np.array(0.3))
    assert 0.0 <= s1[0] < TWO_PI


def test_invalid_action_rejected():
    with pytest.raises(InvalidActionError):
        ContinuousRingEnv().step(np.array([0.0]), 2, np.random.default_rng(0))
    with pytest.raises(InvalidActionError):
        CartPoleEnv().step(np.zeros(4), -1)


def test_increment_moments():
    env = ContinuousRingEnv(sigma=0.2)
    rng = np.random.default_rng(11)
    N = 100_000
    s = np.full((N, 1), 1.0)
    d = circular_difference(env.resample_batch(s, np.ones(N, dtype=np.int64), rng), s)[:, 0]
    eps = env.epsilon
    se_mean = math.sqrt(0.04 * eps / N)
    assert abs(d.mean() - eps) < 4 * se_mean
    var = 0.04 * eps
    se_var = var * math.sqrt(2.0 / (N - 1))
    assert abs(d.var(ddof=1) - var) < 4 * se_var


def test_resample_distinct_draws():
    env = ContinuousRingEnv()
    rng = np.random.default_rng(1)
    a = env.resample_next(np.array([1.0]), 0, rng)
    b = env.resample_next(np.array([1.0]), 0, rng)
    assert a[0] != b[0]


def test_resample_deterministic_kernel():
    env = ContinuousRingEnv(sigma=0.0)
    s = np.array([2.0])
    assert env.resample_next(s, 1, np.random.default_rng(0))[0] == \
        env.step(s, 1, np.random.default_rng(5))[0][0]


@given(st.floats(-10, 10, allow_nan=False))
def test_policies_sum_to_one(s):
    for pol in (ring_policy(), UniformPolicy(2)):
        p = pol.probs(np.array([[s]]))[0]
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p >= 0)


def test_ring_policy_action_frequency_near_quarter_turn():
    env = ContinuousRingEnv()
    traj = generate_trajectory(env, ring_policy(), 1_000_000, np.random.default_rng(3))
    near = np.abs(traj.states[:, 0] - math.pi / 2) < 0.05
    k = int(near.sum())
    freq = traj.actions[near].mean()
    p = 0.5 + math.sin(math.pi / 2) / 5
    assert k > 1000
    assert abs(freq - p) < 3 * math.sqrt(p * (1 - p) / k) + 1e-3  # bin width


def test_trajectory_chaining_and_seed_determinism():
    env = ContinuousRingEnv()
    a = generate_trajectory(env, ring_policy(), 5000, np.random.default_rng(9))
    b = generate_trajectory(env, ring_policy(), 5000, np.random.default_rng(9))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.next_states[:-1], a.states[1:])


def test_deterministic_three_step_rollout():
    env = ContinuousRingEnv(epsilon=0.25, sigma=0.0)
    right = FixedPolicy(2, lambda S: np.tile([0.0, 1.0], (len(S), 1)))
    traj = generate_trajectory(env, right, 3, np.random.default_rng(0), s0=np.array([1.0]))
    np.testing.assert_array_equal(traj.states[:, 0], [1.0, 1.25, 1.5])
    np.testing.assert_array_equal(traj.next_states[:, 0], [1.25, 1.5, 1.75])
    np.testing.assert_array_equal(traj.actions, [1, 1, 1])


def test_cartpole_push_right_falls_early():
    env = CartPoleEnv()
    right = FixedPolicy(2, lambda S: np.tile([0.0, 1.0], (len(S), 1)))
    traj = generate_trajectory(env, right, 300, np.random.default_rng(0))
    first = traj.episode_ids == 0
    assert traj.terminals[first][-1]
    assert first.sum() < 200
    np.testing.assert_array_equal(traj.rewards, 1.0)


def test_cartpole_episode_cap():
    env = CartPoleEnv(x_threshold=1e9, theta_threshold=1e9)
    traj = generate_trajectory(env, UniformPolicy(2), 450, np.random.default_rng(0))
    assert np.sum(traj.episode_ids == 0) == 200
    assert np.sum(traj.episode_ids == 1) == 200
    assert not traj.terminals.any()


def test_cartpole_chaining_within_episode():
    traj = generate_trajectory(CartPoleEnv(), UniformPolicy(2), 2000, np.random.default_rng(4))
    same = traj.episode_ids[1:] == traj.episode_ids[:-1]
    np.testing.assert_array_equal(traj.next_states[:-1][same], traj.states[1:][same])


def _short_episodes():
    env = CartPoleEnv(x_threshold=1e9, theta_threshold=1e9, max_steps=3)
    return generate_trajectory(env, UniformPolicy(2), 6, np.random.default_rng(0))


def test_window_slice():
    traj = _short_episodes()
    w = window(traj, 0, 1)
    np.testing.assert_array_equal(w.state, traj.states[0])
    np.testing.assert_array_equal(w.next_states, traj.next_states[0:2])
    assert w.lookahead == 1


def test_window_rejections():
    traj = _short_episodes()
    with pytest.raises(WindowError):
        window(traj, 2, 1)  # last record of episode 0
    with pytest.raises(WindowError):
        window(traj, 1, 4)
    with pytest.raises(WindowError):
        window(traj, 5, 1)


def test_trajectory_binary_roundtrip(tmp_path):
    traj = generate_trajectory(CartPoleEnv(), UniformPolicy(2), 500, np.random.default_rng(2))
    path = tmp_path / "t.bin"
    save_trajectory(traj, path)
    back = load_trajectory(path)
    for f in ("states", "actions", "rewards", "next_states", "episode_ids", "terminals"):
        np.testing.assert_array_equal(getattr(back, f), getattr(traj, f))
    assert path.read_bytes()[:8] == b"BFFQTRJ1"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["tabular", "continuous"]))
def test_fast_rollout_matches_generic_step(seed, kind):
    env = TabularRingEnv(n=32) if kind == "tabular" else ContinuousRingEnv()
    pol = ring_policy()
    T = 50
    traj = generate_trajectory(env, pol, T, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    z, u = rng.standard_normal(T), rng.random(T)
    s = env.reset(rng)
    for m in range(T):
        np.testing.assert_allclose(traj.states[m], s, atol=1e-12)
        a = int(u[m] >= pol.probs(s[None])[0, 0])
        assert traj.actions[m] == a
        s = env.advance(s, np.array(a), np.array(z[m]))


def test_transition_kernel_rows():
    P = TabularRingEnv(n=8).transition_kernel()
    np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(P >= 0)
