import numpy as np
import pytest

from bffq.approx import CTRL, EVAL, MlpQ, TabularQ
from bffq.estimators import (
    EstimatorKind,
    UnsupportedEstimatorError,
    WindowBatch,
    bff_gradient,
    bff_gradient_ctrl,
    bff_surrogates,
    estimate,
    nbff_gradient,
    pd_update,
    sc_gradient,
    sc_gradient_ctrl,
    us_gradient,
    us_gradient_ctrl,
)
from bffq.mdp import (
    TWO_PI,
    CartPoleEnv,
    ContinuousRingEnv,
    FixedPolicy,
    RingGrid,
    TabularRingEnv,
    TrajectoryWindow,
    UniformPolicy,
    generate_trajectory,
    ring_policy,
    window,
)


def make_window(states, a=0, r=0.0, terminal=False):
    """Window from ``s_m, s_{m+1}, ...`` given as scalars on the ring."""
    s = np.asarray(states, dtype=float)[:, None]
    n = len(s) - 2
    return TrajectoryWindow(s[0], a, r, s[1:], np.zeros(n + 1, dtype=int), np.full(n + 1, r),
                            terminal)


def rand_batch(env, policy, T, n, seed):
    traj = generate_trajectory(env, policy, T + n + 1, np.random.default_rng(seed))
    return WindowBatch.from_trajectory(traj, np.arange(T), n)


def test_nbff_single_step_is_bff_bitwise():
    env = ContinuousRingEnv()
    q = MlpQ.initialized([1, 50, 50, 2], ["cos", "cos"], np.random.default_rng(0))
    b = rand_batch(env, ring_policy(), 10_000, 1, 1)
    g1 = nbff_gradient(b, q, ring_policy(), 0.8, (1.0,), env, per_sample=True)
    g2 = bff_gradient(b, q, ring_policy(), 0.8, env, per_sample=True)
    np.testing.assert_array_equal(g1.grad, g2.grad)
    np.testing.assert_array_equal(g1.per_sample, g2.per_sample)


def constant_drift(s, a):
    return 1.0 + 0.0 * s


@pytest.mark.parametrize("mode", [EVAL, CTRL])
def test_degenerate_kernel_identity(mode):
    env = ContinuousRingEnv(epsilon=0.125, sigma=0.0, drift=constant_drift)
    q = MlpQ.initialized([1, 20, 2], ["cos"], np.random.default_rng(3))
    rng = np.random.default_rng(0)
    s = rng.integers(0, 8, 200) / 8.0  # dyadic, far from the wrap point
    batch = WindowBatch(s[:, None], rng.integers(0, 2, 200), rng.normal(size=200),
                        np.stack([s + 0.125, s + 0.25], axis=1)[:, :, None],
                        np.ones(200, dtype=int), np.zeros(200, dtype=bool))
    pol = ring_policy() if mode == EVAL else None
    us = us_gradient(batch, q, pol, 0.9, env, rng, mode, per_sample=True)
    sc = sc_gradient(batch, q, pol, 0.9, mode, per_sample=True)
    bff = bff_gradient(batch, q, pol, 0.9, env, mode, per_sample=True)
    np.testing.assert_array_equal(us.per_sample, sc.per_sample)
    np.testing.assert_array_equal(bff.per_sample, sc.per_sample)


def test_degenerate_kernel_identity_tabular():
    env = TabularRingEnv(n=32, sigma=0.0)
    q = TabularQ(np.random.default_rng(0).normal(size=(32, 2)), env.grid)
    pol = UniformPolicy(2)
    b = rand_batch(env, FixedPolicy(2, lambda S: np.tile([0.0, 1.0], (len(S), 1))), 300, 1, 0)
    us = us_gradient(b, q, pol, 0.9, env, np.random.default_rng(1), per_sample=True)
    sc = sc_gradient(b, q, pol, 0.9, per_sample=True)
    bff = bff_gradient(b, q, pol, 0.9, env, per_sample=True)
    np.testing.assert_array_equal(us.per_sample, sc.per_sample)
    np.testing.assert_array_equal(bff.per_sample, sc.per_sample)


def test_borrowed_surrogate_arithmetic():
    b = WindowBatch.from_windows([make_window([1.0, 1.2, 1.5])])
    sur, fallbacks = bff_surrogates(b, (1.0,), ContinuousRingEnv())
    assert sur[0, 0, 0] == pytest.approx(1.3, abs=1e-14)
    assert fallbacks == 0


def test_borrowed_surrogate_wraps_around():
    b = WindowBatch.from_windows([make_window([0.05, TWO_PI - 0.05, TWO_PI - 0.15])])
    sur, _ = bff_surrogates(b, (1.0,), ContinuousRingEnv())
    assert sur[0, 0, 0] == pytest.approx(TWO_PI - 0.05, abs=1e-12)


def test_us_zero_table_pattern():
    env = TabularRingEnv(n=32)
    grid = env.grid
    pol = ring_policy()
    w = make_window([grid.points[5], grid.points[6], grid.points[7]], a=1, r=0.7)
    g = us_gradient(w, TabularQ.zeros(grid), pol, 0.9, env, np.random.default_rng(0))
    redraw = env.resample_batch(grid.points[[5]][:, None], np.array([1]), np.random.default_rng(0))
    k = grid.index(redraw)[0]
    expect = np.zeros((32, 2))
    expect[5, 1] = -0.7
    expect[k] += 0.9 * 0.7 * pol.probs(grid.points[[k]][None])[0]
    np.testing.assert_allclose(g.grad.reshape(32, 2), expect, atol=1e-15)


def test_tabular_bff_pattern_eval():
    env = TabularRingEnv(n=32)
    p = env.grid.points
    Q = np.random.default_rng(2).normal(size=(32, 2))
    q = TabularQ(Q, env.grid)
    pol = ring_policy()
    gamma, r = 0.9, 0.4
    w = make_window([p[10], p[12], p[11]], a=0, r=r)  # increment -1 -> surrogate p[9]
    j = r + gamma * (pol.probs(p[[12]][None])[0] @ Q[12]) - Q[10, 0]
    expect = np.zeros((32, 2))
    expect[10, 0] = -j
    expect[9] += gamma * j * pol.probs(p[[9]][None])[0]
    g = bff_gradient(w, q, pol, gamma, env).grad.reshape(32, 2)
    np.testing.assert_allclose(g, expect, atol=1e-15)
    assert np.count_nonzero(g) <= 3


def test_tabular_nbff_two_step_hand():
    env = TabularRingEnv(n=32)
    p = env.grid.points
    Q = np.random.default_rng(3).normal(size=(32, 2))
    q = TabularQ(Q, env.grid)
    pol = ring_policy()
    gamma, r = 0.8, 1.1
    # s_m=3, s_{m+1}=4, s_{m+2}=6 (+2), s_{m+3}=5 (-1)
    w = make_window([p[3], p[4], p[6], p[5]], a=1, r=r)
    j = r + gamma * (pol.probs(p[[4]][None])[0] @ Q[4]) - Q[3, 1]
    expect = np.zeros((32, 2))
    expect[3, 1] = -j
    expect[5] += 0.5 * gamma * j * pol.probs(p[[5]][None])[0]
    expect[2] += 0.5 * gamma * j * pol.probs(p[[2]][None])[0]
    g = nbff_gradient(w, q, pol, gamma, (0.5, 0.5), env).grad.reshape(32, 2)
    np.testing.assert_allclose(g, expect, atol=1e-15)


def test_tabular_ctrl_zero_table():
    env = TabularRingEnv(n=32)
    p = env.grid.points
    q = TabularQ.zeros(env.grid)
    w = make_window([p[3], p[4], p[6]], a=1, r=0.5)
    g = bff_gradient_ctrl(w, q, 0.9, env).grad.reshape(32, 2)
    expect = np.zeros((32, 2))
    expect[3, 1], expect[5, 0] = -0.5, 0.9 * 0.5
    np.testing.assert_array_equal(g, expect)
    g = sc_gradient_ctrl(w, q, 0.9).grad.reshape(32, 2)
    assert np.count_nonzero(g) <= 2


def test_zero_gamma_modes_coincide():
    env = ContinuousRingEnv()
    q = MlpQ.initialized([1, 10, 2], ["cos"], np.random.default_rng(0))
    b = rand_batch(env, ring_policy(), 100, 1, 0)
    e = bff_gradient(b, q, ring_policy(), 0.0, env).grad
    c = bff_gradient_ctrl(b, q, 0.0, env).grad
    np.testing.assert_array_equal(e, c)


def test_sc_zero_q_zero_reward():
    q = TabularQ.zeros(RingGrid(8))
    w = make_window([0.0, 0.785398, 1.570796], r=0.0)
    assert not np.any(sc_gradient(w, q, ring_policy(), 0.9).grad)


def test_deterministic_env_sc_equals_us_ctrl():
    env = CartPoleEnv()
    q = MlpQ.initialized([4, 16, 2], ["relu"], np.random.default_rng(0))
    traj = generate_trajectory(env, UniformPolicy(2), 500, np.random.default_rng(1))
    b = WindowBatch.from_trajectory(traj, np.arange(400), 1)
    us = us_gradient_ctrl(b, q, 0.99, env, np.random.default_rng(0))
    sc = sc_gradient_ctrl(b, q, 0.99)
    np.testing.assert_array_equal(us.grad, sc.grad)


def test_episode_boundary_fallback_counts():
    env = CartPoleEnv()
    traj = generate_trajectory(env, UniformPolicy(2), 600, np.random.default_rng(1))
    idx = np.arange(len(traj))
    b = WindowBatch.from_trajectory(traj, idx, 1)
    q = MlpQ.initialized([4, 16, 2], ["relu"], np.random.default_rng(0))
    est = bff_gradient_ctrl(b, q, 0.99, env)
    ends = int(np.sum(traj.lookahead() == 0))
    assert est.fallbacks == ends
    sur, _ = bff_surrogates(b, (1.0,), env)
    last = traj.lookahead() == 0
    np.testing.assert_array_equal(sur[last, 0], traj.next_states[last])


def test_us_needs_resampling():
    class Frozen(ContinuousRingEnv):
        supports_resampling = False

    w = make_window([0.0, 0.1, 0.2])
    with pytest.raises(UnsupportedEstimatorError):
        us_gradient(w, TabularQ.zeros(RingGrid(8)), ring_policy(), 0.9, Frozen(),
                    np.random.default_rng(0))


def test_weights_validation_and_labels():
    with pytest.raises(ValueError):
        EstimatorKind("bff", EVAL, (0.5, 0.6))
    with pytest.raises(ValueError):
        EstimatorKind("bff", EVAL, (np.nan,))
    assert EstimatorKind.parse("4BFF").weights == (0.25,) * 4
    assert EstimatorKind.parse("BFF").label == "BFF"
    assert EstimatorKind.parse("2bff").label == "2BFF"
    assert EstimatorKind.parse("us", CTRL).mode == CTRL


@pytest.mark.parametrize("kind", ["US", "SC", "BFF", "3BFF"])
def test_batch_mean_equals_member_average(kind):
    env = ContinuousRingEnv()
    q = MlpQ.initialized([1, 50, 50, 2], ["cos", "cos"], np.random.default_rng(0))
    k = EstimatorKind.parse(kind)
    b = rand_batch(env, ring_policy(), 50, k.lookahead, 4)
    full = estimate(k, b, q, 0.8, env, ring_policy(), np.random.default_rng(7))
    rng = np.random.default_rng(7)
    redraw = env.resample_batch(b.states, b.actions, rng) if kind == "US" else None
    rows = []
    for i in range(len(b)):
        one = WindowBatch(b.states[i:i + 1], b.actions[i:i + 1], b.rewards[i:i + 1],
                          b.next_states[i:i + 1], b.available[i:i + 1], b.terminal[i:i + 1])
        if kind == "US":
            class Replay:
                supports_resampling = True

                def resample_batch(self, s, a, _rng, row=redraw[i:i + 1]):
                    return row
            rows.append(estimate(k, one, q, 0.8, Replay(), ring_policy()).grad)
        else:
            rows.append(estimate(k, one, q, 0.8, env, ring_policy()).grad)
    mean = np.zeros_like(full.grad)
    for r in rows:
        mean += r
    mean /= len(rows)
    np.testing.assert_allclose(full.grad, mean, rtol=0, atol=1e-15)


def test_estimator_purity():
    env = ContinuousRingEnv()
    q = MlpQ.initialized([1, 10, 2], ["cos"], np.random.default_rng(0))
    b = rand_batch(env, ring_policy(), 20, 1, 0)
    a = us_gradient(b, q, ring_policy(), 0.8, env, np.random.default_rng(3)).grad
    c = us_gradient(b, q, ring_policy(), 0.8, env, np.random.default_rng(3)).grad
    np.testing.assert_array_equal(a, c)


def test_us_mean_matches_enumerated_product():
    """Monte Carlo mean of the uncorrelated estimator at fixed (s, a) vs delta * grad delta."""
    env = TabularRingEnv(n=8)
    grid = env.grid
    P = env.transition_kernel()
    pol = ring_policy()
    pi = pol.probs(grid.points[:, None])
    Q = np.random.default_rng(0).normal(size=(8, 2))
    q = TabularQ(Q, grid)
    gamma, s, a = 0.8, 2, 1
    r_next = np.sin(grid.points) + 1.0
    j = r_next + gamma * (pi * Q).sum(axis=1) - Q[s, a]
    delta = P[s, a] @ j
    grad_delta = np.zeros((8, 2))
    grad_delta[s, a] = -1.0
    grad_delta += gamma * P[s, a][:, None] * pi
    expect = delta * grad_delta.reshape(-1)

    N = 100_000
    rng = np.random.default_rng(5)
    S = np.full((N, 1), grid.points[s])
    A = np.full(N, a)
    nxt = env.resample_batch(S, A, rng)
    b = WindowBatch(S, A, env.reward(nxt), nxt[:, None], np.zeros(N, dtype=int),
                    np.zeros(N, dtype=bool))
    est = us_gradient(b, q, pol, gamma, env, rng, per_sample=True)
    se = est.per_sample.std(axis=0, ddof=1) / np.sqrt(N)
    assert np.all(np.abs(est.grad - expect) <= 4 * se + 1e-12)


def test_pd_stalls_with_zero_dual_and_no_dual_step():
    grid = RingGrid(2)
    q = TabularQ(np.array([[1.0, 2.0], [3.0, 4.0]]), grid)
    y = TabularQ.zeros(grid)
    w = make_window([0.0, np.pi, 0.0], a=1, r=0.5)
    step = pd_update(w, q, y, 0.9, beta=0.0, policy=FixedPolicy(2, lambda S: np.tile([0.3, 0.7], (len(S), 1))))
    assert not np.any(step.theta_grad)
    assert not np.any(step.dual_step)


def test_pd_hand_update():
    grid = RingGrid(2)
    pol = FixedPolicy(2, lambda S: np.tile([0.3, 0.7], (len(S), 1)))
    q = TabularQ(np.array([[1.0, 2.0], [3.0, 4.0]]), grid)
    y = TabularQ(np.array([[0.0, 0.5], [0.0, 0.0]]), grid)
    w = make_window([0.0, np.pi, 0.0], a=1, r=0.5)
    gamma, beta = 0.9, 0.1
    j = 0.5 + 0.9 * (0.3 * 3 + 0.7 * 4) - 2.0  # 1.83
    # omega <- omega + beta*j*grad y - y*grad y, grad y = e_(0,1)
    dual_step = np.zeros(4)
    dual_step[1] = beta * j - 0.5
    y_new = 0.5 + dual_step[1]
    theta_grad = np.array([0.0, -1.0, gamma * 0.3, gamma * 0.7]) * y_new
    step = pd_update(w, q, y, gamma, beta, EVAL, pol)
    np.testing.assert_allclose(step.dual_step, dual_step, atol=1e-15)
    np.testing.assert_allclose(step.theta_grad, theta_grad, atol=1e-15)
    scaled = pd_update(w, q, y, gamma, beta, EVAL, pol, dual_form="scaled")
    assert scaled.dual_step[1] == pytest.approx(beta * (j - 0.5))


def test_window_from_trajectory_matches_batch():
    env = ContinuousRingEnv()
    traj = generate_trajectory(env, ring_policy(), 100, np.random.default_rng(0))
    b1 = WindowBatch.from_windows([window(traj, m, 2) for m in range(10)])
    b2 = WindowBatch.from_trajectory(traj, np.arange(10), 2)
    np.testing.assert_array_equal(b1.next_states, b2.next_states)
    np.testing.assert_array_equal(b1.available, b2.available)
