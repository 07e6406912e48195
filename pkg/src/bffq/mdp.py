"""Environments, policies and trajectory generation.

Three testbeds are provided: a continuous ring (angle state, drift +-1),
a tabular ring obtained by snapping the continuous dynamics to a uniform
grid, and the classic CartPole balancing task.  States are always stored as
float arrays with a trailing state dimension, actions as integer indices.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

TWO_PI = 2.0 * math.pi

DriftFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class InvalidActionError(ValueError):
    pass


class WindowError(ValueError):
    """Requested window crosses an episode boundary or the trajectory end."""


def wrap_angle(x):
    """Reduce angles into [0, 2*pi)."""
    y = np.mod(x, TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    return np.where(y >= TWO_PI, 0.0, y)


def circular_difference(b, a):
    """Signed difference b - a mapped into [-pi, pi)."""
    return np.mod(np.asarray(b) - np.asarray(a) + math.pi, TWO_PI) - math.pi


@dataclass(frozen=True)
class RingGrid:
    """The state set {2*pi*k/n} of the tabular ring."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("grid needs at least one point")

    @property
    def spacing(self) -> float:
        return TWO_PI / self.n

    @property
    def points(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n) / self.n

    def index(self, states) -> np.ndarray:
        """Index of the circularly nearest grid point."""
        s = np.asarray(states, dtype=np.float64)
        if s.ndim and s.shape[-1] == 1:
            s = s[..., 0]
        return np.mod(np.rint(s / self.spacing).astype(np.int64), self.n)

    def snap(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return self.points[self.index(s)].reshape(s.shape)


def _default_drift(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) + 0.0 * s


def _ring_reward(s_next, s=None, a=None) -> np.ndarray:
    return np.sin(np.asarray(s_next)[..., 0]) + 1.0


class _RingBase:
    state_dim = 1
    n_actions = 2
    action_values = (-1.0, 1.0)
    episodic = False
    supports_resampling = True
    max_steps: Optional[int] = None

    epsilon: float
    sigma: float
    drift: DriftFn

    def _check(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")

    def _action_value(self, a) -> np.ndarray:
        a = np.asarray(a)
        if a.dtype.kind not in "iu" or np.any((a < 0) | (a >= self.n_actions)):
            raise InvalidActionError(f"action index {a!r} outside 0..{self.n_actions - 1}")
        return np.asarray(self.action_values)[a]

    def reward(self, s_next, s=None, a=None) -> np.ndarray:
        return _ring_reward(s_next, s, a)

    def is_terminal(self, states) -> np.ndarray:
        return np.zeros(np.asarray(states).shape[:-1], dtype=bool)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self.project(np.array([rng.uniform(0.0, TWO_PI)]))

    def project(self, states) -> np.ndarray:
        return wrap_angle(states)

    def step(self, s, a, rng: np.random.Generator):
        """One transition from ``s`` under action index ``a``; returns ``(s', r)``."""
        s = np.asarray(s, dtype=np.float64)
        z = rng.standard_normal()
        s_next = self.advance(s, a, z)
        return s_next, float(self.reward(s_next, s, a))

    def resample_next(self, s, a, rng: np.random.Generator) -> np.ndarray:
        """Fresh independent draw of the next state from ``(s, a)``.

        A simulator privilege: only the uncorrelated-sampling baseline uses it.
        """
        return self.step(s, a, rng)[0]

    def resample_batch(self, states, actions, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(np.asarray(actions).shape)
        return self.advance(states, actions, z)


@dataclass(frozen=True)
class ContinuousRingEnv(_RingBase):
    """Angle on [0, 2*pi) moved by ``mu(s, a) * eps + sigma * sqrt(eps) * Z``."""

    epsilon: float = TWO_PI / 32
    sigma: float = 0.2
    drift: DriftFn = field(default=_default_drift, compare=False)

    def __post_init__(self):
        self._check()

    def increment(self, states, actions, z) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)[..., 0]
        mu = self.drift(s, self._action_value(actions))
        return mu * self.epsilon + self.sigma * math.sqrt(self.epsilon) * np.asarray(z)

    def advance(self, states, actions, z) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return wrap_angle(s + self.increment(s, actions, z)[..., None])

    def borrow(self, s0, s1, s2) -> np.ndarray:
        """Second next-state sample ``s0 + (s2 - s1)`` on the circle."""
        return wrap_angle(np.asarray(s0) + circular_difference(s2, s1))

    def rollout(self, policy, T: int, rng: np.random.Generator, s0=None):
        z = rng.standard_normal(T)
        u = rng.random(T)
        s = float(self.reset(rng)[0]) if s0 is None else float(np.asarray(s0).reshape(-1)[0])
        sample = _scalar_sampler(policy)
        av = self.action_values
        drift, eps = self.drift, self.epsilon
        noise = self.sigma * math.sqrt(eps)
        default = drift is _default_drift
        states = np.empty(T + 1)
        actions = np.empty(T, dtype=np.int64)
        zl, ul = z.tolist(), u.tolist()
        for m in range(T):
            states[m] = s
            a = sample(s, ul[m])
            actions[m] = a
            mu = av[a] if default else float(drift(np.float64(s), np.float64(av[a])))
            s = (s + mu * eps + noise * zl[m]) % TWO_PI
            if s >= TWO_PI:
                s = 0.0
        states[T] = s
        return _continuing_trajectory(self, states[:, None], actions)


@dataclass(frozen=True)
class TabularRingEnv(_RingBase):
    """Ring dynamics snapped to the nearest of ``n`` grid points.

    The increment is ``(2*pi/n) * mu(s, a) * eps + sigma * sqrt(eps) * Z``.
    """

    n: int = 32
    epsilon: float = 1.0
    sigma: float = 1.0
    drift: DriftFn = field(default=_default_drift, compare=False)

    def __post_init__(self):
        self._check()

    @property
    def grid(self) -> RingGrid:
        return RingGrid(self.n)

    def increment(self, states, actions, z) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)[..., 0]
        mu = self.drift(s, self._action_value(actions))
        return self.grid.spacing * mu * self.epsilon + self.sigma * math.sqrt(self.epsilon) * np.asarray(z)

    def advance(self, states, actions, z) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return self.grid.snap(s + self.increment(s, actions, z)[..., None])

    def project(self, states) -> np.ndarray:
        return self.grid.snap(states)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([self.grid.points[rng.integers(self.n)]])

    def borrow(self, s0, s1, s2) -> np.ndarray:
        return self.grid.snap(np.asarray(s0) + (np.asarray(s2) - np.asarray(s1)))

    def transition_kernel(self) -> np.ndarray:
        """Exact ``P[s, a, s']`` from Gaussian interval masses (all wraps summed)."""
        n, h = self.n, self.grid.spacing
        sd = self.sigma * math.sqrt(self.epsilon)
        pts = self.grid.points
        P = np.zeros((n, self.n_actions, n))
        k = np.arange(n)
        for a in range(self.n_actions):
            means = h * self.drift(pts, np.full(n, self.action_values[a])) * self.epsilon
            for s in range(n):
                m = means[s]
                if sd == 0.0:
                    P[s, a, self.grid.index(pts[s] + m)] = 1.0
                    continue
                reach = int(math.ceil((abs(m) + 12.0 * sd) / TWO_PI)) + 1
                offs = (k[None, :] - s + n * np.arange(-reach, reach + 1)[:, None]) * h
                mass = ndtr((offs + h / 2 - m) / sd) - ndtr((offs - h / 2 - m) / sd)
                P[s, a] = mass.sum(axis=0)
        return P / P.sum(axis=2, keepdims=True)

    def rollout(self, policy, T: int, rng: np.random.Generator, s0=None):
        z = rng.standard_normal(T)
        u = rng.random(T)
        grid = self.grid
        k = int(grid.index(self.reset(rng) if s0 is None else np.atleast_1d(s0))[()])
        cum = np.cumsum(policy.probs(grid.points[:, None]), axis=1)[:, :-1].tolist()
        mean_step = (grid.spacing * self.drift(grid.points[:, None], np.array(self.action_values)[None, :])
                     * self.epsilon / grid.spacing).tolist()
        scale = self.sigma * math.sqrt(self.epsilon) / grid.spacing
        idx = np.empty(T + 1, dtype=np.int64)
        actions = np.empty(T, dtype=np.int64)
        zl, ul, n = z.tolist(), u.tolist(), self.n
        for m in range(T):
            idx[m] = k
            c = cum[k]
            a = 0
            while a < len(c) and ul[m] >= c[a]:
                a += 1
            actions[m] = a
            k = (k + round(mean_step[k][a] + scale * zl[m])) % n
        idx[T] = k
        return _continuing_trajectory(self, grid.points[idx][:, None], actions)


@dataclass(frozen=True)
class CartPoleEnv:
    """Classic cart-pole balancing, semi-implicit Euler integration."""

    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5  # half the pole length
    force_mag: float = 10.0
    tau: float = 0.02
    x_threshold: float = 2.4
    theta_threshold: float = 12.0 * 2.0 * math.pi / 360.0
    max_steps: int = 200

    state_dim = 4
    n_actions = 2
    episodic = True
    supports_resampling = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-0.05, 0.05, size=4)

    def advance(self, states, actions, z=None) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        a = np.asarray(actions)
        if a.dtype.kind not in "iu" or np.any((a < 0) | (a > 1)):
            raise InvalidActionError(f"cart-pole action must be 0 or 1, got {actions!r}")
        x, x_dot, theta, theta_dot = (s[..., i] for i in range(4))
        force = np.where(a == 1, self.force_mag, -self.force_mag)
        total_mass = self.masspole + self.masscart
        pml = self.masspole * self.length
        cos, sin = np.cos(theta), np.sin(theta)
        temp = (force + pml * theta_dot**2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass)
        )
        x_acc = temp - pml * theta_acc * cos / total_mass
        x_dot = x_dot + self.tau * x_acc
        x = x + self.tau * x_dot
        theta_dot = theta_dot + self.tau * theta_acc
        theta = theta + self.tau * theta_dot
        return np.stack([x, x_dot, theta, theta_dot], axis=-1)

    def step(self, s, a, rng: Optional[np.random.Generator] = None):
        s_next = self.advance(s, a)
        return s_next, 1.0

    def resample_next(self, s, a, rng=None) -> np.ndarray:
        return self.advance(s, a)

    def resample_batch(self, states, actions, rng=None) -> np.ndarray:
        return self.advance(states, actions)

    def reward(self, s_next, s=None, a=None) -> np.ndarray:
        return np.ones(np.asarray(s_next).shape[:-1])

    def is_terminal(self, states) -> np.ndarray:
        s = np.asarray(states)
        return (np.abs(s[..., 0]) > self.x_threshold) | (np.abs(s[..., 2]) > self.theta_threshold)

    def borrow(self, s0, s1, s2) -> np.ndarray:
        return np.asarray(s0) + (np.asarray(s2) - np.asarray(s1))

    def project(self, states) -> np.ndarray:
        return np.asarray(states, dtype=np.float64)


# ---------------------------------------------------------------- policies


class FixedPolicy:
    """Stationary stochastic policy given by ``probs_fn(states) -> (B, A)``."""

    def __init__(self, n_actions: int, probs_fn, scalar_fn=None, name: str = "fixed"):
        self.n_actions = n_actions
        self._fn = probs_fn
        self._scalar = scalar_fn
        self.name = name

    def probs(self, states) -> np.ndarray:
        S = np.atleast_2d(np.asarray(states, dtype=np.float64))
        p = np.asarray(self._fn(S), dtype=np.float64)
        return np.broadcast_to(p, (S.shape[0], self.n_actions))

    def sample(self, state, rng: np.random.Generator) -> int:
        return _inverse_cdf(self.probs(np.asarray(state)[None])[0], rng.random())


class UniformPolicy(FixedPolicy):
    def __init__(self, n_actions: int = 2):
        p = np.full(n_actions, 1.0 / n_actions)
        super().__init__(n_actions, lambda S: np.tile(p, (S.shape[0], 1)),
                         scalar_fn=lambda s: p, name="uniform")


def ring_policy() -> FixedPolicy:
    """pi(a|s) = 1/2 + a sin(s)/5 for a in {-1, +1}."""

    def probs(S):
        up = 0.5 + np.sin(S[:, 0]) / 5.0
        return np.stack([1.0 - up, up], axis=1)

    def scalar(s):
        up = 0.5 + math.sin(s) / 5.0
        return (1.0 - up, up)

    return FixedPolicy(2, probs, scalar_fn=scalar, name="ring")


class EpsilonGreedyPolicy:
    """Greedy in ``q`` with probability ``1 - epsilon``, uniform otherwise."""

    def __init__(self, q, epsilon: float):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("exploration rate must lie in [0, 1]")
        self.q = q
        self.epsilon = epsilon
        self.n_actions = q.n_actions

    def probs(self, states) -> np.ndarray:
        values = self.q.evaluate(np.atleast_2d(states))
        greedy = np.zeros_like(values)
        greedy[np.arange(len(values)), np.argmax(values, axis=1)] = 1.0
        return self.epsilon / self.n_actions + (1.0 - self.epsilon) * greedy

    def sample(self, state, rng: np.random.Generator) -> int:
        if rng.random() < self.epsilon:
            return int(rng.integers(self.n_actions))
        return int(np.argmax(self.q.evaluate(np.asarray(state)[None])[0]))


def _inverse_cdf(p: Sequence[float], u: float) -> int:
    acc = 0.0
    for a, pa in enumerate(p[:-1]):
        acc += pa
        if u < acc:
            return a
    return len(p) - 1


def _scalar_sampler(policy):
    scalar = getattr(policy, "_scalar", None)
    if scalar is not None:
        return lambda s, u: _inverse_cdf(scalar(s), u)
    return lambda s, u: _inverse_cdf(policy.probs(np.array([[s]]))[0], u)


# ------------------------------------------------------------ trajectories


@dataclass
class Trajectory:
    """Ordered transition records ``(s_m, a_m, r_m, s_{m+1}, episode_id)``.

    ``terminals[m]`` marks that ``s_{m+1}`` is an absorbing state; episodes
    cut by a step cap end without the flag.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    episode_ids: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def lookahead(self) -> np.ndarray:
        """Number of later records in the same episode, per record."""
        if not hasattr(self, "_lookahead"):
            ep = self.episode_ids
            n = len(ep)
            out = np.zeros(n, dtype=np.int64)
            if n:
                ends = np.flatnonzero(np.r_[ep[1:] != ep[:-1], True])
                last = np.repeat(ends, np.diff(np.r_[-1, ends]))
                out = last - np.arange(n)
            self._lookahead = out
        return self._lookahead

    def save(self, path) -> None:
        save_trajectory(self, path)

    @classmethod
    def load(cls, path) -> "Trajectory":
        return load_trajectory(path)


def _continuing_trajectory(env, states: np.ndarray, actions: np.ndarray) -> Trajectory:
    s, s1 = states[:-1], states[1:]
    return Trajectory(
        states=s,
        actions=actions,
        rewards=env.reward(s1, s, actions),
        next_states=s1,
        episode_ids=np.zeros(len(actions), dtype=np.int64),
        terminals=np.zeros(len(actions), dtype=bool),
    )


def generate_trajectory(env, policy, T: int, rng: np.random.Generator, s0=None) -> Trajectory:
    """Roll out ``policy`` for ``T`` transitions; episodic envs reset on termination."""
    if T < 1:
        raise ValueError("trajectory length must be at least 1")
    if hasattr(env, "rollout"):
        return env.rollout(policy, T, rng, s0)
    d = env.state_dim
    states = np.empty((T, d))
    next_states = np.empty((T, d))
    actions = np.empty(T, dtype=np.int64)
    rewards = np.empty(T)
    episodes = np.empty(T, dtype=np.int64)
    terminals = np.zeros(T, dtype=bool)
    s = env.reset(rng) if s0 is None else np.asarray(s0, dtype=np.float64)
    episode, t = 0, 0
    cap = getattr(env, "max_steps", None)
    for m in range(T):
        a = policy.sample(s, rng)
        s_next, r = env.step(s, a, rng)
        states[m], actions[m], rewards[m], next_states[m] = s, a, r, s_next
        episodes[m] = episode
        t += 1
        done = bool(env.is_terminal(s_next))
        terminals[m] = done
        if done or (cap is not None and t >= cap):
            episode += 1
            t = 0
            s = env.reset(rng)
        else:
            s = s_next
    return Trajectory(states, actions, rewards, next_states, episodes, terminals)


@dataclass
class TrajectoryWindow:
    """Slice ``(s_m, a_m, s_{m+1}, ..., s_{m+n+1})`` of one episode."""

    state: np.ndarray
    action: int
    reward: float
    next_states: np.ndarray  # (n + 1, d): s_{m+1} .. s_{m+n+1}
    actions: np.ndarray  # a_m .. a_{m+n}
    rewards: np.ndarray  # r_m .. r_{m+n}
    terminal: bool  # s_{m+1} is absorbing

    @property
    def next_state(self) -> np.ndarray:
        return self.next_states[0]

    @property
    def lookahead(self) -> int:
        return len(self.next_states) - 1


def window(traj: Trajectory, m: int, n: int) -> TrajectoryWindow:
    """Window starting at record ``m`` with ``n`` future increments."""
    if n < 0 or m < 0 or m + n >= len(traj):
        raise WindowError(f"window m={m}, n={n} runs past trajectory of length {len(traj)}")
    if traj.lookahead()[m] < n:
        raise WindowError(f"window m={m}, n={n} crosses an episode boundary")
    sl = slice(m, m + n + 1)
    return TrajectoryWindow(
        state=traj.states[m].copy(),
        action=int(traj.actions[m]),
        reward=float(traj.rewards[m]),
        next_states=traj.next_states[sl].copy(),
        actions=traj.actions[sl].copy(),
        rewards=traj.rewards[sl].copy(),
        terminal=bool(traj.terminals[m]),
    )


# ------------------------------------------------------- binary rollouts

TRAJECTORY_MAGIC = b"BFFQTRJ1"


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([
        ("s", "<f8", (d,)),
        ("a", "<u4"),
        ("r", "<f8"),
        ("s1", "<f8", (d,)),
        ("episode", "<u4"),
        ("terminal", "u1"),
    ])


def save_trajectory(traj: Trajectory, path) -> None:
    """Little-endian record stream preceded by an 8-byte magic and ``(dim, count)``."""
    d = traj.state_dim
    rec = np.empty(len(traj), dtype=_record_dtype(d))
    rec["s"], rec["a"], rec["r"] = traj.states, traj.actions, traj.rewards
    rec["s1"], rec["episode"], rec["terminal"] = traj.next_states, traj.episode_ids, traj.terminals
    with open(path, "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(struct.pack("<IQ", d, len(traj)))
        fh.write(rec.tobytes())


def load_trajectory(path) -> Trajectory:
    raw = Path(path).read_bytes()
    if raw[:8] != TRAJECTORY_MAGIC:
        raise ValueError(f"{path}: not a trajectory file")
    d, count = struct.unpack_from("<IQ", raw, 8)
    rec = np.frombuffer(raw, dtype=_record_dtype(d), count=count, offset=8 + struct.calcsize("<IQ"))
    return Trajectory(
        states=rec["s"].astype(np.float64),
        actions=rec["a"].astype(np.int64),
        rewards=rec["r"].astype(np.float64),
        next_states=rec["s1"].astype(np.float64),
        episode_ids=rec["episode"].astype(np.int64),
        terminals=rec["terminal"].astype(bool),
    )
