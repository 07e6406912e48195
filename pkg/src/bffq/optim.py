"""Optimizers, replay, batch sampling and the training loops."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from bffq.approx import CTRL, EVAL, residuals
from bffq.config import ExperimentConfig, LearningCurve
from bffq.estimators import EstimatorKind, WindowBatch, estimate, pd_update, power_schedule
from bffq.mdp import TWO_PI, Trajectory, generate_trajectory

log = logging.getLogger(__name__)

STREAMS = ("trajectory", "init", "batches", "resample", "dual", "acting", "env", "heldout")


class NonFiniteError(FloatingPointError):
    def __init__(self, step: int, what: str = "gradient"):
        super().__init__(f"non-finite {what} at update {step}")
        self.step = step


def seed_streams(seed: int, replicate: int = 0) -> dict:
    """Independent named generators; ``replicate`` only re-seeds initialization streams."""
    base = dict(zip(STREAMS, np.random.SeedSequence(seed).spawn(len(STREAMS))))
    if replicate:
        rep = np.random.SeedSequence([seed, replicate]).spawn(2)
        base["init"], base["dual"] = rep
    return {k: np.random.default_rng(v) for k, v in base.items()}


# ------------------------------------------------------------ optimizers


def _check_finite(x: np.ndarray, step: int, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(step, what)


def sgd_step(theta: np.ndarray, batch_grads: np.ndarray, eta: float) -> np.ndarray:
    """``theta - eta * mean(batch_grads)`` over the leading axis."""
    g = np.asarray(batch_grads)
    if g.ndim == 2:
        if len(g) == 0:
            raise ValueError("empty batch")
        g = g.mean(axis=0)
    _check_finite(g, -1, "gradient")
    return theta - eta * g


class Sgd:
    """Plain SGD with step size ``lr * k**(-power)`` at update ``k >= 1``."""

    def __init__(self, lr: float, power: float = 0.0):
        self.lr = lr
        self.power = power
        self.t = 0

    def rate(self, k: int) -> float:
        return self.lr if self.power == 0 else power_schedule(self.lr, self.power)(k)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        _check_finite(grad, self.t, "gradient")
        return theta - self.rate(self.t) * grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(state', theta')`` without mutating inputs."""
    _check_finite(grad, state.t + 1, "gradient")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return AdamState(m, v, t), theta - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState(np.zeros(n_params), np.zeros(n_params))

    @property
    def t(self) -> int:
        return self.state.t

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.state, theta = adam_step(self.state, theta, grad, self.lr, self.beta1, self.beta2,
                                      self.eps)
        return theta


def make_optimizer(spec: dict, n_params: int):
    if spec["kind"] == "sgd":
        return Sgd(spec.get("lr", 0.1), spec.get("power", 0.0))
    return Adam(n_params, spec.get("lr", 1e-3), spec.get("beta1", 0.9), spec.get("beta2", 0.999),
                spec.get("eps", 1e-8))


@dataclass(frozen=True)
class ExplorationSchedule:
    """``max(floor, start * decay**k)`` after ``k`` parameter updates."""

    start: float = 1.0
    decay: float = 0.99
    floor: float = 0.1

    def __call__(self, k: int) -> float:
        return max(self.floor, self.start * self.decay**k)


# ---------------------------------------------------------------- replay


class ReplayBuffer:
    """FIFO of transitions; windows are assembled from consecutive slots at sampling time."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.episodes = np.zeros(capacity, dtype=np.int64)
        self.total = 0
        self.open_episode = False

    def __len__(self) -> int:
        return min(self.total, self.capacity)

    @property
    def oldest(self) -> int:
        return self.total - len(self)

    def add(self, s, a: int, r: float, s_next, terminal: bool, episode: int,
            ends_episode: bool = False) -> None:
        k = self.total % self.capacity
        self.states[k], self.actions[k], self.rewards[k] = s, a, r
        self.next_states[k], self.terminals[k], self.episodes[k] = s_next, terminal, episode
        self.total += 1
        self.open_episode = not (terminal or ends_episode)

    def contains(self, seq: int) -> bool:
        return self.oldest <= seq < self.total

    def valid_count(self, n: int) -> int:
        """Records usable as window starts: all but the open episode's last ``n``."""
        if not self.open_episode or n == 0:
            return len(self)
        newest_ep = self.episodes[(self.total - 1) % self.capacity]
        tail = 0
        while tail < min(n, len(self)):
            if self.episodes[(self.total - 1 - tail) % self.capacity] != newest_ep:
                break
            tail += 1
        return len(self) - tail

    def gather(self, seqs: np.ndarray, n: int) -> WindowBatch:
        seqs = np.asarray(seqs, dtype=np.int64)
        slots = seqs % self.capacity
        d = self.states.shape[1]
        nxt = np.repeat(self.next_states[slots][:, None, :], n + 1, axis=1)
        avail = np.zeros(len(seqs), dtype=np.int64)
        alive = ~self.terminals[slots]
        ep = self.episodes[slots]
        for i in range(1, n + 1):
            later = seqs + i
            ok = alive & (later < self.total)
            ls = later % self.capacity
            ok &= self.episodes[ls] == ep
            nxt[ok, i] = self.next_states[ls[ok]]
            avail += ok
            alive = ok & ~self.terminals[ls]
        assert nxt.shape[2] == d
        return WindowBatch(self.states[slots], self.actions[slots], self.rewards[slots], nxt, avail,
                           self.terminals[slots])


def _valid_positions(traj: Trajectory, n: int) -> Union[int, np.ndarray]:
    """Window starts whose lookahead is complete or whose episode has closed.

    Returns a prefix length when the valid set is ``0..k-1``.
    """
    cache = traj.__dict__.setdefault("_valid_cache", {})
    if n not in cache:
        la = traj.lookahead()
        T = len(traj)
        closed = np.ones(T, dtype=bool)
        if T:
            last_ep = traj.episode_ids[-1]
            closed = (traj.episode_ids != last_ep) | traj.terminals[-1]
        ok = (la >= n) | closed
        k = int(np.argmin(ok)) if not ok.all() else T
        cache[n] = k if ok[:k].all() and not ok[k:].any() else np.flatnonzero(ok)
    return cache[n]


def sample_batch(source, batch_size: int, n_lookahead: int, rng: np.random.Generator) -> WindowBatch:
    """Uniform-with-replacement draw of window starts."""
    if isinstance(source, ReplayBuffer):
        valid = source.valid_count(n_lookahead)
        if valid <= 0:
            raise ValueError("replay buffer holds no valid window")
        seqs = source.oldest + rng.integers(0, valid, size=batch_size)
        return source.gather(seqs, n_lookahead)
    if len(source) == 0:
        raise ValueError("empty trajectory")
    valid = _valid_positions(source, n_lookahead)
    if isinstance(valid, int):
        if valid == 0:
            raise ValueError("trajectory holds no valid window")
        idx = rng.integers(0, valid, size=batch_size)
    else:
        if len(valid) == 0:
            raise ValueError("trajectory holds no valid window")
        idx = valid[rng.integers(0, len(valid), size=batch_size)]
    return WindowBatch.from_trajectory(source, idx, n_lookahead)


# ---------------------------------------------------------------- metrics


class RelErrGrid:
    """``||Q - Q*||_2 / ||Q*||_2`` over a fixed set of states and all actions."""

    def __init__(self, oracle, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self.target = oracle.evaluate(self.points)
        self.norm = float(np.linalg.norm(self.target))

    @classmethod
    def for_env(cls, env, oracle, n_points: int = 256) -> "RelErrGrid":
        if hasattr(env, "grid"):
            return cls(oracle, env.grid.points[:, None])
        return cls(oracle, (TWO_PI * np.arange(n_points) / n_points)[:, None])

    def __call__(self, q) -> float:
        return float(np.linalg.norm(q.evaluate(self.points) - self.target) / self.norm)


class BellmanResidualMetric:
    """Mean squared single-sample residual over held-out windows."""

    def __init__(self, batch: WindowBatch, gamma: float, mode: str, policy):
        self.batch, self.gamma, self.mode, self.policy = batch, gamma, mode, policy

    def __call__(self, q) -> float:
        b = self.batch
        j = residuals(q, b.states, b.actions, b.next_state, b.rewards, self.gamma, self.mode,
                      self.policy, b.terminal)
        return float(np.mean(j * j))


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    curve: LearningCurve
    q: object
    updates: int
    fallbacks: int = 0
    samples: int = 0
    dual: Optional[object] = None
    diverged_at: Optional[int] = None
    runtime: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def fallback_rate(self) -> float:
        return self.fallbacks / self.samples if self.samples else 0.0


def make_metric(config: ExperimentConfig, env, policy, oracle, streams):
    kind = config.metric["kind"]
    if kind == "relerr_grid":
        if oracle is None:
            raise ValueError("relative-error metric needs an oracle approximator")
        return RelErrGrid.for_env(env, oracle, config.metric.get("grid_points", 256))
    if kind == "bellman_residual":
        size = config.metric.get("held_out", 10_000)
        traj = generate_trajectory(env, policy, size + 1, streams["heldout"])
        batch = WindowBatch.from_trajectory(traj, np.arange(size), 0)
        return BellmanResidualMetric(batch, config.gamma, config.mode, policy)
    return None


def train(config: ExperimentConfig, estimator: str, seed: int, oracle=None,
          trajectory: Optional[Trajectory] = None, replicate: int = 0,
          updates: Optional[int] = None) -> TrainResult:
    """Run one estimator arm for one seed; deterministic in ``(config, estimator, seed, replicate)``."""
    kind = config.estimator_kind(estimator)
    streams = seed_streams(seed, replicate)
    if config.is_online:
        return _train_online(config, kind, seed, streams, replicate)
    env = config.make_env()
    policy = config.make_policy(env)
    if trajectory is None:
        trajectory = generate_trajectory(env, policy, config.trajectory_length, streams["trajectory"])
    q = config.make_approximator(env, streams["init"])
    total = config.n_updates if updates is None else updates
    metric = make_metric(config, env, policy, oracle, streams)
    curve = LearningCurve(kind.label, _curve_seed(kind, seed, replicate), config.metric["kind"])
    start = time.perf_counter()
    curve.add(0, metric(q), 0.0)
    eval_policy = policy if config.mode == EVAL else None
    opt = make_optimizer(config.optimizer, q.n_params)
    n = kind.lookahead
    dual = beta_fn = None
    if kind.tag == "pd":
        dual = config.make_approximator(env, streams["dual"])
        beta_fn = power_schedule(config.pd.get("beta", 0.1), config.pd.get("beta_power", 0.0))
    fallbacks = samples = 0
    diverged = None
    for k in range(1, total + 1):
        batch = sample_batch(trajectory, config.batch_size, n, streams["batches"])
        try:
            if dual is not None:
                step = pd_update(batch, q, dual, config.gamma, beta_fn(k), config.mode, eval_policy,
                                 config.pd.get("dual_form", "verbatim"))
                _check_finite(step.dual_step, k, "dual step")
                dual.theta = dual.theta + step.dual_step
                grad = step.theta_grad
            else:
                est = estimate(kind, batch, q, config.gamma, env, eval_policy, streams["resample"])
                grad = est.grad
                fallbacks += est.fallbacks
            samples += len(batch)
            _check_finite(grad, k, "gradient")
            q.theta = opt.step(q.theta, grad)
            _check_finite(q.theta, k, "parameters")
        except NonFiniteError as exc:
            log.warning("%s seed %d: %s", kind.label, seed, exc)
            diverged = exc.step
            # keep the cadence so diverged runs stay comparable
            for kk in range(k, total + 1):
                if kk == k or kk % config.metric_every == 0 or kk == total:
                    curve.add(kk, float("inf"), time.perf_counter() - start)
            break
        if k % config.metric_every == 0 or k == total:
            curve.add(k, metric(q), time.perf_counter() - start)
    return TrainResult(curve, q, total if diverged is None else diverged, fallbacks, samples, dual,
                       diverged, time.perf_counter() - start)


def _curve_seed(kind: EstimatorKind, seed: int, replicate: int) -> int:
    """Primal-dual replicates are labelled ``1000 * seed + replicate``."""
    return 1000 * seed + replicate if kind.tag == "pd" else seed


def _train_online(config: ExperimentConfig, kind: EstimatorKind, seed: int, streams: dict,
                  replicate: int) -> TrainResult:
    """Epsilon-greedy acting interleaved with one replay update per environment step."""
    env = config.make_env()
    on = config.online
    episodes = on.get("episodes", 200)
    buffer = ReplayBuffer(on.get("replay_capacity", 10_000), env.state_dim)
    explore = ExplorationSchedule(**on.get("exploration", {}))
    learn_start = on.get("learn_start", config.batch_size)
    q = config.make_approximator(env, streams["init"])
    dual = beta_fn = None
    if kind.tag == "pd":
        dual = config.make_approximator(env, streams["dual"])
        beta_fn = power_schedule(config.pd.get("beta", 0.1), config.pd.get("beta_power", 0.75))
        opt = Sgd(config.pd.get("lr", 0.1), config.pd.get("lr_power", 0.5))
    else:
        opt = make_optimizer(config.optimizer, q.n_params)
    curve = LearningCurve(kind.label, _curve_seed(kind, seed, replicate), "episode_reward")
    n = kind.lookahead
    act, env_rng = streams["acting"], streams["env"]
    k = fallbacks = samples = 0
    diverged = None
    start = time.perf_counter()
    for ep in range(episodes):
        s = env.reset(env_rng)
        total_reward, t = 0.0, 0
        while True:
            if act.random() < explore(k):
                a = int(act.integers(env.n_actions))
            else:
                a = int(np.argmax(q.evaluate(s[None])[0]))
            s_next, r = env.step(s, a)
            t += 1
            total_reward += r
            term = bool(env.is_terminal(s_next))
            buffer.add(s, a, r, s_next, term, ep, ends_episode=t >= env.max_steps)
            if buffer.valid_count(n) >= learn_start:
                batch = sample_batch(buffer, config.batch_size, n, streams["batches"])
                try:
                    if dual is not None:
                        step = pd_update(batch, q, dual, config.gamma, beta_fn(k + 1), CTRL, None,
                                         config.pd.get("dual_form", "verbatim"))
                        _check_finite(step.dual_step, k + 1, "dual step")
                        dual.theta = dual.theta + step.dual_step
                        grad = step.theta_grad
                    else:
                        est = estimate(kind, batch, q, config.gamma, env, None, streams["resample"])
                        grad = est.grad
                        fallbacks += est.fallbacks
                    q.theta = opt.step(q.theta, grad)
                    _check_finite(q.theta, k + 1, "parameters")
                except NonFiniteError as exc:
                    log.warning("%s seed %d: %s", kind.label, seed, exc)
                    diverged = exc.step
                    break
                k += 1
                samples += len(batch)
            if term or t >= env.max_steps:
                break
            s = s_next
        curve.add(ep, total_reward, time.perf_counter() - start)
        if diverged is not None:
            break
    return TrainResult(curve, q, k, fallbacks, samples, dual, diverged, time.perf_counter() - start,
                       {"episodes": len(curve)})
