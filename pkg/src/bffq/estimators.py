"""Stochastic gradient estimators for Bellman residual minimization.

Every estimator has the form ``j(s_m, a_m, s_{m+1}) * grad j(s_m, a_m, s'')``
and differs only in the surrogate ``s''`` for an independent next state:

* US  - a genuine redraw from the simulator (unbiased, impractical);
* SC  - the observed ``s_{m+1}`` again;
* BFF - ``s_m + (s_{m+i+1} - s_{m+i})``, averaged over ``i = 1..n`` with
  weights ``alpha_i``.

The primal-dual update avoids the second sample through a dual function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from bffq.approx import CTRL, EVAL, bootstrap_weights, residuals
from bffq.mdp import Trajectory, TrajectoryWindow


class UnsupportedEstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class EstimatorKind:
    tag: str  # "us" | "sc" | "bff" | "pd"
    mode: str = EVAL
    weights: tuple = (1.0,)

    def __post_init__(self):
        if self.tag not in ("us", "sc", "bff", "pd"):
            raise ValueError(f"unknown estimator {self.tag!r}")
        if self.mode not in (EVAL, CTRL):
            raise ValueError(f"unknown mode {self.mode!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) < 1 or not np.all(np.isfinite(w)):
            raise ValueError("BFF weights must be a non-empty finite sequence")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"BFF weights must sum to 1, got {w.sum()!r}")

    @classmethod
    def parse(cls, name: str, mode: str = EVAL, weights: Optional[Sequence[float]] = None):
        """Parse labels such as ``"US"``, ``"SC"``, ``"PD"``, ``"BFF"``, ``"4BFF"``."""
        key = name.strip().lower()
        if key.endswith("bff"):
            n = int(key[:-3] or 1)
            if weights is None:
                weights = [1.0 / n] * n
            if len(weights) != n:
                raise ValueError(f"{name}: expected {n} weights, got {len(weights)}")
            return cls("bff", mode, tuple(float(x) for x in weights))
        return cls(key, mode)

    @property
    def lookahead(self) -> int:
        return len(self.weights) if self.tag == "bff" else 0

    @property
    def label(self) -> str:
        if self.tag == "bff":
            return "BFF" if self.lookahead == 1 else f"{self.lookahead}BFF"
        return self.tag.upper()


@dataclass
class GradientEstimate:
    grad: np.ndarray
    j_value: np.ndarray  # residual per batch member
    estimator: EstimatorKind
    fallbacks: int = 0
    per_sample: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class WindowBatch:
    """Stacked windows; ``next_states[:, i]`` is ``s_{m+i+1}``.

    ``available[k]`` counts the future increments present for member ``k``;
    slots past it repeat ``s_{m+1}`` and are never read as increments.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    available: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def next_state(self) -> np.ndarray:
        return self.next_states[:, 0]

    @classmethod
    def from_windows(cls, windows: Sequence[TrajectoryWindow], n: Optional[int] = None):
        n = max(w.lookahead for w in windows) if n is None else n
        d = windows[0].state.shape[0]
        nxt = np.empty((len(windows), n + 1, d))
        for k, w in enumerate(windows):
            L = min(w.lookahead, n)
            nxt[k, :L + 1] = w.next_states[:L + 1]
            nxt[k, L + 1:] = w.next_states[0]
        return cls(
            states=np.stack([w.state for w in windows]),
            actions=np.array([w.action for w in windows], dtype=np.int64),
            rewards=np.array([w.reward for w in windows]),
            next_states=nxt,
            available=np.array([min(w.lookahead, n) for w in windows], dtype=np.int64),
            terminal=np.array([w.terminal for w in windows], dtype=bool),
        )

    @classmethod
    def from_trajectory(cls, traj: Trajectory, idx: np.ndarray, n: int):
        idx = np.asarray(idx, dtype=np.int64)
        avail = np.minimum(traj.lookahead()[idx], n)
        offs = np.arange(n + 1)
        rows = idx[:, None] + np.minimum(offs[None, :], avail[:, None])
        nxt = traj.next_states[rows]
        fill = offs[None, :] > avail[:, None]
        nxt[fill] = np.broadcast_to(traj.next_states[idx][:, None, :], nxt.shape)[fill]
        return cls(traj.states[idx], traj.actions[idx], traj.rewards[idx], nxt, avail,
                   traj.terminals[idx])


def _as_batch(window_or_batch) -> WindowBatch:
    if isinstance(window_or_batch, WindowBatch):
        return window_or_batch
    return WindowBatch.from_windows([window_or_batch])


def bff_surrogates(batch: WindowBatch, weights: Sequence[float], env):
    """Surrogate next states ``(B, n, d)`` and the count of sample-cloning fallbacks.

    Increments missing because the episode ended are replaced by ``s_{m+1}``.
    """
    n = len(weights)
    B, d = batch.states.shape
    last = batch.next_states.shape[1] - 1
    out = np.empty((B, n, d))
    short = np.zeros(B, dtype=bool)
    for i in range(1, n + 1):
        ok = batch.available >= i
        short |= ~ok
        borrowed = env.borrow(batch.states, batch.next_states[:, min(i - 1, last)],
                              batch.next_states[:, min(i, last)])
        out[:, i - 1] = np.where(ok[:, None], borrowed, batch.next_state)
    return out, int(short.sum())


def _combine(q, batch: WindowBatch, surrogates: np.ndarray, weights: np.ndarray, gamma: float,
             mode: str, policy, kind: EstimatorKind, fallbacks: int,
             per_sample: bool = False) -> GradientEstimate:
    """``j(s_{m+1}) * sum_i alpha_i grad j(s''_i)`` per sample, then the batch mean.

    The mean is contracted into a single backward pass; ``per_sample`` also
    returns the individual products.
    """
    B, n, d = surrogates.shape
    j = residuals(q, batch.states, batch.actions, batch.next_state, batch.rewards, gamma, mode,
                  policy, batch.terminal)
    flat = surrogates.reshape(B * n, d)
    w = bootstrap_weights(q, flat, mode, policy, np.repeat(batch.terminal, n)).reshape(B, n, -1)
    w = gamma * w * np.asarray(weights)[None, :, None]
    e_a = np.zeros((B, q.n_actions))
    e_a[np.arange(B), batch.actions] = 1.0
    states = np.concatenate([flat, batch.states])
    cot = np.concatenate([w.reshape(B * n, -1), -e_a])
    scale = np.concatenate([np.repeat(j, n), j])[:, None]
    grad = q.vjp_sum(states, cot * scale) / B
    rows = None
    if per_sample:
        g = q.vjp(states, cot)
        grad_j = g[B * n:] + g[:B * n].reshape(B, n, -1).sum(axis=1)
        rows = j[:, None] * grad_j
    return GradientEstimate(grad, j, kind, fallbacks, rows)


def us_gradient(window, q, policy, gamma: float, env, rng: np.random.Generator,
                mode: str = EVAL, per_sample: bool = False) -> GradientEstimate:
    """Uncorrelated sampling: the gradient factor uses a fresh simulator draw."""
    if not getattr(env, "supports_resampling", False):
        raise UnsupportedEstimatorError("uncorrelated sampling needs an environment that can re-simulate")
    batch = _as_batch(window)
    redraw = env.resample_batch(batch.states, batch.actions, rng)
    return _combine(q, batch, redraw[:, None], np.ones(1), gamma, mode, policy,
                    EstimatorKind("us", mode), 0, per_sample)


def sc_gradient(window, q, policy, gamma: float, mode: str = EVAL,
                per_sample: bool = False) -> GradientEstimate:
    """Sample cloning: both factors at the observed next state."""
    batch = _as_batch(window)
    return _combine(q, batch, batch.next_state[:, None], np.ones(1), gamma, mode, policy,
                    EstimatorKind("sc", mode), 0, per_sample)


def nbff_gradient(window, q, policy, gamma: float, weights: Sequence[float], env,
                  mode: str = EVAL, per_sample: bool = False) -> GradientEstimate:
    kind = EstimatorKind("bff", mode, tuple(float(x) for x in weights))
    batch = _as_batch(window)
    surrogates, fallbacks = bff_surrogates(batch, kind.weights, env)
    return _combine(q, batch, surrogates, np.asarray(kind.weights), gamma, mode, policy, kind,
                    fallbacks, per_sample)


def bff_gradient(window, q, policy, gamma: float, env, mode: str = EVAL,
                 per_sample: bool = False) -> GradientEstimate:
    return nbff_gradient(window, q, policy, gamma, (1.0,), env, mode, per_sample)


def us_gradient_ctrl(window, q, gamma, env, rng):
    return us_gradient(window, q, None, gamma, env, rng, CTRL)


def sc_gradient_ctrl(window, q, gamma):
    return sc_gradient(window, q, None, gamma, CTRL)


def bff_gradient_ctrl(window, q, gamma, env):
    return bff_gradient(window, q, None, gamma, env, CTRL)


def nbff_gradient_ctrl(window, q, gamma, weights, env):
    return nbff_gradient(window, q, None, gamma, weights, env, CTRL)


def estimate(kind: EstimatorKind, batch: WindowBatch, q, gamma: float, env, policy=None,
             rng: Optional[np.random.Generator] = None) -> GradientEstimate:
    """Dispatch on ``kind`` for the three single-approximator estimators."""
    if kind.tag == "us":
        return us_gradient(batch, q, policy, gamma, env, rng, kind.mode)
    if kind.tag == "sc":
        return sc_gradient(batch, q, policy, gamma, kind.mode)
    if kind.tag == "bff":
        return nbff_gradient(batch, q, policy, gamma, kind.weights, env, kind.mode)
    raise ValueError("primal-dual needs pd_update")


# ----------------------------------------------------------- primal-dual


@dataclass
class PDStep:
    dual_step: np.ndarray  # added to omega
    theta_grad: np.ndarray  # descended with the primal step size
    j_value: np.ndarray


def pd_update(window, q, dual, gamma: float, beta: float, mode: str = EVAL, policy=None,
              dual_form: str = "verbatim") -> PDStep:
    """One primal-dual step on ``min_theta max_omega E[delta*y - y^2/2]``.

    ``dual_form="verbatim"`` uses ``omega + beta*j*grad y - y*grad y``; ``"scaled"``
    puts ``beta`` on both terms.  The primal gradient is ``grad j * y`` with ``y``
    evaluated at the already-updated dual parameters.
    """
    batch = _as_batch(window)
    B = len(batch)
    rows = np.arange(B)
    j = residuals(q, batch.states, batch.actions, batch.next_state, batch.rewards, gamma, mode,
                  policy, batch.terminal)
    e_a = np.zeros((B, dual.n_actions))
    e_a[rows, batch.actions] = 1.0
    y = dual.evaluate(batch.states)[rows, batch.actions]
    if dual_form == "verbatim":
        coef = beta * j - y
    elif dual_form == "scaled":
        coef = beta * (j - y)
    else:
        raise ValueError(f"unknown dual form {dual_form!r}")
    dual_step = dual.vjp_sum(batch.states, e_a * coef[:, None]) / B
    ahead = dual.copy()
    ahead.theta = dual.theta + dual_step
    y_new = ahead.evaluate(batch.states)[rows, batch.actions]
    w = gamma * bootstrap_weights(q, batch.next_state, mode, policy, batch.terminal)
    states = np.concatenate([batch.next_state, batch.states])
    cot = np.concatenate([w * y_new[:, None], -e_a * y_new[:, None]])
    theta_grad = q.vjp_sum(states, cot) / B
    return PDStep(dual_step, theta_grad, j)


def power_schedule(scale: float, power: float):
    """``k -> scale * k**(-power)`` for update counter ``k >= 1``."""
    return lambda k: scale * math.pow(max(k, 1), -power)
