"""Q-function approximators and Bellman residuals.

Both approximators expose the same small surface used by the estimators:

``evaluate(S) -> (B, A)``
    action values at a batch of states;
``vjp(S, cot) -> (B, d_theta)``
    per-sample ``sum_b cot[i, b] * dQ(S_i, b)/dtheta``.

Per-sample gradients (rather than a pre-reduced batch gradient) keep batch
means reproducible against member-by-member evaluation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from bffq.mdp import RingGrid

EVAL = "eval"
CTRL = "ctrl"


class TabularQ:
    """Matrix ``Q[s, a]`` over a ring grid."""

    def __init__(self, values: np.ndarray, grid: RingGrid):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != grid.n:
            raise ValueError(f"table shape {values.shape} does not match a {grid.n}-point grid")
        if not np.all(np.isfinite(values)):
            raise ValueError("Q table has non-finite entries")
        self.values = values.copy()
        self.grid = grid

    @classmethod
    def zeros(cls, grid: RingGrid, n_actions: int = 2) -> "TabularQ":
        return cls(np.zeros((grid.n, n_actions)), grid)

    @property
    def n_actions(self) -> int:
        return self.values.shape[1]

    @property
    def n_params(self) -> int:
        return self.values.size

    @property
    def theta(self) -> np.ndarray:
        return self.values.reshape(-1)

    @theta.setter
    def theta(self, value) -> None:
        self.values = np.asarray(value, dtype=np.float64).reshape(self.values.shape).copy()

    def copy(self) -> "TabularQ":
        return TabularQ(self.values, self.grid)

    def evaluate(self, states) -> np.ndarray:
        return self.values[self.grid.index(np.atleast_2d(states))]

    def vjp(self, states, cot) -> np.ndarray:
        idx = self.grid.index(np.atleast_2d(states))
        cot = np.asarray(cot, dtype=np.float64)
        out = np.zeros((len(idx),) + self.values.shape)
        out[np.arange(len(idx)), idx] = cot
        return out.reshape(len(idx), -1)

    def vjp_sum(self, states, cot) -> np.ndarray:
        """``sum_b`` of the per-sample products, accumulated in batch order."""
        idx = self.grid.index(np.atleast_2d(states))
        out = np.zeros_like(self.values)
        np.add.at(out, idx, np.asarray(cot, dtype=np.float64))
        return out.reshape(-1)

    def spec(self) -> dict:
        return {"kind": "tabular", "n_states": self.grid.n, "n_actions": self.n_actions}


_ACTIVATIONS = {
    "cos": (np.cos, lambda z: -np.sin(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


class MlpQ:
    """Fully connected network ``state -> Q(state, .)``.

    ``sizes`` lists layer widths including input and output;
    ``activations`` gives one tag per hidden layer (the output layer is the
    identity).  With ``onehot`` set to a grid, inputs are one-hot grid
    indicators, so a network without hidden layers or biases is exactly the
    tabular parameterization ``Q(s, a) = Phi(s, a)^T theta``.
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], theta=None,
                 bias: bool = True, onehot: Optional[RingGrid] = None):
        sizes = [int(k) for k in sizes]
        if len(activations) != len(sizes) - 2:
            raise ValueError("need one activation per hidden layer")
        for act in activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if onehot is not None and sizes[0] != onehot.n:
            raise ValueError("one-hot input width must equal the grid size")
        self.sizes = sizes
        self.activations = list(activations)
        self.bias = bias
        self.onehot = onehot
        self._shapes = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self._shapes.append((fan_in, fan_out))
        n = sum(i * o + (o if bias else 0) for i, o in self._shapes)
        self.theta = np.zeros(n) if theta is None else np.asarray(theta, dtype=np.float64).copy()
        if self.theta.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.theta.shape}")

    @classmethod
    def initialized(cls, sizes, activations, rng: np.random.Generator, bias: bool = True,
                    onehot: Optional[RingGrid] = None) -> "MlpQ":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        net = cls(sizes, activations, bias=bias, onehot=onehot)
        chunks = []
        for fan_in, fan_out in net._shapes:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            if bias:
                chunks.append(rng.uniform(-bound, bound, size=fan_out))
        net.theta = np.concatenate(chunks)
        return net

    @property
    def n_actions(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return self.theta.size

    def copy(self) -> "MlpQ":
        return MlpQ(self.sizes, self.activations, self.theta, self.bias, self.onehot)

    def layers(self, theta=None):
        theta = self.theta if theta is None else theta
        out, pos = [], 0
        for fan_in, fan_out in self._shapes:
            W = theta[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = None
            if self.bias:
                b = theta[pos:pos + fan_out]
                pos += fan_out
            out.append((W, b))
        return out

    def features(self, states) -> np.ndarray:
        S = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.onehot is None:
            return S
        X = np.zeros((S.shape[0], self.onehot.n))
        X[np.arange(S.shape[0]), self.onehot.index(S)] = 1.0
        return X

    def _forward(self, states):
        x = self.features(states)
        inputs, pre = [x], []
        layers = self.layers()
        for k, (W, b) in enumerate(layers):
            z = x @ W
            if b is not None:
                z = z + b
            if k < len(layers) - 1:
                pre.append(z)
                x = _ACTIVATIONS[self.activations[k]][0](z)
                inputs.append(x)
            else:
                x = z
        return x, inputs, pre

    def evaluate(self, states) -> np.ndarray:
        return self._forward(states)[0]

    def vjp(self, states, cot) -> np.ndarray:
        _, inputs, pre = self._forward(states)
        layers = self.layers()
        delta = np.asarray(cot, dtype=np.float64)
        B = delta.shape[0]
        grads = [None] * len(layers)
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            gW = (inputs[k][:, :, None] * delta[:, None, :]).reshape(B, -1)
            grads[k] = (gW, delta) if self.bias else (gW,)
            if k:
                delta = (delta @ W.T) * _ACTIVATIONS[self.activations[k - 1]][1](pre[k - 1])
        return np.concatenate([g for pair in grads for g in pair], axis=1)

    def vjp_sum(self, states, cot) -> np.ndarray:
        """Batch-summed ``vjp`` without forming per-sample gradients."""
        _, inputs, pre = self._forward(states)
        layers = self.layers()
        delta = np.asarray(cot, dtype=np.float64)
        grads = [None] * len(layers)
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            gW = (inputs[k].T @ delta).reshape(-1)
            grads[k] = (gW, delta.sum(axis=0)) if self.bias else (gW,)
            if k:
                delta = (delta @ W.T) * _ACTIVATIONS[self.activations[k - 1]][1](pre[k - 1])
        return np.concatenate([g for pair in grads for g in pair])

    def spec(self) -> dict:
        return {
            "kind": "mlp",
            "sizes": self.sizes,
            "activations": self.activations,
            "bias": self.bias,
            "onehot": None if self.onehot is None else self.onehot.n,
        }


def approximator_from_spec(spec: dict, theta=None):
    if spec["kind"] == "tabular":
        grid = RingGrid(spec["n_states"])
        values = np.zeros((grid.n, spec["n_actions"])) if theta is None else np.reshape(theta, (grid.n, -1))
        return TabularQ(values, grid)
    onehot = RingGrid(spec["onehot"]) if spec.get("onehot") else None
    return MlpQ(spec["sizes"], spec["activations"], theta, spec.get("bias", True), onehot)


def evaluate(q, s) -> np.ndarray:
    """``Q(s, .)`` for a single state."""
    return q.evaluate(np.asarray(s, dtype=np.float64)[None])[0]


# ---------------------------------------------------------------- residuals


@dataclass(frozen=True)
class Residual:
    value: float
    kind: str


def bootstrap_weights(q, next_states, mode: str, policy=None, terminal=None,
                      values: Optional[np.ndarray] = None) -> np.ndarray:
    """Weights ``w`` with bootstrap ``sum_b w_b Q(s', b)``.

    Policy probabilities in eval mode; a one-hot on the lowest-index maximizer
    in ctrl mode.  Terminal next states bootstrap to zero.
    """
    if mode == EVAL:
        w = np.array(policy.probs(next_states), dtype=np.float64)
    elif mode == CTRL:
        if values is None:
            values = q.evaluate(next_states)
        w = np.zeros_like(values)
        w[np.arange(len(values)), np.argmax(values, axis=1)] = 1.0
    else:
        raise ValueError(f"unknown residual mode {mode!r}")
    if terminal is not None:
        w[np.asarray(terminal, dtype=bool)] = 0.0
    return w


def residuals(q, states, actions, next_states, rewards, gamma: float, mode: str,
              policy=None, terminal=None) -> np.ndarray:
    """Batched ``j = r + gamma * bootstrap(s') - Q(s, a)``."""
    q_next = q.evaluate(next_states)
    w = bootstrap_weights(q, next_states, mode, policy, terminal, values=q_next)
    if mode == CTRL:
        boot = np.where(w.any(axis=1), q_next.max(axis=1), 0.0)
    else:
        boot = (w * q_next).sum(axis=1)
    q_sa = q.evaluate(states)[np.arange(len(actions)), actions]
    return np.asarray(rewards, dtype=np.float64) + gamma * boot - q_sa


def residual_eval(q, policy, s, a: int, s_next, r_val: float, gamma: float,
                  terminal: bool = False) -> Residual:
    j = residuals(q, np.asarray(s)[None], np.array([a]), np.asarray(s_next)[None],
                  np.array([r_val]), gamma, EVAL, policy, np.array([terminal]))
    return Residual(float(j[0]), EVAL)


def residual_ctrl(q, s, a: int, s_next, r_val: float, gamma: float,
                  terminal: bool = False) -> Residual:
    j = residuals(q, np.asarray(s)[None], np.array([a]), np.asarray(s_next)[None],
                  np.array([r_val]), gamma, CTRL, None, np.array([terminal]))
    return Residual(float(j[0]), CTRL)


def residual_grads(q, states, actions, surrogates, gamma: float, mode: str, policy=None,
                   terminal=None) -> np.ndarray:
    """Per-sample ``grad_theta j(s, a, s'')`` at the supplied surrogate next states."""
    w = bootstrap_weights(q, surrogates, mode, policy, terminal)
    e_a = np.zeros((len(actions), q.n_actions))
    e_a[np.arange(len(actions)), actions] = 1.0
    return gamma * q.vjp(surrogates, w) - q.vjp(states, e_a)


def grad_residual(q, policy_or_mode, s, a: int, s_surrogate, gamma: float,
                  terminal: bool = False) -> np.ndarray:
    """``grad_theta j`` for one transition; pass a policy for eval, ``"ctrl"`` for control."""
    if isinstance(policy_or_mode, str):
        mode, policy = policy_or_mode, None
    else:
        mode, policy = EVAL, policy_or_mode
    g = residual_grads(q, np.asarray(s)[None], np.array([a]), np.asarray(s_surrogate)[None],
                       gamma, mode, policy, np.array([terminal]))
    return g[0]


# -------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"BFFQCKP1"


def save_checkpoint(q, path, seed: Optional[int] = None, step: int = 0, **extra) -> None:
    """JSON header (architecture, seed, step) followed by little-endian f64 parameters."""
    header = {"architecture": q.spec(), "seed": seed, "step": int(step), "n_params": q.n_params}
    header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(q.theta, dtype="<f8").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (size,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + size])
    theta = np.frombuffer(raw, dtype="<f8", offset=12 + size).astype(np.float64)
    return approximator_from_spec(header["architecture"], theta), header
