"""Ground-truth Q functions and the gradient-bias probe."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from bffq.approx import CTRL, EVAL, TabularQ, residual_grads, residuals
from bffq.config import ExperimentConfig
from bffq.mdp import RingGrid, TabularRingEnv, generate_trajectory


class OracleError(ValueError):
    pass


@dataclass
class ExactModel:
    """Transition tensor ``P[s, a, s']`` and expected reward ``R[s, a]`` on a ring grid."""

    P: np.ndarray
    R: np.ndarray
    samples: int  # per (s, a) entry; 0 means computed exactly
    grid: RingGrid
    next_reward: Optional[np.ndarray] = None  # r(s') when reward depends on s' only

    def __post_init__(self):
        if np.any(self.P < 0):
            raise OracleError("negative transition probability")
        if np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise OracleError("transition rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def _next_rewards(env, grid: RingGrid) -> np.ndarray:
    return np.asarray(env.reward(grid.points[:, None]), dtype=np.float64)


def exact_model(env: TabularRingEnv) -> ExactModel:
    P = env.transition_kernel()
    r = _next_rewards(env, env.grid)
    return ExactModel(P, P @ r, 0, env.grid, r)


def estimate_model(env: TabularRingEnv, samples: int = 50_000, seed: int = 0) -> ExactModel:
    """Monte Carlo transition frequencies, one independent stream per ``(s, a)`` entry."""
    grid = env.grid
    n, A = grid.n, env.n_actions
    streams = np.random.SeedSequence(seed).spawn(n * A)
    P = np.zeros((n, A, n))
    for s in range(n):
        start = np.full((samples, 1), grid.points[s])
        for a in range(A):
            rng = np.random.default_rng(streams[s * A + a])
            nxt = env.advance(start, np.full(samples, a), rng.standard_normal(samples))
            P[s, a] = np.bincount(grid.index(nxt), minlength=n) / samples
    r = _next_rewards(env, grid)
    return ExactModel(P, P @ r, samples, grid, r)


def policy_matrix(policy, grid: RingGrid) -> np.ndarray:
    return np.asarray(policy.probs(grid.points[:, None]), dtype=np.float64)


def exact_q_eval_tabular(model: ExactModel, policy, gamma: float) -> TabularQ:
    """Solve ``Q = R + gamma * P^pi Q`` by a dense linear solve."""
    if not 0.0 <= gamma < 1.0:
        raise OracleError("evaluation system is singular unless 0 <= gamma < 1")
    n, A = model.n_states, model.n_actions
    pi = policy_matrix(policy, model.grid) if not isinstance(policy, np.ndarray) else policy
    M = np.einsum("sax,xb->saxb", model.P, pi).reshape(n * A, n * A)
    lhs = np.eye(n * A) - gamma * M
    rhs = model.R.reshape(-1)
    q = np.linalg.solve(lhs, rhs)
    resid = np.max(np.abs(lhs @ q - rhs))
    if resid > 1e-10:
        raise OracleError(f"linear solve residual {resid:.3g} exceeds 1e-10")
    return TabularQ(q.reshape(n, A), model.grid)


def exact_q_ctrl_tabular(model: ExactModel, gamma: float, tol: float = 1e-10,
                         max_sweeps: int = 100_000, history: Optional[list] = None) -> TabularQ:
    """Value iteration ``Q <- R + gamma * P max_b Q`` until the sup-norm change is ``<= tol``."""
    if not 0.0 <= gamma < 1.0:
        raise OracleError("value iteration needs 0 <= gamma < 1")
    Q = np.zeros_like(model.R)
    for _ in range(max_sweeps):
        new = model.R + gamma * model.P @ Q.max(axis=1)
        change = float(np.max(np.abs(new - Q)))
        Q = new
        if history is not None:
            history.append(Q.copy())
        if change <= tol:
            return TabularQ(Q, model.grid)
    raise OracleError("value iteration did not converge")


def expected_residual(model: ExactModel, q, gamma: float, mode: str = EVAL,
                      policy=None) -> np.ndarray:
    """``E[j | s, a]`` under the model."""
    Q = q.values if isinstance(q, TabularQ) else np.asarray(q)
    if mode == EVAL:
        V = (policy_matrix(policy, model.grid) * Q).sum(axis=1)
    else:
        V = Q.max(axis=1)
    return model.R + gamma * model.P @ V - Q


# ------------------------------------------------------------ reference runs


def oracle_config(config: ExperimentConfig) -> ExperimentConfig:
    """The long uncorrelated-sampling run used as the continuous reference."""
    spec = config.oracle
    data = config.to_dict()
    data.update(
        name=f"{config.name}-reference",
        estimators=["US"],
        metric={"kind": "bellman_residual", "held_out": spec.get("held_out", 10_000)},
        trajectory_length=int(spec.get("trajectory_length", config.trajectory_length)),
        updates=spec.get("updates"),
        seeds=[int(spec.get("seed", 9_999))],
        metric_every=int(spec.get("metric_every", 10_000)),
        oracle={},
    )
    if "optimizer" in spec:
        data["optimizer"] = spec["optimizer"]
    return ExperimentConfig.from_dict(data)


def reference_q_continuous(config: ExperimentConfig, seed: Optional[int] = None):
    """Train US for a long time on its own trajectory; returns the approximator and run record."""
    from bffq.optim import train

    ref = oracle_config(config)
    env = ref.make_env()
    if not getattr(env, "supports_resampling", False):
        raise OracleError("reference runs need an environment that can re-simulate")
    seed = ref.seeds[0] if seed is None else seed
    result = train(ref, "US", seed)
    if result.diverged_at is not None:
        raise OracleError(f"reference run diverged at update {result.diverged_at}")
    return result.q, result


def compute_oracle(config: ExperimentConfig, seed: Optional[int] = None):
    """Dispatch on ``config.oracle["kind"]``; returns an approximator usable as ``Q*``."""
    spec = config.oracle
    kind = spec.get("kind")
    if kind in ("tabular_eval", "tabular_ctrl"):
        env = config.make_env()
        if spec.get("model", "monte_carlo") == "exact":
            model = exact_model(env)
        else:
            model = estimate_model(env, int(spec.get("samples", 50_000)),
                                   int(spec.get("seed", 0) if seed is None else seed))
        if kind == "tabular_eval":
            return exact_q_eval_tabular(model, config.make_policy(env), config.gamma)
        return exact_q_ctrl_tabular(model, config.gamma, float(spec.get("tol", 1e-10)))
    if kind == "reference_us":
        return reference_q_continuous(config, seed)[0]
    raise OracleError(f"unknown oracle kind {kind!r}")


# ------------------------------------------------------------ enumeration


@dataclass
class EnumeratedGradients:
    """Exact expectations of the three gradient estimators, plus the residual ``delta``."""

    us: np.ndarray
    sc: np.ndarray
    bff: np.ndarray
    delta: np.ndarray
    weights: np.ndarray  # rho(s, a)

    @property
    def sc_bias(self) -> float:
        return float(np.linalg.norm(self.sc - self.us))

    @property
    def bff_bias(self) -> float:
        return float(np.linalg.norm(self.bff - self.us))

    @property
    def residual_scale(self) -> float:
        return float(np.sum(self.weights * np.abs(self.delta)))


def stationary_weights(model: ExactModel, behaviour: np.ndarray) -> np.ndarray:
    """``rho(s, a) = d(s) * behaviour(a | s)`` with ``d`` stationary for the behaviour chain."""
    chain = np.einsum("sa,sax->sx", behaviour, model.P)
    vals, vecs = np.linalg.eig(chain.T)
    d = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    d = d / d.sum()
    return d[:, None] * behaviour


def _surrogate_weights(Q: np.ndarray, gamma: float, mode: str, target: Optional[np.ndarray]):
    """Row ``x`` holds ``gamma * w(x)`` placed on state ``x``: ``(n, n*A)``."""
    n, A = Q.shape
    if mode == EVAL:
        w = target
    else:
        w = np.zeros_like(Q)
        w[np.arange(n), np.argmax(Q, axis=1)] = 1.0
    W = np.zeros((n, n, A))
    W[np.arange(n), np.arange(n)] = gamma * w
    return W.reshape(n, n * A)


def enumerate_gradients(model: ExactModel, Q: np.ndarray, gamma: float, mode: str = EVAL,
                        target: Optional[np.ndarray] = None, behaviour: Optional[np.ndarray] = None,
                        weighting: str = "stationary", pairs: bool = True) -> EnumeratedGradients:
    """Brute-force expectations over every transition outcome.

    ``target`` is the evaluated policy table (eval mode); ``behaviour`` drives the
    trajectory and therefore the borrowed increment.  With ``pairs`` the unbiased
    expectation is summed over independent next-state pairs instead of factored.
    """
    Q = np.asarray(Q, dtype=np.float64)
    n, A = Q.shape
    if behaviour is None:
        behaviour = target if mode == EVAL else np.full((n, A), 1.0 / A)
    P = model.P
    if model.next_reward is None:
        raise OracleError("enumeration needs rewards as a function of the next state")
    V = (target * Q).sum(axis=1) if mode == EVAL else Q.max(axis=1)
    # j[s, a, x] for every next state x
    J = model.next_reward[None, None, :] + gamma * V[None, None, :] - Q[:, :, None]
    W = _surrogate_weights(Q, gamma, mode, target)
    E = np.eye(n * A).reshape(n, A, n * A)
    G = W[None, None, :, :] - E[:, :, None, :]  # grad j(s, a, x)
    if weighting == "stationary":
        rho = stationary_weights(model, behaviour)
    elif weighting == "uniform":
        rho = np.full((n, A), 1.0 / (n * A))
    else:
        raise OracleError(f"unknown weighting {weighting!r}")
    delta = np.einsum("sax,sax->sa", P, J)
    if pairs:
        us = np.einsum("sa,sax,sax,say,sayk->k", rho, P, J, P, G, optimize=True)
    else:
        us = np.einsum("sa,sa,sak->k", rho, delta, np.einsum("sax,saxk->sak", P, G), optimize=True)
    sc = np.einsum("sa,sax,sax,saxk->k", rho, P, J, G, optimize=True)
    # displacement law of the next increment from x: D[x, k] = P(x -> x + k)
    D = np.einsum("xb,xby->xy", behaviour, P)
    D = D[np.arange(n)[:, None], (np.arange(n)[:, None] + np.arange(n)[None, :]) % n]
    shifted = W[(np.arange(n)[:, None] + np.arange(n)[None, :]) % n]  # [s, k] -> W[s + k]
    borrowed = np.einsum("xk,skm->sxm", D, shifted, optimize=True)
    GB = borrowed[:, None, :, :] - E[:, :, None, :]
    bff = np.einsum("sa,sax,sax,saxk->k", rho, P, J, GB, optimize=True)
    return EnumeratedGradients(us, sc, bff, delta, rho)


def expected_gradient_factored(model: ExactModel, Q: np.ndarray, gamma: float, mode: str = EVAL,
                               target=None, rho: Optional[np.ndarray] = None) -> np.ndarray:
    """``sum rho * delta * grad delta`` assembled from ``P`` directly."""
    n, A = Q.shape
    if rho is None:
        rho = np.full((n, A), 1.0 / (n * A))
    V = (target * Q).sum(axis=1) if mode == EVAL else Q.max(axis=1)
    delta = model.R + gamma * model.P @ V - Q
    W = _surrogate_weights(Q, gamma, mode, target)
    grad_delta = np.einsum("sax,xk->sak", model.P, W).reshape(n * A, n * A) - np.eye(n * A)
    return (rho * delta).reshape(-1) @ grad_delta


def descent_snapshots(model: ExactModel, gamma: float, lr: float, steps: Sequence[int],
                      mode: str = EVAL, target=None, behaviour=None) -> dict:
    """Parameters along exact expected-gradient descent from zero, at the requested steps."""
    n, A = model.R.shape
    Q = np.zeros((n, A))
    out, want = {}, sorted(set(int(s) for s in steps))
    k = 0
    for stop in want:
        while k < stop:
            g = enumerate_gradients(model, Q, gamma, mode, target, behaviour, pairs=False).us
            Q = Q - lr * g.reshape(n, A)
            k += 1
        out[stop] = Q.copy()
    return out


# ------------------------------------------------------------ probe reports


@dataclass
class BiasRecord:
    epsilon: float
    snapshot: str
    sc_bias: float
    bff_bias: float
    sc_stderr: float
    bff_stderr: float
    residual_scale: float
    samples: int
    method: str
    sc_inconclusive: bool = False
    bff_inconclusive: bool = False


@dataclass
class BiasProbeReport:
    records: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def find(self, epsilon: float, snapshot: str) -> BiasRecord:
        for r in self.records:
            if r.snapshot == snapshot and abs(r.epsilon - epsilon) <= 1e-15 * max(1.0, epsilon):
                return r
        raise KeyError((epsilon, snapshot))

    def to_dict(self) -> dict:
        return {"settings": self.settings, "records": [asdict(r) for r in self.records]}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def read(cls, path) -> "BiasProbeReport":
        data = json.loads(Path(path).read_text())
        return cls([BiasRecord(**r) for r in data["records"]], data["settings"])


def probe_tabular(env_for_eps, epsilons: Sequence[float], snapshots: dict, gamma: float,
                  mode: str = EVAL, policy=None, behaviour=None,
                  weighting: str = "stationary") -> BiasProbeReport:
    """Exact-enumeration probe; ``env_for_eps(eps)`` builds the tabular ring at each scale."""
    report = BiasProbeReport(settings={"method": "enumeration", "gamma": gamma, "mode": mode,
                                       "weighting": weighting})
    for eps in epsilons:
        env = env_for_eps(eps)
        model = exact_model(env)
        target = policy_matrix(policy, env.grid) if policy is not None else None
        beh = policy_matrix(behaviour, env.grid) if behaviour is not None else None
        for name, Q in snapshots.items():
            Q = Q.values if isinstance(Q, TabularQ) else np.asarray(Q)
            g = enumerate_gradients(model, Q, gamma, mode, target, beh, weighting)
            report.records.append(BiasRecord(float(eps), name, g.sc_bias, g.bff_bias, 0.0, 0.0,
                                             g.residual_scale, 0, "enumeration"))
    return report


def probe_monte_carlo(env_for_eps, epsilons: Sequence[float], snapshots: dict, gamma: float,
                      samples: int, rng: np.random.Generator, mode: str = EVAL, policy=None,
                      behaviour=None, burn_in: int = 1000) -> BiasProbeReport:
    """Sampled probe on a stationary trajectory; paired differences against a fresh redraw.

    Each bias is the norm of a mean paired difference; its standard error is the
    norm of the per-coordinate standard errors.  A bias not exceeding its error
    (or a rounding-level floor) is flagged inconclusive.
    """
    report = BiasProbeReport(settings={"method": "monte_carlo", "gamma": gamma, "mode": mode,
                                       "samples": samples})
    beh = behaviour if behaviour is not None else policy
    for eps in epsilons:
        env = env_for_eps(eps)
        traj = generate_trajectory(env, beh, burn_in + samples + 2, rng)
        from bffq.estimators import WindowBatch, bff_surrogates

        batch = WindowBatch.from_trajectory(traj, burn_in + np.arange(samples), 1)
        redraw = env.resample_batch(batch.states, batch.actions, rng)
        borrowed, _ = bff_surrogates(batch, (1.0,), env)
        target = policy if mode == EVAL else None
        for name, q in snapshots.items():
            j = residuals(q, batch.states, batch.actions, batch.next_state, batch.rewards, gamma,
                          mode, target, batch.terminal)
            args = (q, batch.states, batch.actions)

            def grads(sur):
                return j[:, None] * residual_grads(*args, sur, gamma, mode, target, batch.terminal)

            us = grads(redraw)
            # differences at rounding level are indistinguishable from zero
            floor = 1e-12 * max(1.0, float(np.linalg.norm(us.mean(axis=0))))
            rec = {}
            for label, est in (("sc", grads(batch.next_state)), ("bff", grads(borrowed[:, 0]))):
                diff = est - us
                mean = diff.mean(axis=0)
                se = diff.std(axis=0, ddof=1) / np.sqrt(samples)
                rec[label] = (float(np.linalg.norm(mean)), float(np.linalg.norm(se)))
            report.records.append(BiasRecord(
                float(eps), name, rec["sc"][0], rec["bff"][0], rec["sc"][1], rec["bff"][1],
                float(np.mean(np.abs(j))), samples, "monte_carlo",
                rec["sc"][0] <= max(rec["sc"][1], floor), rec["bff"][0] <= max(rec["bff"][1], floor)))
    return report


def bias_probe(config: ExperimentConfig, snapshots: Optional[dict] = None) -> BiasProbeReport:
    """Probe driven by ``config.probe``: exact enumeration on tabular rings, sampling otherwise."""
    spec = config.probe
    base = dict(config.env)
    kind = base.pop("kind")
    eps0 = float(spec.get("epsilon0", 2 * np.pi / 32))
    epsilons = spec.get("epsilons") or [eps0, eps0 / 2, eps0 / 4]
    policy = config.make_policy(config.make_env())

    def env_for_eps(eps):
        return config.make_env(epsilon=eps)

    if kind == "tabular_ring":
        if snapshots is None:
            env = config.make_env(epsilon=float(spec.get("snapshot_epsilon", epsilons[0])))
            model = exact_model(env)
            target = policy_matrix(policy, env.grid)
            snaps = descent_snapshots(model, config.gamma, float(spec.get("descent_lr", 10.0)),
                                      [0, int(spec.get("descent_steps", 500))], config.mode,
                                      target if config.mode == EVAL else None)
            if config.mode == EVAL:
                q_star = exact_q_eval_tabular(model, target, config.gamma).values
            else:
                q_star = exact_q_ctrl_tabular(model, config.gamma).values
            snapshots = {"initial": snaps[0], "converged": snaps[max(snaps)], "fixed_point": q_star}
        report = probe_tabular(env_for_eps, epsilons, snapshots, config.gamma, config.mode,
                               policy if config.mode == EVAL else None,
                               None if config.mode == EVAL else policy,
                               spec.get("weighting", "stationary"))
    else:
        if snapshots is None:
            raise OracleError("continuous probes need parameter snapshots")
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        report = probe_monte_carlo(env_for_eps, epsilons, snapshots, config.gamma,
                                   int(spec.get("samples", 100_000)), rng, config.mode,
                                   policy if config.mode == EVAL else None, policy)
    report.settings.update(env=kind, epsilons=[float(e) for e in epsilons])
    return report
