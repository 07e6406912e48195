"""Experiment configuration and learning-curve records."""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

from bffq.approx import CTRL, EVAL, MlpQ, TabularQ
from bffq.estimators import EstimatorKind
from bffq.mdp import (
    TWO_PI,
    CartPoleEnv,
    ContinuousRingEnv,
    TabularRingEnv,
    UniformPolicy,
    ring_policy,
)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

PRESET_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


_ENV_KINDS = ("continuous_ring", "tabular_ring", "cartpole")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment; serialized into every output."""

    name: str
    env: dict
    estimators: list
    approximator: dict
    optimizer: dict
    policy: dict = field(default_factory=lambda: {"kind": "ring"})
    mode: str = EVAL
    gamma: float = 0.8
    trajectory_length: int = 1_000_000
    full_trajectory_length: Optional[int] = None
    batch_size: int = 50
    updates: Optional[int] = None
    metric_every: int = 1000
    seeds: list = field(default_factory=lambda: [0])
    metric: dict = field(default_factory=lambda: {"kind": "relerr_grid"})
    oracle: dict = field(default_factory=dict)
    pd: dict = field(default_factory=dict)
    online: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    output_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    # -------------------------------------------------------------- I/O
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**copy.deepcopy(data))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a JSON or TOML file, or a preset name such as ``tabular-eval``."""
        p = Path(path)
        if not p.exists() and (PRESET_DIR / f"{path}.json").exists():
            p = PRESET_DIR / f"{path}.json"
        if not p.exists():
            raise ConfigError(f"no config file or preset named {path!r}")
        if p.suffix == ".toml":
            data = tomllib.loads(p.read_text())
        else:
            data = json.loads(p.read_text())
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = self.to_dict()
        for k, v in kw.items():
            if v is not None:
                data[k] = v
        return ExperimentConfig.from_dict(data)

    def at_full_scale(self) -> "ExperimentConfig":
        if not self.full_trajectory_length:
            return self
        return self.with_overrides(trajectory_length=self.full_trajectory_length, updates=None)

    # ------------------------------------------------------- validation
    def validate(self) -> None:
        kind = self.env.get("kind")
        if kind not in _ENV_KINDS:
            raise ConfigError(f"env.kind must be one of {_ENV_KINDS}, got {kind!r}")
        if self.mode not in (EVAL, CTRL):
            raise ConfigError(f"mode must be eval or ctrl, got {self.mode!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.trajectory_length < 1:
            raise ConfigError("trajectory_length must be positive")
        if self.updates is not None and self.updates < 0:
            raise ConfigError("updates must be non-negative")
        if self.metric_every < 1:
            raise ConfigError("metric_every must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.estimators:
            raise ConfigError("at least one estimator is required")
        for name in self.estimators:
            self.estimator_kind(name)
        if self.approximator.get("kind") not in ("tabular", "mlp"):
            raise ConfigError("approximator.kind must be tabular or mlp")
        if self.approximator["kind"] == "tabular" and kind != "tabular_ring":
            raise ConfigError("a tabular approximator needs the tabular ring")
        if self.optimizer.get("kind") not in ("sgd", "adam"):
            raise ConfigError("optimizer.kind must be sgd or adam")
        if self.metric.get("kind") not in ("relerr_grid", "episode_reward", "bellman_residual"):
            raise ConfigError(f"unknown metric {self.metric.get('kind')!r}")
        if self.metric["kind"] == "relerr_grid" and not self.oracle:
            raise ConfigError("relative-error metric needs an oracle section")
        if self.is_online and self.metric["kind"] != "episode_reward":
            raise ConfigError("cart-pole runs report episode rewards")

    # ---------------------------------------------------------- factories
    @property
    def is_online(self) -> bool:
        return self.env["kind"] == "cartpole"

    @property
    def n_updates(self) -> int:
        if self.updates is not None:
            return int(self.updates)
        return self.trajectory_length // self.batch_size

    def estimator_kind(self, name: str) -> EstimatorKind:
        try:
            return EstimatorKind.parse(name, self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def make_env(self, **override):
        spec = {**self.env, **override}
        kind = spec.pop("kind")
        if kind == "continuous_ring":
            spec.setdefault("epsilon", TWO_PI / 32)
            return ContinuousRingEnv(**spec)
        if kind == "tabular_ring":
            return TabularRingEnv(**spec)
        return CartPoleEnv(**spec)

    def make_policy(self, env):
        kind = self.policy.get("kind", "ring")
        if kind == "ring":
            return ring_policy()
        if kind == "uniform":
            return UniformPolicy(env.n_actions)
        raise ConfigError(f"unknown policy {kind!r}")

    def make_approximator(self, env, rng):
        spec = self.approximator
        if spec["kind"] == "tabular":
            return TabularQ.zeros(env.grid, env.n_actions)
        hidden = list(spec.get("hidden", [50, 50]))
        acts = spec.get("activation", "cos")
        acts = [acts] * len(hidden) if isinstance(acts, str) else list(acts)
        sizes = [env.state_dim] + hidden + [env.n_actions]
        return MlpQ.initialized(sizes, acts, rng, bias=spec.get("bias", True))


@dataclass
class LearningCurve:
    """Metric records of one run; ``wall_time`` is informational only."""

    estimator: str
    seed: int
    metric: str
    updates: list = field(default_factory=list)
    values: list = field(default_factory=list)
    wall_time: list = field(default_factory=list, compare=False)

    def add(self, update: int, value: float, wall: float = 0.0) -> None:
        if self.updates and update <= self.updates[-1]:
            raise ValueError("update indices must increase")
        self.updates.append(int(update))
        self.values.append(float(value))
        self.wall_time.append(float(wall))

    @property
    def final(self) -> float:
        return self.values[-1] if self.values else float("nan")

    def __len__(self) -> int:
        return len(self.updates)

    def to_dict(self) -> dict[str, Any]:
        return {"estimator": self.estimator, "seed": self.seed, "metric": self.metric,
                "updates": self.updates, "values": self.values}
