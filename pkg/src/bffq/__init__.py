"""Bellman residual minimization with borrowing-from-the-future gradients."""

from bffq.mdp import (
    CartPoleEnv,
    ContinuousRingEnv,
    EpsilonGreedyPolicy,
    FixedPolicy,
    RingGrid,
    TabularRingEnv,
    Trajectory,
    TrajectoryWindow,
    UniformPolicy,
    generate_trajectory,
    ring_policy,
    window,
)
from bffq.approx import MlpQ, TabularQ

__all__ = [
    "CartPoleEnv",
    "ContinuousRingEnv",
    "EpsilonGreedyPolicy",
    "FixedPolicy",
    "MlpQ",
    "RingGrid",
    "TabularQ",
    "TabularRingEnv",
    "Trajectory",
    "TrajectoryWindow",
    "UniformPolicy",
    "generate_trajectory",
    "ring_policy",
    "window",
]

__version__ = "0.1.0"
