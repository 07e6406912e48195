"""Experiment runner, result emission and cross-method comparison."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from bffq.approx import save_checkpoint
from bffq.config import ConfigError, ExperimentConfig, LearningCurve
from bffq.mdp import generate_trajectory
from bffq.optim import seed_streams, train

log = logging.getLogger(__name__)

CSV_HEADER = ("update", "seed", "metric", "value")
HIGHER_IS_BETTER = {"episode_reward": True, "relerr_grid": False, "bellman_residual": False}
SOLVED_REWARD = 200.0


class CadenceError(ValueError):
    pass


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    curves: dict  # label -> list[LearningCurve]
    summary: dict
    timing: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)  # (label, curve seed) -> approximator
    oracle: Optional[object] = None


# ------------------------------------------------------------------ emission


def _fmt(x: float) -> str:
    return repr(float(x))


def emit(curves: Sequence[LearningCurve], path, fmt: str = "csv") -> None:
    """Write curves as CSV (``update,seed,metric,value``) or JSON, in seed then update order."""
    path = Path(path)
    ordered = sorted(curves, key=lambda c: (c.estimator, c.seed))
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for c in ordered:
                for u, v in zip(c.updates, c.values):
                    w.writerow((u, c.seed, c.metric, _fmt(v)))
    elif fmt == "json":
        path.write_text(json.dumps([c.to_dict() for c in ordered], indent=1))
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_curves(path, estimator: Optional[str] = None) -> list:
    """Inverse of :func:`emit`; CSV files name the estimator via ``curves_<label>.csv``."""
    path = Path(path)
    if path.suffix == ".json":
        out = []
        for d in json.loads(path.read_text()):
            c = LearningCurve(d["estimator"], d["seed"], d["metric"])
            for u, v in zip(d["updates"], d["values"]):
                c.add(u, v)
            out.append(c)
        return out
    if estimator is None:
        estimator = path.stem.removeprefix("curves_")
    by_seed: dict = {}
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        if tuple(next(rows)) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        for u, seed, metric, v in rows:
            key = int(seed)
            if key not in by_seed:
                by_seed[key] = LearningCurve(estimator, key, metric)
            by_seed[key].add(int(u), float(v))
    return [by_seed[k] for k in sorted(by_seed)]


# ------------------------------------------------------------------ summaries


def curve_score(curve: LearningCurve, window: int = 50) -> float:
    """Final error, or mean reward over the last ``window`` episodes."""
    if curve.metric == "episode_reward":
        return float(np.mean(curve.values[-window:])) if curve.values else float("nan")
    return curve.final


def first_solved_episode(curve: LearningCurve, target: float = SOLVED_REWARD) -> Optional[int]:
    for u, v in zip(curve.updates, curve.values):
        if v >= target:
            return u
    return None


def solved_fraction(curve: LearningCurve, window: int = 50, target: float = SOLVED_REWARD) -> float:
    tail = curve.values[-window:]
    return float(np.mean([v >= target for v in tail])) if tail else 0.0


def best_replicates(curves: Sequence[LearningCurve], higher_is_better: bool) -> dict:
    """Per base seed, the replicate with the best score (replicates are ``1000*seed + r``)."""
    groups: dict = {}
    for c in curves:
        groups.setdefault(c.seed // 1000, []).append(c)
    best = {}
    for base, members in sorted(groups.items()):
        members = sorted(members, key=lambda c: c.seed)
        scores = np.array([curve_score(c) for c in members])
        scores = np.where(np.isnan(scores), -np.inf if higher_is_better else np.inf, scores)
        k = int(np.argmax(scores) if higher_is_better else np.argmin(scores))
        best[base] = members[k]
    return best


def summarize(config: ExperimentConfig, curves: dict, fallback: dict, diverged: dict) -> dict:
    metric = config.metric["kind"]
    hib = HIGHER_IS_BETTER[metric]
    out = {"metric": metric, "higher_is_better": hib, "methods": {}}
    for label, cs in curves.items():
        entry = {"seeds": [c.seed for c in cs], "scores": [curve_score(c) for c in cs],
                 "fallback_rate": fallback.get(label, 0.0),
                 "diverged": {str(s): k for s, k in diverged.get(label, {}).items()}}
        if label == "PD":
            best = best_replicates(cs, hib)
            entry["best_of"] = {str(b): {"replicate": c.seed % 1000, "seed": c.seed,
                                         "score": curve_score(c)} for b, c in best.items()}
            chosen = list(best.values())
        else:
            chosen = cs
        scores = [curve_score(c) for c in chosen]
        entry["median_score"] = float(np.median(scores))
        if metric == "episode_reward":
            firsts = [first_solved_episode(c) for c in chosen]
            entry["first_solved"] = firsts
            entry["median_first_solved"] = float(np.median(
                [f if f is not None else np.inf for f in firsts]))
            entry["solved_fraction_last50"] = [solved_fraction(c) for c in chosen]
            entry["median_solved_fraction_last50"] = float(np.median(entry["solved_fraction_last50"]))
        out["methods"][label] = entry
    return out


# ------------------------------------------------------------------ runner


def run_experiment(config: ExperimentConfig, out_dir=None, oracle=None,
                   write_checkpoints: bool = True) -> ExperimentResult:
    """All seeds and arms of ``config``; offline arms share each seed's trajectory."""
    from bffq.oracle import compute_oracle

    metric = config.metric["kind"]
    if metric == "relerr_grid" and oracle is None:
        if not config.oracle:
            raise ConfigError("relative-error metric needs an oracle")
        oracle = compute_oracle(config)
    curves: dict = {}
    fallback: dict = {}
    diverged: dict = {}
    timing: dict = {}
    models: dict = {}
    for seed in config.seeds:
        traj = None
        if not config.is_online:
            env = config.make_env()
            traj = generate_trajectory(env, config.make_policy(env), config.trajectory_length,
                                       seed_streams(seed)["trajectory"])
        for name in config.estimators:
            kind = config.estimator_kind(name)
            reps = int(config.pd.get("replicates", 10)) if kind.tag == "pd" else 1
            for r in range(reps):
                res = train(config, name, seed, oracle=oracle, trajectory=traj, replicate=r)
                label = kind.label
                curves.setdefault(label, []).append(res.curve)
                fallback.setdefault(label, [0, 0])
                fallback[label][0] += res.fallbacks
                fallback[label][1] += res.samples
                if res.diverged_at is not None:
                    diverged.setdefault(label, {})[res.curve.seed] = res.diverged_at
                timing[f"{label}/{res.curve.seed}"] = res.runtime
                models[(label, res.curve.seed)] = res.q
                log.info("%s seed %d: score %.6g", label, res.curve.seed, curve_score(res.curve))
    rates = {k: (v[0] / v[1] if v[1] else 0.0) for k, v in fallback.items()}
    summary = summarize(config, curves, rates, diverged)
    result = ExperimentResult(config, curves, summary, timing, models, oracle)
    if out_dir is not None:
        write_outputs(result, Path(out_dir), write_checkpoints)
    return result


def write_outputs(result: ExperimentResult, out: Path, write_checkpoints: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(result.config.dumps())
    everything = []
    for label, cs in sorted(result.curves.items()):
        emit(cs, out / f"curves_{label}.csv")
        everything.extend(cs)
    emit(everything, out / "curves.json", "json")
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    (out / "timing.json").write_text(json.dumps(result.timing, indent=2, sort_keys=True))
    if write_checkpoints:
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        for (label, seed), q in sorted(result.models.items()):
            save_checkpoint(q, ck / f"{label}_seed{seed}.ckpt", seed=seed)
        if result.oracle is not None:
            save_checkpoint(result.oracle, ck / "oracle.ckpt", role="oracle")


# ------------------------------------------------------------------ compare


@dataclass
class ComparisonReport:
    metric: str
    higher_is_better: bool
    methods: dict  # label -> {"median_final", "median_auc", "seeds"}
    pairs: dict  # "A<B" -> {"median_difference", "confidence"}

    def better(self, a: str, b: str) -> bool:
        """Whether ``a`` beats ``b`` on median final score."""
        x, y = self.methods[a]["median_final"], self.methods[b]["median_final"]
        return x > y if self.higher_is_better else x < y

    def to_dict(self) -> dict:
        return {"metric": self.metric, "higher_is_better": self.higher_is_better,
                "methods": self.methods, "pairs": self.pairs}


def _auc(c: LearningCurve) -> float:
    if len(c) < 2:
        return 0.0
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return float(trapezoid(c.values, c.updates))


def compare(curve_set: dict, n_boot: int = 2000, seed: int = 0) -> ComparisonReport:
    """Median-over-seeds scores, areas under curves and bootstrap ordering confidence.

    ``curve_set`` maps a method label to one curve per seed.
    """
    labels = sorted(curve_set)
    all_curves = [c for lab in labels for c in curve_set[lab]]
    if not all_curves:
        raise ValueError("nothing to compare")
    metrics = {c.metric for c in all_curves}
    if len(metrics) != 1:
        raise CadenceError(f"curves report different metrics: {sorted(metrics)}")
    cadence = all_curves[0].updates
    for c in all_curves:
        if c.updates != cadence:
            raise CadenceError(f"{c.estimator} seed {c.seed}: cadence differs")
    metric = metrics.pop()
    hib = HIGHER_IS_BETTER.get(metric, False)
    methods, scores = {}, {}
    for lab in labels:
        s = np.array([curve_score(c) for c in curve_set[lab]])
        scores[lab] = s
        methods[lab] = {"median_final": float(np.median(s)),
                        "median_auc": float(np.median([_auc(c) for c in curve_set[lab]])),
                        "seeds": [c.seed for c in curve_set[lab]]}
    rng = np.random.default_rng(seed)
    pairs = {}
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            sa, sb = scores[a], scores[b]
            ia = rng.integers(0, len(sa), size=(n_boot, len(sa)))
            ib = rng.integers(0, len(sb), size=(n_boot, len(sb)))
            ma, mb = np.median(sa[ia], axis=1), np.median(sb[ib], axis=1)
            wins = ma > mb if hib else ma < mb
            pairs[f"{a}|{b}"] = {"median_difference": float(np.median(sa) - np.median(sb)),
                                 "confidence_first_better": float(np.mean(wins))}
    return ComparisonReport(metric, hib, methods, pairs)


def comparison_set(result_or_curves, summary: Optional[dict] = None) -> dict:
    """Curves per method with primal-dual reduced to its best replicate per seed."""
    curves = result_or_curves.curves if isinstance(result_or_curves, ExperimentResult) \
        else result_or_curves
    out = {}
    for label, cs in curves.items():
        if label == "PD":
            hib = cs[0].metric == "episode_reward"
            out[label] = list(best_replicates(cs, hib).values())
        else:
            out[label] = sorted(cs, key=lambda c: c.seed)
    return out


def load_run(directory) -> dict:
    """Curves of a run directory grouped by method."""
    grouped: dict = {}
    for c in load_curves(Path(directory) / "curves.json"):
        grouped.setdefault(c.estimator, []).append(c)
    return grouped
