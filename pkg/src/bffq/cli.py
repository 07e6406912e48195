"""Command-line entry point: ``bffq run|oracle|probe|compare``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from bffq.approx import load_checkpoint, save_checkpoint
from bffq.config import ExperimentConfig


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "paper_scale", False):
        cfg = cfg.at_full_scale()
    over = {}
    if getattr(args, "seed", None):
        over["seeds"] = list(args.seed)
    if getattr(args, "updates", None) is not None:
        over["updates"] = args.updates
    if getattr(args, "out", None):
        over["output_dir"] = str(args.out)
    return cfg.with_overrides(**over) if over else cfg


def cmd_run(args) -> int:
    from bffq.harness import compare, comparison_set, run_experiment

    cfg = _load(args)
    out = Path(cfg.output_dir)
    result = run_experiment(cfg, out)
    report = compare(comparison_set(result))
    (out / "comparison.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    for label, m in sorted(report.methods.items()):
        print(f"{label:>6}  median final {m['median_final']:.6g}")
    return 0


def cmd_oracle(args) -> int:
    from bffq.oracle import compute_oracle

    cfg = _load(args)
    q = compute_oracle(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(q, out / "oracle.ckpt", seed=cfg.oracle.get("seed"), role="oracle")
    (out / "config.json").write_text(cfg.dumps())
    print(f"wrote {out / 'oracle.ckpt'} ({q.n_params} parameters)")
    return 0


def cmd_probe(args) -> int:
    from bffq.oracle import bias_probe

    cfg = _load(args)
    snaps = None
    if args.snapshot:
        snaps = {}
        for item in args.snapshot:
            name, _, path = item.partition("=")
            snaps[name] = load_checkpoint(path)[0]
    report = bias_probe(cfg, snaps)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "probe.json")
    for r in report.records:
        flag = " (inconclusive)" if r.sc_inconclusive or r.bff_inconclusive else ""
        print(f"eps={r.epsilon:.6g} {r.snapshot:>12}: SC bias {r.sc_bias:.4g}  "
              f"BFF bias {r.bff_bias:.4g}{flag}")
    return 0


def cmd_compare(args) -> int:
    from bffq.harness import compare, comparison_set, load_run

    merged: dict = {}
    for d in args.dirs:
        for label, cs in load_run(d).items():
            merged.setdefault(label, []).extend(cs)
    report = compare(comparison_set(merged))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bffq", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_common(sp):
        sp.add_argument("config", help="JSON/TOML config file or preset name (ring-eval, tabular-eval, ...)")
        sp.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
        sp.add_argument("--updates", type=int, help="override the number of parameter updates")
        sp.add_argument("--paper-scale", action="store_true", help="use the full trajectory length")
        sp.add_argument("--out", type=Path, help="output directory")
        return sp

    with_common(sub.add_parser("run", help="train every estimator arm and write curves")) \
        .set_defaults(func=cmd_run)
    with_common(sub.add_parser("oracle", help="compute and store the reference Q")) \
        .set_defaults(func=cmd_oracle)
    pr = with_common(sub.add_parser("probe", help="measure estimator bias"))
    pr.add_argument("--snapshot", action="append", metavar="NAME=CKPT",
                    help="parameter snapshot to probe (continuous envs)")
    pr.set_defaults(func=cmd_probe)
    cp = sub.add_parser("compare", help="compare finished runs")
    cp.add_argument("dirs", nargs="+", type=Path)
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
