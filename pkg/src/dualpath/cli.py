"""Command line entry point: ``python -m dualpath <command>``."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .embedding import anchors_csv
from .errors import (
    BackpressureError,
    ConfigurationError,
    ContractViolation,
    InvalidComparisonError,
    InvalidInputError,
)

EXIT_CODES = [
    (ConfigurationError, 2, "configuration error"),
    (InvalidComparisonError, 5, "invalid comparison"),
    (InvalidInputError, 3, "invalid input"),
    (ContractViolation, 4, "contract violation"),
    (BackpressureError, 6, "pipeline backpressure"),
    (FileNotFoundError, 3, "invalid input"),
]


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "out", None):
        over["output_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        over["total_steps"] = args.steps
    if getattr(args, "seeds", None):
        over["seeds"] = [int(s) for s in args.seeds.split(",")]
    return replace(cfg, **over) if over else cfg


def cmd_train(args) -> int:
    from .experiments import arm_config, run_training

    cfg = _config(args)
    arm = cfg.experiment if cfg.experiment in ("main", "no_penalty", "static_only") else "main"
    cfg = arm_config(cfg, arm)
    results = run_training(cfg, Path(cfg.output_dir))
    print((Path(cfg.output_dir) / "summary.txt").read_text(), end="")
    return 0 if results else 1


def cmd_ablate(args) -> int:
    from .experiments import arm_config, run_training

    cfg = arm_config(_config(args), args.arm)
    run_training(cfg, Path(cfg.output_dir))
    print((Path(cfg.output_dir) / "summary.txt").read_text(), end="")
    return 0


def cmd_eval(args) -> int:
    from .experiments import run_eval

    cfg = _config(args)
    cfg = replace(cfg, experiment="eval", eval=replace(cfg.eval, checkpoint=args.checkpoint or cfg.eval.checkpoint))
    run_eval(cfg, Path(cfg.output_dir))
    print((Path(cfg.output_dir) / "summary.txt").read_text(), end="")
    return 0


def cmd_gating(args) -> int:
    from .experiments import run_gating

    cfg = replace(_config(args), experiment="gating_efficiency")
    run_gating(cfg, Path(cfg.output_dir), args.frames)
    print((Path(cfg.output_dir) / "summary.txt").read_text(), end="")
    return 0


def cmd_report(args) -> int:
    """Recompute metrics from persisted episode CSVs."""
    from .experiments import metrics_csv
    from .metrics import aggregate, compute_metrics, logs_from_csv

    run_dir = Path(args.run_dir)
    rows = {}
    for d in sorted(run_dir.glob("seed_*")):
        for name in ("episodes", "eval"):
            f = d / f"{name}.csv"
            if f.exists():
                logs = logs_from_csv(f.read_text())
                if logs:
                    rows[f"{name}_{d.name}"] = compute_metrics(logs)
    if not rows:
        raise InvalidInputError(f"no episode logs under {run_dir}")
    for kind in ("episodes", "eval"):
        part = [v for k, v in rows.items() if k.startswith(kind)]
        if part:
            agg = aggregate(part)
            rows[f"{kind}_mean"], rows[f"{kind}_std"] = agg.mean, agg.std
    text = metrics_csv(rows)
    if args.write:
        (run_dir / "report.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_compare(args) -> int:
    from .experiments import compare_arms, read_arm_summary

    c = compare_arms(read_arm_summary(Path(args.a)), read_arm_summary(Path(args.b)), args.metric, args.statistic)
    print("seed,relative_difference,log_ratio")
    for s in c.per_seed:
        print(f"{s},{c.per_seed[s]:.6f},{c.per_seed_log_ratio[s]:.6f}")
    print(f"{c.statistic},{c.relative:.6f},{c.log_ratio:.6f}")
    print(c.describe())
    return 0


def cmd_dump_anchors(args) -> int:
    text = anchors_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualpath", description="Dual-pathway semantic reward training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("-c", "--config", help="YAML run configuration")
        if out:
            sp.add_argument("-o", "--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seeds", help="comma-separated seed list")
        sp.add_argument("--steps", type=int, help="control steps per seed")

    sp = sub.add_parser("train", help="train the arm named in the config")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("ablate", help="train an ablation arm")
    sp.add_argument("arm", choices=["main", "no_penalty", "static_only"])
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the fixed routes")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint .npz")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gating", help="measure gate rate and simulated time savings")
    common(sp)
    sp.add_argument("--frames", type=int, default=522)
    sp.set_defaults(func=cmd_gating)

    sp = sub.add_parser("report", help="recompute metrics from a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--write", action="store_true", help="also write report.csv")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("compare", help="compare two run directories")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--metric", default="cumulative_collisions")
    sp.add_argument("--statistic", default="median", choices=["median", "mean"])
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("dump-anchors", help="write the embedding anchor table as CSV")
    sp.add_argument("-o", "--out")
    sp.set_defaults(func=cmd_dump_anchors)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(e for e, _, _ in EXIT_CODES) as exc:
        for etype, code, label in EXIT_CODES:
            if isinstance(exc, etype):
                print(f"error ({label}): {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
