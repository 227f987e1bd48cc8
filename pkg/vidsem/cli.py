"""
Command-line interface for vidsem.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from .config import ExperimentConfig
from .exceptions import ConfigError, VidsemError
from .ledger import RunLedger, resolve_run_dir
from .pipeline import Pipeline
from .plotting import plot
from .reproduce import EXPERIMENT_CHOICES, Reproducer
from .utils import load_config_from_file, read_json, setup_logging

STAGES = (
    "generate-data", "fit-pca", "train-stage1", "rollout-features",
    "train-stage2", "sample", "evaluate",
)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str,
                        help="Path to JSON configuration file (default: the run's config.json)")
    parser.add_argument("--out", "-o", type=str,
                        help="Run directory (default: $VIDSEM_RUN_ROOT/<name>, root ./runs)")
    parser.add_argument("--name", default="default",
                        help="Run name under the run root when --out is not given")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set stage2.steps=500 (repeatable)")
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("--quiet", "-q", action="store_true")


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="vidsem",
        description="Hierarchical semantics-guided video prediction on a synthetic shape world.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s generate-data --out runs/demo
  %(prog)s fit-pca --out runs/demo
  %(prog)s train-stage1 --out runs/demo
  %(prog)s rollout-features --out runs/demo
  %(prog)s train-stage2 --out runs/demo --set stage2.steps=500
  %(prog)s evaluate --out runs/demo --runs 3
  %(prog)s reproduce table4 --out runs/demo
  %(prog)s reproduce convergence --out runs/demo
  %(prog)s plot --out runs/demo
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in STAGES:
        p = sub.add_parser(stage)
        _common(p)
        if stage in ("train-stage2", "sample", "evaluate"):
            p.add_argument("--arm", default="full", help="Stage-2 checkpoint name (default: full)")
        if stage == "evaluate":
            p.add_argument("--runs", type=int, help="Independent sampling runs (default: eval.runs)")

    p = sub.add_parser("reproduce")
    _common(p)
    p.add_argument("experiment", choices=EXPERIMENT_CHOICES,
                   help="table1, table4, table5, convergence, nested or guidance; "
                        "baselines, supervision and channels are aliases")
    p.add_argument("--runs", type=int, help="Independent sampling runs (default: eval.runs)")

    p = sub.add_parser("plot")
    _common(p)

    args = parser.parse_args(argv)
    if args.quiet and args.verbose:
        parser.error("--quiet and --verbose are mutually exclusive")
    return args


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config_dict: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply dotted KEY=VALUE overrides; values parse as JSON, else stay strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not KEY=VALUE")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = config_dict
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: '{part}' is not a section")
        node[parts[-1]] = _parse_value(raw)
    return config_dict


def create_config(args: argparse.Namespace, ledger: RunLedger) -> ExperimentConfig:
    config_dict: Dict[str, Any] = {}
    if args.config:
        config_dict.update(load_config_from_file(args.config))
    elif args.command != "generate-data" and ledger.config_path.exists():
        config_dict.update(read_json(ledger.config_path))
    apply_overrides(config_dict, args.overrides)
    return ExperimentConfig.from_dict(config_dict)


def dispatch(args: argparse.Namespace, pipeline: Pipeline) -> Any:
    cmd = args.command
    if cmd == "generate-data":
        return pipeline.generate_data()
    if cmd == "fit-pca":
        return pipeline.fit_pca()
    if cmd == "train-stage1":
        return pipeline.train_stage1()
    if cmd == "rollout-features":
        return pipeline.rollout_features()
    if cmd == "train-stage2":
        return pipeline.train_stage2(args.arm)
    if cmd == "sample":
        return pipeline.sample(args.arm)
    if cmd == "evaluate":
        return pipeline.evaluate(args.arm, runs=args.runs)
    if cmd == "reproduce":
        return Reproducer(pipeline, runs=args.runs).run(args.experiment)
    if cmd == "plot":
        return plot(pipeline.ledger)
    raise ConfigError(f"unknown command {cmd}")


def run(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand and return its exit status."""
    args = parse_arguments(argv)
    setup_logging(verbose=args.verbose, quiet=args.quiet)
    logger = logging.getLogger(__name__)

    ledger = RunLedger(resolve_run_dir(args.out, args.name))
    try:
        config = create_config(args, ledger)
        logger.info(f"vidsem {args.command} in {ledger.root}")
        with Pipeline(config, ledger, quiet=args.quiet) as pipeline:
            result = dispatch(args, pipeline)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.", file=sys.stderr)
        return 130
    except VidsemError as e:
        logger.error(f"vidsem {args.command} failed: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return 1

    if args.command == "evaluate" and not args.quiet:
        for method, report in result.items():
            mean = report["mean"]
            print(f"{method:>14}: mIoU(A) {mean['miou_all']}, IoU(M) {mean['iou_moving']}, "
                  f"FFD {mean['ffd']}, PSNR {mean['psnr']}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
