"""Command-line entry point: ``past <command> [--config FILE] [--stage S] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import PastError

log = logging.getLogger("past")

STAGE_COMMANDS = {
    "gen-phantom": "phantom",
    "preprocess": "preprocess",
    "translate-train": "translate",
    "translate-apply": "synthesize",
    "seg-train": "segtrain",
    "self-train": "selftrain",
    "evaluate": "evaluate",
    "report": "report",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config (JSON); defaults are used when omitted")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", type=Path, help="run directory (default: newest run for this config under the run root)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="past", description="Pixel alignment + self-training pipeline on volumetric data.")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run the {stage} stage")
        _common(p)
        p.set_defaults(stage=stage)

    p = sub.add_parser("run", help="run one stage (--stage) or the whole pipeline")
    p.add_argument("config_file", nargs="?", type=Path, help="experiment config (same as --config)")
    p.add_argument("--stage", choices=pipeline.STAGES + tuple(STAGE_COMMANDS))
    p.add_argument("--fresh", action="store_true", help="start a new timestamped run directory")
    _common(p)

    p = sub.add_parser("default-config", help="print the default experiment config")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of the segmentation losses")
    p.add_argument("--seeds", type=int, default=10)
    return parser


def _load(args) -> pipeline.ExperimentConfig:
    path = getattr(args, "config_file", None) or args.config
    if path is None:
        cfg = pipeline.ExperimentConfig()
        if args.seed is not None:
            cfg = pipeline.config_from_dict({**cfg.to_dict(), "seed": args.seed})
        return cfg
    return pipeline.load_config(path, seed=args.seed)


def _dispatch(args) -> int:
    if args.command == "default-config":
        cfg = pipeline.ExperimentConfig() if args.seed is None else pipeline.config_from_dict({"seed": args.seed})
        sys.stdout.write(cfg.to_json())
        return 0
    if args.command == "gradcheck":
        from .segmentation import gradcheck_losses

        results = [gradcheck_losses(rng_seed=s) for s in range(args.seeds)]
        for r in results:
            print(json.dumps(r, sort_keys=True))
        return 0 if all(r["passed"] for r in results) else 3

    cfg = _load(args)
    run_dir = pipeline.resolve_run_dir(cfg, args.out, fresh=getattr(args, "fresh", False))
    print(f"run directory: {run_dir}")
    if args.stage is None:
        pipeline.run_all(cfg, run_dir)
    else:
        manifest = pipeline.run_stage(cfg, args.stage, run_dir)
        print(f"{manifest['stage']}: {len(manifest['outputs'])} artifacts in {manifest['wall_time_s']:.1f}s")
    report = run_dir / "report" / "table.md"
    if (args.stage is None or pipeline.canonical_stage(args.stage) == "report") and report.is_file():
        print(report.read_text())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except PastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - anything unexpected is a runtime failure
        log.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
