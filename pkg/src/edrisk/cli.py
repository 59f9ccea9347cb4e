"""Command-line entry point: ``edrisk <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .arc import DEFAULT_DISPLAY_SUPPORT, TIE_BREAKS
from .bundle import BundleError, atomic_write
from .cohort import CohortError
from .pipeline import (
    ConfigError,
    evaluate_bundles,
    explain_text,
    ingest_to_files,
    load_config,
    predict_scores,
    run_pipeline,
    synth_to_files,
    window_list,
)


def _common(p: argparse.ArgumentParser, windows: bool = False) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="seed for synthesis and the split")
    p.add_argument("--out", help="output directory")
    if windows:
        p.add_argument("--window", type=int, action="append", choices=(3, 7, 14),
                       help="window in days; repeat for several")
        p.add_argument("--tie-break", choices=TIE_BREAKS, help="rule selection tie-break")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edrisk", description="ED-to-inpatient admission risk models")
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("synth", help="write a synthetic cohort and its plant manifest"))
    _common(sub.add_parser("ingest", help="apply exclusions and write the retained visits"))
    _common(sub.add_parser("train", help="train, save bundles and evaluate every window"), windows=True)
    _common(sub.add_parser("evaluate", help="re-score saved bundles on the reproduced TEST split"), windows=True)

    p = sub.add_parser("explain", help="print top coefficients, rules and audit flags of a bundle")
    p.add_argument("bundle")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--min-support", type=int, default=DEFAULT_DISPLAY_SUPPORT,
                   help="hide rules below this support (0 shows all)")

    p = sub.add_parser("predict", help="score ED visits with saved bundles")
    p.add_argument("bundle", help="a bundle or a directory holding models/window_<w>")
    p.add_argument("visits")
    p.add_argument("timelines")
    p.add_argument("--out", help="scores file (default stdout)")
    p.add_argument("--delimiter", default=",")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="edrisk: %(message)s", stream=sys.stderr)
    try:
        if args.command == "explain":
            sys.stdout.write(explain_text(args.bundle, args.k, args.min_support or None))
            return 0
        if args.command == "predict":
            text = predict_scores(args.bundle, args.visits, args.timelines, args.delimiter)
            if args.out:
                atomic_write(Path(args.out), text)
            else:
                sys.stdout.write(text)
            return 0
        cfg = load_config(
            args.config, seed=args.seed, out=args.out,
            windows=window_list(getattr(args, "window", None)),
            tie_break=getattr(args, "tie_break", None),
        )
        if args.command == "synth":
            return synth_to_files(cfg)
        if args.command == "ingest":
            return ingest_to_files(cfg)
        if args.command == "train":
            return run_pipeline(cfg)
        return evaluate_bundles(cfg)
    except (ConfigError, BundleError, CohortError, ValueError, OSError) as exc:
        print(f"edrisk: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
