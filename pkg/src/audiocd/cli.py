"""Command-line entry point: ``audiocd {run,judge,report,synth}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .backend import make_synthetic_dataset
from .judge import JudgeError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _cmd_run(args) -> int:
    try:
        cfg = harness.load_config(args.config)
        record = harness.run(cfg, runs_dir=args.runs_dir)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for sub in record.sub_runs:
        print(sub)
    print(f"completed={record.completed} quarantined={record.quarantined}", file=sys.stderr)
    return EXIT_PARTIAL if record.partial else EXIT_OK


def _cmd_judge(args) -> int:
    try:
        summary = harness.judge_run(args.run, runs_dir=args.runs_dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except JudgeError as exc:
        print(f"judge error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"judged={summary.judged} unjudged={summary.unjudged} pending={summary.pending}")
    return EXIT_OK if summary.complete else EXIT_PARTIAL


def _cmd_report(args) -> int:
    try:
        result = harness.report(args.baseline, args.contrast, args.out, runs_dir=args.runs_dir)
    except (harness.ReportError, ValueError, FileNotFoundError) as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in result["paths"]:
        print(p)
    print(
        f"accuracy {args.baseline}={result['baseline_accuracy']:.1f} "
        f"{args.contrast}={result['contrast_accuracy']:.1f}",
        file=sys.stderr,
    )
    return EXIT_OK


def _cmd_synth(args) -> int:
    if not 0.0 <= args.conflict <= 1.0:
        print("--conflict must lie in [0, 1]", file=sys.stderr)
        return EXIT_CONFIG
    manifest = harness.DatasetManifest.from_items(make_synthetic_dataset(args.items, args.conflict, args.seed))
    if args.out in (None, "-"):
        manifest.dump(sys.stdout)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            manifest.dump(fh)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="audiocd", description="Contrastive decoding experiments for audio-language models.")
    p.add_argument("--runs-dir", default="runs", help="directory holding run outputs (default: ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="decode every sample with each configured method")
    r.add_argument("--config", required=True)
    r.set_defaults(func=_cmd_run)

    j = sub.add_parser("judge", help="judge responses of a run (RUN or RUN/METHOD)")
    j.add_argument("--run", required=True)
    j.set_defaults(func=_cmd_judge)

    rep = sub.add_parser("report", help="accuracy table and transition matrices")
    rep.add_argument("--baseline", required=True, help="greedy sub-run, e.g. s1/greedy")
    rep.add_argument("--contrast", required=True, help="contrastive sub-run, e.g. s1/aad")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=_cmd_report)

    s = sub.add_parser("synth", help="write a synthetic conflict manifest as JSON lines")
    s.add_argument("--items", type=int, required=True)
    s.add_argument("--conflict", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", default=None, help="output path (default: stdout)")
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
