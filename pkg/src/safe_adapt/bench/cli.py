"""Command line entry point: ``safe-adapt-bench <command> ...``.

Exit codes: 0 success, 1 run failure, 2 configuration error, 3 metric
verification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .report import _table_text, summary_table
from .scenarios import RunAborted, compare, run, shipped_config, verify_metric_cmd

EXIT_OK, EXIT_RUN, EXIT_CONFIG, EXIT_METRIC = 0, 1, 2, 3

log = logging.getLogger("safe_adapt.bench")


def _print_summaries(summaries, failed=()):
    header, rows = summary_table(summaries, failed)
    sys.stdout.write(_table_text(header, rows))


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    _, summary = run(cfg, args.out, figures=not args.no_figures)
    _print_summaries([summary])
    return EXIT_OK


def cmd_example1(args) -> int:
    cfg = load_config(shipped_config(f"example1_{args.variant}"))
    _, summary = run(cfg, args.out, figures=not args.no_figures)
    _print_summaries([summary])
    return EXIT_OK


def cmd_compare(args) -> int:
    directory = Path(args.config_dir)
    if not directory.is_dir():
        raise ConfigError("not a directory", directory)
    # files starting with "_" are shared bases, not runnable scenarios
    paths = sorted(p for p in directory.glob("*.ini") if not p.name.startswith("_"))
    if not paths:
        raise ConfigError("no *.ini configs found", directory)
    cfgs = [load_config(p) for p in paths]
    try:
        summaries = compare(cfgs, args.out, figures=not args.no_figures, workers=args.workers)
    except RunAborted as exc:
        _print_summaries(exc.partial, [(c, str(e)) for c, e in exc.failed])
        for c, e in exc.failed:
            log.error("%s: %s", c.source, e)
        return EXIT_RUN
    _print_summaries(summaries)
    return EXIT_OK


def cmd_verify_metric(args) -> int:
    cfg = load_config(args.config)
    report = verify_metric_cmd(cfg)
    print("metric conditions hold" if report.passed else f"metric conditions violated {report.message}".rstrip())
    print(f"C1 worst eigenvalue {report.c1_worst_eig:.6g}, C2 residual {report.c2_worst_residual:.3g}")
    return EXIT_OK if report.passed else EXIT_METRIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safe-adapt-bench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="trace CSV path; a PNG with the same stem is written next to it")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run every scenario file in a directory")
    p.add_argument("--config-dir", required=True)
    p.add_argument("--out", required=True, help="summary CSV; .txt table, timing CSV and PNG go alongside")
    p.add_argument("--workers", type=int, default=None, help="default: $SAFE_ADAPT_THREADS or 1")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify-metric", help="check the metric conditions on the configured grid")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_verify_metric)

    p = sub.add_parser("example1", help="scalar example with the chosen barrier variant")
    p.add_argument("--variant", choices=("modified_acbf", "racbf"), required=True)
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_example1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the run-failure exit code
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
