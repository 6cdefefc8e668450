"""Command line entry point.

    paraopt run --config FILE [--out CSV] [--plot SVG] [--quiet] [--small] [--set key=value ...]
    paraopt compare --configs F1,F2[,...] --out-dir DIR [--plot SVG] [--small]

Exit status: 0 converged, 2 solver did not converge (reports still written),
1 usage or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .experiment import ConfigError, compare, emit_plot, load_config, parse_overrides, run

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="paraopt", description="ParaOpt solver for optimal control of Burgers and heat problems.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--workers", type=int, default=None, help="threads for per-subinterval work")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="solve one configuration")
    p_run.add_argument("--config", required=True, type=Path)
    p_run.add_argument("--out", type=Path, help="CSV report path")
    p_run.add_argument("--plot", type=Path, help="SVG chart path")
    p_run.add_argument("--quiet", action="store_true", help="suppress the summary table")
    p_run.add_argument("--small", action="store_true", help="reduced size (N=12, L=4) for quick checks")
    p_run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p_cmp = sub.add_parser("compare", help="solve several variants and join their reports")
    p_cmp.add_argument("--configs", required=True, help="comma separated config files")
    p_cmp.add_argument("--out-dir", required=True, type=Path)
    p_cmp.add_argument("--plot", type=Path, help="SVG chart path")
    p_cmp.add_argument("--small", action="store_true")
    p_cmp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def _print_table(report, stream):
    stream.write(f"status: {report.status}\n")
    if report.error:
        stream.write(f"error: {report.error}\n")
    stream.write(f"{'k':>3} {'residual':>11} {'gmres':>6} {'lin/sub':>8} {'nonlin':>7} {'fine':>6}\n")
    for r in report.rows:
        stream.write(
            f"{r.newton_index:>3} {r.residual_inf_norm:>11.3e} {r.gmres_iters_cum:>6} "
            f"{r.coarse_linear_solves_per_subinterval_cum:>8} {r.coarse_nonlinear_solves_cum:>7} "
            f"{r.fine_solves_cum:>6}\n"
        )


def _cmd_run(args) -> int:
    config = load_config(args.config, parse_overrides(args.overrides), small=args.small)
    report = run(config, args.out, workers=args.workers)
    if not args.quiet:
        _print_table(report, sys.stdout)
    if args.plot is not None:
        if report.rows:
            emit_plot(report, args.plot)
        else:
            print("no Newton steps recorded; plot skipped", file=sys.stderr)
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def _cmd_compare(args) -> int:
    paths = [Path(p.strip()) for p in args.configs.split(",") if p.strip()]
    overrides = parse_overrides(args.overrides)
    configs = [load_config(p, overrides, small=args.small) for p in paths]
    reports = compare(configs, args.out_dir, workers=args.workers)
    for label, rep in reports.items():
        last = rep.rows[-1] if rep.rows else None
        tail = (
            f"{len(rep.rows) - 1} steps, gmres {last.gmres_iters_cum}, "
            f"lin/sub {last.coarse_linear_solves_per_subinterval_cum}"
            if last
            else "no steps"
        )
        print(f"{label}: {rep.status}, {tail}")
    if args.plot is not None and all(r.rows for r in reports.values()):
        emit_plot(reports, args.plot)
    return EXIT_OK if all(r.converged for r in reports.values()) else EXIT_NOT_CONVERGED


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"paraopt: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_compare(args)
    except (ConfigError, OSError) as exc:
        print(f"paraopt: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
