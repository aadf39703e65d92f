"""Command line entry point: ``hjhomog run|validate|table show|version``.

Exit codes: 0 success, 1 a verdict failed, 2 config or usage error,
3 solver error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .effective import EffectiveHamiltonianTable, check_effective_properties
from .errors import (
    BlowUpError,
    ConfigError,
    ConvergenceError,
    ResourceError,
    SpecificationError,
    TableRangeError,
)
from .harness import KINDS, ExperimentError, run, validate_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2, 3
SOLVER_ERRORS = (ConvergenceError, BlowUpError, ResourceError, TableRangeError, ExperimentError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hjhomog", description="Homogenization experiments for weakly coupled Hamilton-Jacobi systems.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--out", default=None, help="output directory (overrides the config)")
    p_run.add_argument("--seed-override", type=int, default=None, metavar="K",
                       help="replace the run seeds by K, K+1, ...")

    p_val = sub.add_parser("validate", help="check a config and print it with every default filled")
    p_val.add_argument("config")

    p_tab = sub.add_parser("table", help="inspect an effective Hamiltonian table")
    tab_sub = p_tab.add_subparsers(dest="table_command", parser_class=_Parser)
    tab_sub.required = True
    p_show = tab_sub.add_parser("show", help="print table metadata and property checks")
    p_show.add_argument("path")

    sub.add_parser("version", help="print the package version")
    return parser


def _print_errors(errors):
    for e in errors:
        print(f"config error: {e}", file=sys.stderr)


def _config_errors(exc: ConfigError) -> list:
    return list(exc.errors) if getattr(exc, "errors", None) else [str(exc)]


def cmd_run(args) -> int:
    try:
        art = run(args.config, out=args.out, workers=args.workers, seed_override=args.seed_override)
    except ConfigError as exc:
        _print_errors(_config_errors(exc))
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SpecificationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SOLVER_ERRORS as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    for v in art.summary["verdicts"]:
        mark = "PASS" if v["passed"] else "FAIL"
        note = "" if v["asserted"] else " (not asserted)"
        print(f"{mark} {v['name']}: value={_short(v['value'])} threshold={_short(v['threshold'])}{note}")
    print(f"artifact: {art.directory}")
    return EXIT_OK if art.passed else EXIT_FAIL


def _short(x) -> str:
    text = json.dumps(x)
    return text if len(text) <= 80 else text[:77] + "..."


def cmd_validate(args) -> int:
    try:
        cfg = validate_config(args.config)
    except ConfigError as exc:
        _print_errors(_config_errors(exc))
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(cfg, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_table_show(args) -> int:
    try:
        table = EffectiveHamiltonianTable.load(args.path)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read table {args.path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    lo, hi = table.p_bounds()
    print(f"dimension n={table.n}")
    for i, g in enumerate(table.p_grids):
        print(f"p[{i}]: {len(g)} nodes in [{lo[i]:g}, {hi[i]:g}]")
    r0, r1 = table.r_bounds()
    print(f"r: {len(table.r_grid)} nodes in [{r0:g}, {r1:g}]")
    print(f"value range: [{np.min(table.values):.6g}, {np.max(table.values):.6g}]")
    print(f"low-confidence entries: {int(np.sum(table.low_confidence))}")
    if all(len(g) >= 3 for g in table.p_grids):
        report = check_effective_properties(table)
        for name, chk in report.checks.items():
            print(f"{'PASS' if chk.passed else 'FAIL'} {name}: worst={chk.worst:.3g}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else EXIT_USAGE
    if args.command == "run":
        return cmd_run(args)
    if args.command == "validate":
        return cmd_validate(args)
    if args.command == "table":
        return cmd_table_show(args)
    if args.command == "version":
        print(__version__)
        return EXIT_OK
    parser.print_usage(sys.stderr)
    return EXIT_USAGE


__all__ = ["main", "build_parser", "KINDS"]

if __name__ == "__main__":
    raise SystemExit(main())
