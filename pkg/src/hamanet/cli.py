"""Command line entry points: run, compare and validate scenarios.

Exit codes: 0 success, 1 i/o failure, 2 validation error, 3 runtime
invariant violation (only with --strict).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .scenario import ParseError, ValidationError, load_scenario
from .services import compare_overhead
from .sim import run

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2
EXIT_ASSERTION = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hamanet",
        description="Deterministic simulator of community-based service routing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one scenario run")
    p_run.add_argument("scenario", type=Path)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--mode", choices=("hamanet", "baseline"), default="hamanet")
    p_run.add_argument("--trace", type=Path, help="write the event trace to this file")
    p_run.add_argument("--out", type=Path, help="write the report here instead of stdout")
    p_run.add_argument("--strict", action="store_true",
                       help="exit nonzero when a run invariant is violated")

    p_cmp = sub.add_parser("compare", help="run the workload in both modes")
    p_cmp.add_argument("scenario", type=Path)
    p_cmp.add_argument("--seed", type=int, default=0)
    p_cmp.add_argument("--messages", type=int, default=None,
                       help="scan crossover over k=0..K mirrored sends")
    p_cmp.add_argument("--out", type=Path)

    p_val = sub.add_parser("validate", help="check a scenario file")
    p_val.add_argument("scenario", type=Path)
    return parser


def _emit(report: dict, out: Path | None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load(path: Path):
    try:
        return load_scenario(path), EXIT_OK
    except FileNotFoundError:
        print(f"error: no such file: {path}", file=sys.stderr)
        return None, EXIT_IO
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return None, EXIT_INVALID
    except ValidationError as exc:
        for problem in exc.errors:
            print(f"invalid: {problem}", file=sys.stderr)
        return None, EXIT_INVALID


def cmd_run(args) -> int:
    scenario, status = _load(args.scenario)
    if scenario is None:
        return status
    result = run(scenario, args.seed, mode=args.mode)
    try:
        _emit(result.report, args.out)
        if args.trace:
            args.trace.write_text(result.trace_text(), encoding="utf-8")
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.strict and result.report["violations"]:
        for violation in result.report["violations"]:
            print(f"invariant violated: {violation}", file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_OK


def cmd_compare(args) -> int:
    scenario, status = _load(args.scenario)
    if scenario is None:
        return status
    report = compare_overhead(scenario, args.seed, messages=args.messages)
    try:
        _emit(report, args.out)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_validate(args) -> int:
    scenario, status = _load(args.scenario)
    if scenario is None:
        return status
    print(f"ok: {scenario.name}: {len(scenario.nodes)} nodes, {len(scenario.steps)} steps")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "compare": cmd_compare, "validate": cmd_validate}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
