"""Command-line scenario runner.

    netcompose run --topology topo.txt --composition comp.txt \\
        --modules modules.txt --trace trace.txt [--transport inmem|socket] \\
        [--dump-tables PATH] [--report PATH] [--format text|machine] \\
        [--log-level L]

Exit codes: 0 clean run, 1 load error, 2 protocol errors during the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .report import RunReport, render
from .scenario import LoadError, load_scenario, run_scenario

log = logging.getLogger("netcompose")


def _render_tables(report: RunReport) -> str:
    lines = []
    current = None
    for t in report.tables:
        if t.datapath_id != current:
            current = t.datapath_id
            lines.append(f"datapath {current}:")
        lines.append(f"  prio={t.priority} match=[{t.match}] actions=[{t.actions}] "
                     f"packets={t.packets} idle={t.idle} hard={t.hard}")
    if not lines:
        lines.append("(no flow entries)")
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netcompose",
        description="SDN application-composition engine over a simulated network",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and report the outcome")
    run.add_argument("--topology", required=True, metavar="F")
    run.add_argument("--composition", required=True, metavar="F")
    run.add_argument("--modules", required=True, metavar="F")
    run.add_argument("--trace", required=True, metavar="F")
    run.add_argument("--transport", choices=("inmem", "socket"), default="inmem")
    run.add_argument("--dump-tables", metavar="PATH",
                     help="write final flow tables to PATH")
    run.add_argument("--report", metavar="PATH",
                     help="write the report to PATH instead of stdout")
    run.add_argument("--format", choices=("text", "machine"), default="text")
    run.add_argument("--log-level", default="warning", metavar="L",
                     choices=("debug", "info", "warning", "error"))
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        scenario = load_scenario(args.topology, args.composition,
                                 args.modules, args.trace)
    except LoadError as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return 1
    report, code = run_scenario(scenario, transport=args.transport)
    rendered = render(report, args.format)
    if args.report:
        Path(args.report).write_text(rendered, encoding="utf-8")
    else:
        sys.stdout.write(rendered)
    if args.dump_tables:
        Path(args.dump_tables).write_text(_render_tables(report), encoding="utf-8")
    if code:
        errors = report.metrics.get("protocol_errors", 0)
        print(f"run finished with {errors} protocol error(s)", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
