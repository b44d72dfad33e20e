"""Ordered run log, final-state report, and its text/machine renderings.

The machine format is line-oriented key=value with shell-style quoting,
stable across runs of the same scenario, and reparses to an equal report:

    netcompose-report 1
    log seq=1 time=0 kind=hello xid=0 module=0 dp=0 detail=...
    table dp=1 prio=200 match=ip_dst=10.0.3.0/24 actions=drop packets=0 idle=0 hard=0
    metric name=events_processed value=3
    end
"""

from __future__ import annotations

import shlex
import threading
from dataclasses import dataclass, field

FORMAT_VERSION = 1

METRIC_NAMES = (
    "events_processed",
    "fences_received",
    "conflicts_detected",
    "conflicts_resolved_discard",
    "conflicts_resolved_ignore",
    "conflicts_resolved_priority",
    "outputs_buffered_for_ordering",
    "protocol_errors",
)


@dataclass(frozen=True, slots=True)
class LogEntry:
    seq: int
    time: int
    kind: str
    xid: int
    module_id: int
    datapath_id: int
    detail: str


@dataclass(frozen=True, slots=True)
class TableRow:
    datapath_id: int
    priority: int
    match: str
    actions: str
    packets: int
    idle: int
    hard: int


@dataclass(slots=True)
class RunReport:
    log: list[LogEntry] = field(default_factory=list)
    tables: list[TableRow] = field(default_factory=list)
    metrics: dict[str, int] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RunReport):
            return NotImplemented
        return (self.log == other.log and self.tables == other.tables
                and self.metrics == other.metrics)

    def entries(self, kind: str) -> list[LogEntry]:
        return [e for e in self.log if e.kind == kind]


class RunLog:
    """Append-only ordered event log shared by Core, Shim, and the runner.

    seq is strictly increasing; time is the current simulated millisecond,
    set by the scenario runner before each trace directive.
    """

    def __init__(self) -> None:
        self._entries: list[LogEntry] = []
        self._next_seq = 1
        self._lock = threading.Lock()
        self.time_ms = 0

    def append(self, kind: str, xid: int = 0, module_id: int = 0,
               datapath_id: int = 0, detail: str = "") -> LogEntry:
        with self._lock:
            entry = LogEntry(self._next_seq, self.time_ms, kind, xid,
                             module_id, datapath_id, detail)
            self._next_seq += 1
            self._entries.append(entry)
            return entry

    def entries(self) -> list[LogEntry]:
        with self._lock:
            return list(self._entries)


def _q(value: str) -> str:
    return shlex.quote(value) if value else "''"


def render_machine(report: RunReport) -> str:
    lines = [f"netcompose-report {FORMAT_VERSION}"]
    for e in report.log:
        lines.append(
            f"log seq={e.seq} time={e.time} kind={e.kind} xid={e.xid} "
            f"module={e.module_id} dp={e.datapath_id} detail={_q(e.detail)}"
        )
    for t in report.tables:
        lines.append(
            f"table dp={t.datapath_id} prio={t.priority} match={_q(t.match)} "
            f"actions={_q(t.actions)} packets={t.packets} idle={t.idle} hard={t.hard}"
        )
    for name, value in report.metrics.items():
        lines.append(f"metric name={name} value={value}")
    lines.append("end")
    return "\n".join(lines) + "\n"


class ReportParseError(Exception):
    pass


def _kv(tokens: list[str], lineno: int) -> dict[str, str]:
    out: dict[str, str] = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep:
            raise ReportParseError(f"line {lineno}: expected key=value, found {tok!r}")
        out[key] = value
    return out


def parse_machine(text: str) -> RunReport:
    """Inverse of render_machine; raises ReportParseError on malformed input."""
    lines = text.splitlines()
    if not lines or lines[0] != f"netcompose-report {FORMAT_VERSION}":
        raise ReportParseError("missing or unsupported report header")
    report = RunReport()
    ended = False
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if ended:
            raise ReportParseError(f"line {lineno}: content after 'end'")
        if line == "end":
            ended = True
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise ReportParseError(f"line {lineno}: {exc}") from None
        record, fields = tokens[0], _kv(tokens[1:], lineno)
        try:
            if record == "log":
                report.log.append(LogEntry(
                    seq=int(fields["seq"]), time=int(fields["time"]),
                    kind=fields["kind"], xid=int(fields["xid"]),
                    module_id=int(fields["module"]), datapath_id=int(fields["dp"]),
                    detail=fields["detail"],
                ))
            elif record == "table":
                report.tables.append(TableRow(
                    datapath_id=int(fields["dp"]), priority=int(fields["prio"]),
                    match=fields["match"], actions=fields["actions"],
                    packets=int(fields["packets"]), idle=int(fields["idle"]),
                    hard=int(fields["hard"]),
                ))
            elif record == "metric":
                report.metrics[fields["name"]] = int(fields["value"])
            else:
                raise ReportParseError(f"line {lineno}: unknown record {record!r}")
        except (KeyError, ValueError) as exc:
            raise ReportParseError(f"line {lineno}: {exc}") from None
    if not ended:
        raise ReportParseError("missing 'end' line")
    return report


def render_text(report: RunReport) -> str:
    lines = ["== event log =="]
    for e in report.log:
        lines.append(f"[{e.seq:>4}] t={e.time:>6}ms {e.kind:<22} xid={e.xid:<5} "
                     f"module={e.module_id:<3} dp={e.datapath_id:<3} {e.detail}")
    lines.append("")
    lines.append("== final flow tables ==")
    current_dp = None
    for t in report.tables:
        if t.datapath_id != current_dp:
            current_dp = t.datapath_id
            lines.append(f"datapath {current_dp}:")
        lines.append(f"  prio={t.priority:<5} match=[{t.match}] actions=[{t.actions}] "
                     f"packets={t.packets} idle={t.idle} hard={t.hard}")
    if not report.tables:
        lines.append("(no flow entries)")
    lines.append("")
    lines.append("== metrics ==")
    for name, value in report.metrics.items():
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def render(report: RunReport, fmt: str) -> str:
    if fmt == "machine":
        return render_machine(report)
    if fmt == "text":
        return render_text(report)
    raise ValueError(f"unknown report format {fmt!r}")
