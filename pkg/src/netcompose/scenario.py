"""Scenario loading and end-to-end engine runs.

A scenario bundles a topology, a composition specification, module
configurations, and a packet trace. Trace grammar (UTF-8, '#' comments,
times in milliseconds, non-decreasing):

    at <ms> inject dp=<id> port=<n> <field>=<value> ...
    at <ms> tick
    at <ms> stats dp=<id> [<field>=<value> ...]

Every directive first advances simulated time to <ms> (expiring flow
entries); `tick` does nothing else. `stats` issues a read-state request
through the first declared module's backend, exercising the reply
correlation path. The engine runs all components in-process over the
in-memory transport by default; --transport socket moves the same frames
over loopback TCP for interop testing (reports then follow socket
readiness order and are not byte-stable).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .apps import ModuleConfigError, ModuleSpec, parse_module_config
from .backend import Backend
from .channels import InMemHub, SocketHub
from .compspec import CompositionSpec, SpecError, parse_spec, tree_leaf_names
from .core import Core
from .netsim import Network, Shim, TopologyError, parse_topology
from .report import METRIC_NAMES, RunLog, RunReport, TableRow
from .sbi import (
    Match,
    PacketHeaders,
    StatsRequest,
    format_actions,
    headers_from_kv,
    match_from_kv,
)


class LoadError(Exception):
    pass


@dataclass(frozen=True, slots=True)
class Inject:
    at_ms: int
    dp: int
    port: int
    headers: PacketHeaders


@dataclass(frozen=True, slots=True)
class Tick:
    at_ms: int


@dataclass(frozen=True, slots=True)
class Stats:
    at_ms: int
    dp: int
    match: Match


Directive = Union[Inject, Tick, Stats]


class TraceError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _kv_tokens(tokens: list[str], lineno: int) -> dict[str, str]:
    out: dict[str, str] = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not key or not value:
            raise TraceError(lineno, f"expected key=value, found {tok!r}")
        if key in out:
            raise TraceError(lineno, f"duplicate key {key!r}")
        out[key] = value
    return out


def parse_trace(text: str) -> list[Directive]:
    directives: list[Directive] = []
    last_ms: Optional[int] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 3 or tokens[0] != "at":
            raise TraceError(lineno, "expected: at <ms> <inject|tick|stats> ...")
        try:
            at_ms = int(tokens[1], 0)
        except ValueError:
            raise TraceError(lineno, f"bad time {tokens[1]!r}") from None
        if at_ms < 0:
            raise TraceError(lineno, "time must be non-negative")
        if last_ms is not None and at_ms < last_ms:
            raise TraceError(lineno, f"time {at_ms} precedes previous {last_ms}")
        last_ms = at_ms
        verb = tokens[2]
        rest = tokens[3:]
        try:
            if verb == "tick":
                if rest:
                    raise TraceError(lineno, "tick takes no arguments")
                directives.append(Tick(at_ms))
            elif verb == "inject":
                kv = _kv_tokens(rest, lineno)
                if "dp" not in kv or "port" not in kv:
                    raise TraceError(lineno, "inject needs dp= and port=")
                if "in_port" in kv:
                    raise TraceError(lineno, "use port=, not in_port=")
                dp = int(kv.pop("dp"), 0)
                port = int(kv.pop("port"), 0)
                directives.append(Inject(at_ms, dp, port, headers_from_kv(kv)))
            elif verb == "stats":
                kv = _kv_tokens(rest, lineno)
                if "dp" not in kv:
                    raise TraceError(lineno, "stats needs dp=")
                dp = int(kv.pop("dp"), 0)
                directives.append(Stats(at_ms, dp, match_from_kv(kv)))
            else:
                raise TraceError(lineno, f"unknown directive {verb!r}")
        except ValueError as exc:
            raise TraceError(lineno, str(exc)) from None
    return directives


@dataclass(slots=True)
class Scenario:
    topology_text: str
    composition: CompositionSpec
    module_specs: list[ModuleSpec]
    trace: list[Directive]


def load_scenario(topology_path: str, composition_path: str,
                  modules_path: str, trace_path: str) -> Scenario:
    """Read and parse all scenario files; any failure raises LoadError."""

    def read(path: str) -> str:
        try:
            return Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise LoadError(f"{path}: {exc}") from None

    topology_text = read(topology_path)
    try:
        scratch = parse_topology(topology_text, RunLog())
    except TopologyError as exc:
        raise LoadError(f"{topology_path}: {exc}") from None
    try:
        composition = parse_spec(read(composition_path))
    except SpecError as exc:
        raise LoadError(f"{composition_path}: {exc}") from None
    try:
        module_specs = parse_module_config(read(modules_path))
    except ModuleConfigError as exc:
        raise LoadError(f"{modules_path}: {exc}") from None
    try:
        trace = parse_trace(read(trace_path))
    except TraceError as exc:
        raise LoadError(f"{trace_path}: {exc}") from None

    configured = {ms.name for ms in module_specs}
    for name in tree_leaf_names(composition.execution):
        if name not in configured:
            raise LoadError(f"{modules_path}: composition module {name!r} "
                            "has no configuration section")
    for d in trace:
        if isinstance(d, (Inject, Stats)) and d.dp not in scratch.switches:
            raise LoadError(f"{trace_path}: directive references unknown datapath {d.dp}")
        if isinstance(d, Inject) and d.port not in scratch.switches[d.dp].ports:
            raise LoadError(f"{trace_path}: switch {d.dp} has no port {d.port}")
    return Scenario(topology_text, composition, module_specs, trace)


def _grouped_backends(scenario: Scenario, log: RunLog) -> dict[str, Backend]:
    groups: dict[str, list] = {}
    for ms in scenario.module_specs:
        groups.setdefault(ms.backend, []).append(ms.build())
    return {bname: Backend(bname, mods, log) for bname, mods in groups.items()}


class _EngineBase:
    scenario: Scenario
    log: RunLog
    core: Core
    shim: Shim
    net: Network
    backends: dict[str, Backend]

    def _pump(self) -> None:
        raise NotImplementedError

    def start(self) -> None:
        self.shim.start()
        for backend in self.backends.values():
            backend.start()
        self._pump()
        missing = self.core.unregistered_modules()
        if missing:
            raise LoadError(f"composition modules never registered: {missing}")

    def run(self) -> None:
        stats_module = self.scenario.composition.modules[0].name
        module_backend = {ms.name: ms.backend for ms in self.scenario.module_specs}
        for d in self.scenario.trace:
            self.log.time_ms = d.at_ms
            self.shim.advance_time(d.at_ms)
            self._pump()
            if isinstance(d, Inject):
                self.shim.inject(d.headers, d.dp, d.port)
                self._pump()
            elif isinstance(d, Stats):
                backend = self.backends[module_backend[stats_module]]
                backend.request_stats(stats_module, StatsRequest(d.dp, d.match))
                self._pump()

    def report(self) -> RunReport:
        report = RunReport()
        report.log = self.log.entries()
        report.tables = [
            TableRow(dpid, e.rule.priority, str(e.rule.match),
                     format_actions(e.rule.actions), e.packets,
                     e.rule.idle_timeout, e.rule.hard_timeout)
            for dpid, e in self.net.table_rows()
        ]
        report.metrics = {name: self.core.metrics[name] for name in METRIC_NAMES}
        return report


class Engine(_EngineBase):
    """All engine components wired over the in-memory transport."""

    def __init__(self, scenario: Scenario, log: Optional[RunLog] = None,
                 hub: Optional[InMemHub] = None):
        self.scenario = scenario
        self.log = log if log is not None else RunLog()
        self.hub = hub if hub is not None else InMemHub()
        self.net = parse_topology(scenario.topology_text, self.log)
        self.core = Core(scenario.composition, self.log)
        self.shim = Shim(self.net, self.log)

        shim_peer = self.core.register_peer(
            "shim", "shim", self.hub.channel("core->shim", self.shim.receive))
        self.shim.attach(self.hub.channel(
            "shim->core", lambda frame: self.core.receive(shim_peer, frame)))

        self.backends = _grouped_backends(scenario, self.log)
        for bname, backend in self.backends.items():
            peer = self.core.register_peer(
                bname, "backend", self.hub.channel(f"core->{bname}", backend.receive))
            backend.attach(self.hub.channel(
                f"{bname}->core", lambda frame, p=peer: self.core.receive(p, frame)))

    def _pump(self) -> None:
        self.hub.pump()


class SocketEngine(_EngineBase):
    """Same components over loopback TCP (interop testing)."""

    def __init__(self, scenario: Scenario, log: Optional[RunLog] = None):
        self.scenario = scenario
        self.log = log if log is not None else RunLog()
        self.hub = SocketHub()
        self.net = parse_topology(scenario.topology_text, self.log)
        self.core = Core(scenario.composition, self.log)
        self.shim = Shim(self.net, self.log)

        self.shim.attach(self.hub.connect_client(self.shim.receive))

        def shim_factory(send):
            peer = self.core.register_peer("shim", "shim", send)
            return lambda frame: self.core.receive(peer, frame)

        self.hub.accept_peer(shim_factory)

        self.backends = _grouped_backends(scenario, self.log)
        for bname, backend in self.backends.items():
            backend.attach(self.hub.connect_client(backend.receive))

            def factory(send, name=bname):
                peer = self.core.register_peer(name, "backend", send)
                return lambda frame: self.core.receive(peer, frame)

            self.hub.accept_peer(factory)

    def _pump(self) -> None:
        self.hub.pump()

    def close(self) -> None:
        self.hub.close()


def run_scenario(scenario: Scenario, transport: str = "inmem") -> tuple[RunReport, int]:
    """Run a scenario to completion; returns (report, exit code).

    Exit code 0 for a clean run, 2 when protocol errors occurred.
    """
    if transport == "inmem":
        engine = Engine(scenario)
        engine.start()
        engine.run()
        report = engine.report()
    elif transport == "socket":
        engine = SocketEngine(scenario)
        try:
            engine.start()
            engine.run()
            report = engine.report()
        finally:
            engine.close()
    else:
        raise LoadError(f"unknown transport {transport!r}")
    code = 2 if report.metrics.get("protocol_errors") else 0
    return report, code
