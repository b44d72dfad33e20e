"""Deterministic simulated data plane fused with the network-side Shim.

Switches hold priority-ordered flow tables; a packet is handled by the
highest-priority covering entry (ties to the earliest installed), its
actions are applied, and outputs traverse links depth-first in ascending
port order. A table miss raises exactly one PacketIn. Simulated time only
advances through explicit directives, making timeout-driven FlowRemoved
emission reproducible.

Topology file grammar (UTF-8, '#' comments):

    switch <dpid> ports=<n>
    host <name> mac=<mac> ip=<ip> at <dpid>:<port>
    link <dpid>:<port> <dpid>:<port>
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from . import wire
from .report import RunLog
from .sbi import (
    CONTROLLER,
    FLOOD,
    Event,
    FlowModAdd,
    FlowModDelete,
    FlowRemoved,
    FlowRule,
    PacketHeaders,
    PacketIn,
    PacketOut,
    RemovalReason,
    StatsEntry,
    StatsReply,
    StatsRequest,
    apply_actions,
    format_ip,
    match_covers,
    match_intersect,
    parse_ip,
    parse_mac,
)
from .wire import ErrorCode, Message, MsgType

HOP_BUDGET = 64


@dataclass(frozen=True, slots=True)
class Host:
    name: str
    mac: int
    ip: int
    datapath: int
    port: int


@dataclass(slots=True)
class TableEntry:
    rule: FlowRule
    install_ms: int
    last_hit_ms: int
    packets: int
    seq: int


class TopologyError(Exception):
    pass


@dataclass(slots=True)
class Switch:
    dpid: int
    ports: frozenset[int]
    table: list[TableEntry] = field(default_factory=list)


class Network:
    """Switches, hosts, links, and the flow-table machinery."""

    def __init__(self, log: RunLog):
        self._log = log
        self.switches: dict[int, Switch] = {}
        self.hosts: list[Host] = []
        self.links: dict[tuple[int, int], tuple[int, int]] = {}
        self.host_at: dict[tuple[int, int], Host] = {}
        self.now_ms = 0
        self._next_entry_seq = 1

    # -- construction ------------------------------------------------------

    def add_switch(self, dpid: int, port_count: int) -> None:
        if dpid in self.switches:
            raise TopologyError(f"duplicate datapath {dpid}")
        if dpid == 0:
            raise TopologyError("datapath id 0 is reserved")
        self.switches[dpid] = Switch(dpid, frozenset(range(1, port_count + 1)))

    def _check_port(self, dpid: int, port: int) -> None:
        sw = self.switches.get(dpid)
        if sw is None:
            raise TopologyError(f"unknown datapath {dpid}")
        if port not in sw.ports:
            raise TopologyError(f"switch {dpid} has no port {port}")
        if (dpid, port) in self.links or (dpid, port) in self.host_at:
            raise TopologyError(f"port {dpid}:{port} already attached")

    def add_host(self, host: Host) -> None:
        self._check_port(host.datapath, host.port)
        self.hosts.append(host)
        self.host_at[(host.datapath, host.port)] = host

    def add_link(self, a: tuple[int, int], b: tuple[int, int]) -> None:
        self._check_port(*a)
        self._check_port(*b)
        if a == b:
            raise TopologyError(f"link endpoints coincide: {a}")
        self.links[a] = b
        self.links[b] = a

    # -- flow table --------------------------------------------------------

    def install_flow(self, cmd: FlowModAdd) -> None:
        sw = self.switches[cmd.datapath]
        rule = cmd.rule
        sw.table = [e for e in sw.table
                    if not (e.rule.priority == rule.priority and e.rule.match == rule.match)]
        sw.table.append(TableEntry(rule, self.now_ms, self.now_ms, 0, self._next_entry_seq))
        self._next_entry_seq += 1
        self._log.append("flow_installed", 0, 0, cmd.datapath,
                         f"prio={rule.priority} match[{rule.match}]")

    def delete_flows(self, cmd: FlowModDelete) -> int:
        sw = self.switches[cmd.datapath]
        kept, removed = [], 0
        for e in sw.table:
            if match_intersect(e.rule.match, cmd.match) == e.rule.match:
                removed += 1
            else:
                kept.append(e)
        sw.table = kept
        self._log.append("flows_deleted", 0, 0, cmd.datapath,
                         f"match[{cmd.match}] removed={removed}")
        return removed

    def _lookup(self, sw: Switch, h: PacketHeaders) -> Optional[TableEntry]:
        best: Optional[TableEntry] = None
        for e in sw.table:
            if not match_covers(e.rule.match, h):
                continue
            if best is None or (e.rule.priority, -e.seq) > (best.rule.priority, -best.seq):
                best = e
        return best

    # -- packet processing ---------------------------------------------------

    def inject(self, headers: PacketHeaders, dpid: int, port: int) -> list[Event]:
        """Entry point for packets arriving from outside the network."""
        sw = self.switches.get(dpid)
        if sw is None:
            raise TopologyError(f"unknown datapath {dpid}")
        if port not in sw.ports:
            raise TopologyError(f"switch {dpid} has no port {port}")
        h = replace(headers, in_port=port)
        budget = [HOP_BUDGET]
        return self._process(h, dpid, port, budget)

    def _process(self, h: PacketHeaders, dpid: int, port: int,
                 budget: list[int]) -> list[Event]:
        if budget[0] <= 0:
            self._log.append("warning", 0, 0, dpid, "hop budget exhausted; packet stopped")
            return []
        budget[0] -= 1
        sw = self.switches[dpid]
        entry = self._lookup(sw, h)
        if entry is None:
            self._log.append("table_miss", 0, 0, dpid,
                             f"in_port={port} -> packet_in")
            return [PacketIn(h, dpid)]
        entry.packets += 1
        entry.last_hit_ms = self.now_ms
        h2, outputs, dropped = apply_actions(h, entry.rule.actions)
        if dropped:
            self._log.append("packet_dropped", 0, 0, dpid,
                             f"prio={entry.rule.priority} match[{entry.rule.match}]")
            return []
        return self._emit(h2, dpid, port, outputs, budget)

    def _emit(self, h: PacketHeaders, dpid: int, in_port: int, outputs: set,
              budget: list[int]) -> list[Event]:
        sw = self.switches[dpid]
        events: list[Event] = []
        ports: list[int] = sorted(p for p in outputs if isinstance(p, int))
        if FLOOD in outputs:
            ports = sorted(set(ports) | (sw.ports - {in_port}))
        if CONTROLLER in outputs:
            events.append(PacketIn(h, dpid))
        for out_port in ports:
            if out_port not in sw.ports:
                self._log.append("warning", 0, 0, dpid,
                                 f"output to nonexistent port {out_port} ignored")
                continue
            link = self.links.get((dpid, out_port))
            if link is not None:
                peer_dp, peer_port = link
                h_next = replace(h, in_port=peer_port)
                events.extend(self._process(h_next, peer_dp, peer_port, budget))
                continue
            host = self.host_at.get((dpid, out_port))
            if host is not None:
                self._log.append("packet_delivered", 0, 0, dpid,
                                 f"host={host.name} port={out_port} "
                                 f"ip_dst={format_ip(h.ip_dst)} tp_src={h.tp_src}")
            else:
                self._log.append("packet_unattached", 0, 0, dpid,
                                 f"port={out_port} has no host or link")
        return events

    def packet_out(self, cmd: PacketOut) -> list[Event]:
        """Apply a packet-out's actions; no table lookup for the packet itself."""
        h, outputs, dropped = apply_actions(cmd.headers, cmd.actions)
        if dropped:
            self._log.append("packet_dropped", 0, 0, cmd.datapath, "packet_out with drop")
            return []
        budget = [HOP_BUDGET]
        return self._emit(h, cmd.datapath, h.in_port, outputs, budget)

    # -- time and state -------------------------------------------------------

    def advance_time(self, to_ms: int) -> list[FlowRemoved]:
        """Advance simulated time; expire entries and report removals."""
        if to_ms < self.now_ms:
            raise ValueError(f"time must be monotone: {to_ms} < {self.now_ms}")
        self.now_ms = to_ms
        removals: list[tuple[int, int, int, FlowRemoved]] = []
        for dpid in sorted(self.switches):
            sw = self.switches[dpid]
            kept = []
            for e in sw.table:
                r = e.rule
                hard_hit = r.hard_timeout > 0 and self.now_ms - e.install_ms >= r.hard_timeout * 1000
                idle_hit = r.idle_timeout > 0 and self.now_ms - e.last_hit_ms >= r.idle_timeout * 1000
                if hard_hit or idle_hit:
                    reason = RemovalReason.HARD if hard_hit else RemovalReason.IDLE
                    removals.append((dpid, r.priority, e.seq, FlowRemoved(dpid, r, reason)))
                else:
                    kept.append(e)
            sw.table = kept
        removals.sort(key=lambda item: item[:3])
        events = [item[3] for item in removals]
        for ev in events:
            self._log.append("flow_expired", 0, 0, ev.datapath,
                             f"reason={ev.reason.name.lower()} prio={ev.rule.priority} "
                             f"match[{ev.rule.match}]")
        return events

    def stats(self, req: StatsRequest) -> StatsReply:
        sw = self.switches[req.datapath]
        entries = [
            StatsEntry(e.rule.priority, e.rule.match, e.rule.actions, e.packets)
            for e in sw.table
            if match_intersect(e.rule.match, req.match) is not None
        ]
        return StatsReply(req.datapath, tuple(entries))

    def table_rows(self) -> list[tuple[int, TableEntry]]:
        """(dpid, entry) rows in deterministic dump order."""
        rows = []
        for dpid in sorted(self.switches):
            entries = sorted(self.switches[dpid].table,
                             key=lambda e: (-e.rule.priority, e.seq))
            rows.extend((dpid, e) for e in entries)
        return rows


def parse_topology(text: str, log: RunLog) -> Network:
    net = Network(log)
    links: list[tuple[tuple[int, int], tuple[int, int], int]] = []
    hosts: list[tuple[Host, int]] = []

    def endpoint(token: str, lineno: int) -> tuple[int, int]:
        dp_s, sep, port_s = token.partition(":")
        if not sep:
            raise TopologyError(f"line {lineno}: expected <dpid>:<port>, found {token!r}")
        try:
            return int(dp_s, 0), int(port_s, 0)
        except ValueError:
            raise TopologyError(f"line {lineno}: bad endpoint {token!r}") from None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            if tokens[0] == "switch" and len(tokens) == 3 and tokens[2].startswith("ports="):
                net.add_switch(int(tokens[1], 0), int(tokens[2][len("ports="):], 0))
            elif tokens[0] == "host" and len(tokens) == 6 and tokens[4] == "at":
                kv = {}
                for tok in tokens[2:4]:
                    key, sep, value = tok.partition("=")
                    if not sep:
                        raise TopologyError(f"line {lineno}: expected key=value in host")
                    kv[key] = value
                if set(kv) != {"mac", "ip"}:
                    raise TopologyError(f"line {lineno}: host needs mac= and ip=")
                dp, port = endpoint(tokens[5], lineno)
                hosts.append((Host(tokens[1], parse_mac(kv["mac"]), parse_ip(kv["ip"]),
                                   dp, port), lineno))
            elif tokens[0] == "link" and len(tokens) == 3:
                links.append((endpoint(tokens[1], lineno), endpoint(tokens[2], lineno), lineno))
            else:
                raise TopologyError(f"line {lineno}: unrecognized directive {line!r}")
        except ValueError as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None
    # Attach hosts and links after all switches exist.
    for host, lineno in hosts:
        try:
            net.add_host(host)
        except TopologyError as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None
    for a, b, lineno in links:
        try:
            net.add_link(a, b)
        except TopologyError as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None
    return net


class Shim:
    """Adapts the simulated network to the intermediate protocol."""

    def __init__(self, network: Network, log: RunLog):
        self.network = network
        self._log = log
        self._send: Optional[Callable[[bytes], None]] = None
        self._next_xid = 1

    def attach(self, send: Callable[[bytes], None]) -> None:
        self._send = send

    def _emit(self, msg: Message) -> None:
        self._send(wire.encode_message(msg))

    def start(self) -> None:
        self._emit(Message.hello(self._fresh_xid()))

    def _fresh_xid(self) -> int:
        xid = self._next_xid
        self._next_xid += 1
        return xid

    def _send_events(self, events: list[Event]) -> None:
        for ev in events:
            self._emit(Message.sbi(0, 0, ev))

    def inject(self, headers: PacketHeaders, dpid: int, port: int) -> None:
        self._send_events(self.network.inject(headers, dpid, port))

    def advance_time(self, to_ms: int) -> None:
        self._send_events(self.network.advance_time(to_ms))

    def receive(self, frame: bytes) -> None:
        try:
            msg, _ = wire.decode_message(frame)
        except (wire.ProtocolError, wire.NeedMoreData) as exc:
            self._log.append("shim_error", 0, 0, 0, str(exc))
            return
        mtype = MsgType(msg.header.msg_type)
        if mtype is MsgType.HELLO:
            return  # reply to our own hello; nothing further to do
        if mtype is MsgType.ERROR:
            body = msg.payload
            self._log.append("shim_error", msg.header.xid, msg.header.module_id, 0,
                             f"code={body.code} {body.text}")
            return
        if mtype is not MsgType.SBI:
            self._emit(Message.error(msg.header.xid, 0, ErrorCode.PROTOCOL,
                                     f"unexpected {mtype.name} at shim"))
            return
        cmd = msg.payload
        if cmd.datapath not in self.network.switches:
            self._emit(Message.error(msg.header.xid, msg.header.module_id,
                                     ErrorCode.UNKNOWN_DATAPATH,
                                     f"datapath {cmd.datapath} does not exist"))
            return
        if isinstance(cmd, FlowModAdd):
            self.network.install_flow(cmd)
        elif isinstance(cmd, FlowModDelete):
            self.network.delete_flows(cmd)
        elif isinstance(cmd, PacketOut):
            self._send_events(self.network.packet_out(cmd))
        elif isinstance(cmd, StatsRequest):
            reply = self.network.stats(cmd)
            self._emit(Message.sbi(msg.header.xid, 0, reply))
        else:
            self._emit(Message.error(msg.header.xid, msg.header.module_id,
                                     ErrorCode.PROTOCOL,
                                     "unexpected event frame at shim"))
