"""Bundled deterministic sample modules and their configuration file.

Four module kinds are available:

  learning_switch   L2 learning: learns eth_src -> in_port per datapath,
                    installs an output rule once the destination is known,
                    floods unknown destinations.
  firewall          ordered ACL of (match, allow|deny); the first covering
                    entry decides. A deny installs a priority-200 drop
                    rule; allow and no-match produce nothing.
  router            longest-prefix routing on ip_dst: rewrites eth_dst to
                    the next hop and outputs on the configured port
                    (priority 100), plus a packet-out for the triggering
                    packet.
  load_balancer     round-robin VIP: rewrites ip_dst/eth_dst to the chosen
                    server per (ip_src, tp_src) session, priority 150.

Configuration file grammar (UTF-8, '#' comments, parsed strictly):

    [<kind> <name>]                     # one section per module instance
    backend = <backend name>            # optional, default "b0"
    # firewall:
    deny  <field>=<value> ...           # fields as in a match; ip fields
    allow <field>=<value> ...           #   take addr/prefix
    # router:
    route <prefix> port=<n> next_hop=<mac> [dp=<dpid>]
    # load_balancer:
    vip = <ip>
    server ip=<ip> mac=<mac> port=<n> [dp=<dpid>]

Router and server entries may be scoped to one datapath with dp=; port
numbers are switch-local, so multi-switch scenarios scope each entry.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .backend import AppModule
from .sbi import (
    Drop,
    Event,
    FlowModAdd,
    FlowRule,
    Match,
    Output,
    PacketIn,
    PacketOut,
    SetField,
    Flood,
    match_covers,
    match_from_kv,
    parse_ip,
    parse_mac,
    parse_prefix,
    prefix_mask,
)

MODULE_KINDS = ("learning_switch", "firewall", "router", "load_balancer")

FIREWALL_PRIORITY = 200
LOAD_BALANCER_PRIORITY = 150
ROUTER_PRIORITY = 100
LEARNING_PRIORITY = 100
LEARNING_IDLE_TIMEOUT = 60


def make_learning_switch(name: str) -> AppModule:
    def handler(ev: Event, state: dict):
        if not isinstance(ev, PacketIn):
            return []
        h = ev.headers
        state[(ev.datapath, h.eth_src)] = ev.in_port
        port = state.get((ev.datapath, h.eth_dst))
        if port is None:
            return [PacketOut(ev.datapath, h, (Flood(),))]
        rule = FlowRule(LEARNING_PRIORITY, Match(eth_dst=h.eth_dst), (Output(port),),
                        idle_timeout=LEARNING_IDLE_TIMEOUT)
        return [FlowModAdd(ev.datapath, rule), PacketOut(ev.datapath, h, (Output(port),))]

    return AppModule(name, handler, state={})


@dataclass(frozen=True, slots=True)
class AclEntry:
    match: Match
    allow: bool


def make_firewall(name: str, acl: list[AclEntry]) -> AppModule:
    def handler(ev: Event, _state):
        if not isinstance(ev, PacketIn):
            return []
        for entry in acl:
            if match_covers(entry.match, ev.headers):
                if entry.allow:
                    return []
                rule = FlowRule(FIREWALL_PRIORITY, entry.match, (Drop(),))
                return [FlowModAdd(ev.datapath, rule)]
        return []

    return AppModule(name, handler)


@dataclass(frozen=True, slots=True)
class Route:
    prefix: tuple[int, int]
    out_port: int
    next_hop_mac: int
    dp: Optional[int] = None


def make_router(name: str, routes: list[Route]) -> AppModule:
    def handler(ev: Event, _state):
        if not isinstance(ev, PacketIn):
            return []
        dst = ev.headers.ip_dst
        best: Optional[Route] = None
        for r in routes:
            if r.dp is not None and r.dp != ev.datapath:
                continue
            addr, plen = r.prefix
            if (dst & prefix_mask(plen)) != addr:
                continue
            if best is None or plen > best.prefix[1]:
                best = r
        if best is None:
            return []
        actions = (SetField("eth_dst", best.next_hop_mac), Output(best.out_port))
        rule = FlowRule(ROUTER_PRIORITY, Match(ip_dst=best.prefix), actions)
        return [FlowModAdd(ev.datapath, rule),
                PacketOut(ev.datapath, ev.headers, actions)]

    return AppModule(name, handler)


@dataclass(frozen=True, slots=True)
class Server:
    ip: int
    mac: int
    port: int
    dp: Optional[int] = None


@dataclass(slots=True)
class LbState:
    cursor: int = 0


def make_load_balancer(name: str, vip: int, servers: list[Server]) -> AppModule:
    def handler(ev: Event, state: LbState):
        if not isinstance(ev, PacketIn) or ev.headers.ip_dst != vip:
            return []
        pool = [s for s in servers if s.dp in (None, ev.datapath)]
        if not pool:
            return []
        server = pool[state.cursor % len(pool)]
        state.cursor += 1
        h = ev.headers
        match = Match(ip_src=(h.ip_src, 32), ip_dst=(vip, 32), tp_src=h.tp_src)
        actions = (SetField("ip_dst", server.ip), SetField("eth_dst", server.mac),
                   Output(server.port))
        rule = FlowRule(LOAD_BALANCER_PRIORITY, match, actions)
        return [FlowModAdd(ev.datapath, rule), PacketOut(ev.datapath, h, actions)]

    return AppModule(name, handler, state=LbState())


# --- Configuration file ---------------------------------------------------

class ModuleConfigError(Exception):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(slots=True)
class ModuleSpec:
    kind: str
    name: str
    backend: str = "b0"
    acl: list[AclEntry] = field(default_factory=list)
    routes: list[Route] = field(default_factory=list)
    vip: Optional[int] = None
    servers: list[Server] = field(default_factory=list)

    def build(self) -> AppModule:
        if self.kind == "learning_switch":
            return make_learning_switch(self.name)
        if self.kind == "firewall":
            return make_firewall(self.name, self.acl)
        if self.kind == "router":
            return make_router(self.name, self.routes)
        if self.kind == "load_balancer":
            if self.vip is None:
                raise ValueError(f"load_balancer {self.name!r} has no vip")
            return make_load_balancer(self.name, self.vip, self.servers)
        raise ValueError(f"unknown module kind {self.kind!r}")


_SECTION_RE = re.compile(r"^\[(\w+)\s+([\w.-]+)\]$")


def _split_kv(tokens: list[str], lineno: int) -> dict[str, str]:
    out: dict[str, str] = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or not key or not value:
            raise ModuleConfigError(lineno, f"expected key=value, found {tok!r}")
        if key in out:
            raise ModuleConfigError(lineno, f"duplicate key {key!r}")
        out[key] = value
    return out


def parse_module_config(text: str) -> list[ModuleSpec]:
    """Strictly parse the module configuration file."""
    specs: list[ModuleSpec] = []
    current: Optional[ModuleSpec] = None
    names: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            kind, name = m.group(1), m.group(2)
            if kind not in MODULE_KINDS:
                raise ModuleConfigError(lineno, f"unknown module kind {kind!r}")
            if name in names:
                raise ModuleConfigError(lineno, f"duplicate module name {name!r}")
            names.add(name)
            current = ModuleSpec(kind, name)
            specs.append(current)
            continue
        if current is None:
            raise ModuleConfigError(lineno, "content before first [section]")
        tokens = line.split()
        word = tokens[0]
        try:
            if word == "backend":
                if len(tokens) != 3 or tokens[1] != "=":
                    raise ModuleConfigError(lineno, "expected: backend = <name>")
                current.backend = tokens[2]
            elif word in ("deny", "allow") and current.kind == "firewall":
                kv = _split_kv(tokens[1:], lineno)
                current.acl.append(AclEntry(match_from_kv(kv), allow=(word == "allow")))
            elif word == "route" and current.kind == "router":
                if len(tokens) < 2:
                    raise ModuleConfigError(lineno, "route needs a prefix")
                prefix = parse_prefix(tokens[1])
                kv = _split_kv(tokens[2:], lineno)
                extra = set(kv) - {"port", "next_hop", "dp"}
                if extra or "port" not in kv or "next_hop" not in kv:
                    raise ModuleConfigError(lineno, "route needs port= and next_hop=")
                current.routes.append(Route(
                    prefix, int(kv["port"], 0), parse_mac(kv["next_hop"]),
                    int(kv["dp"], 0) if "dp" in kv else None,
                ))
            elif word == "vip" and current.kind == "load_balancer":
                if len(tokens) != 3 or tokens[1] != "=":
                    raise ModuleConfigError(lineno, "expected: vip = <ip>")
                current.vip = parse_ip(tokens[2])
            elif word == "server" and current.kind == "load_balancer":
                kv = _split_kv(tokens[1:], lineno)
                extra = set(kv) - {"ip", "mac", "port", "dp"}
                if extra or not {"ip", "mac", "port"} <= set(kv):
                    raise ModuleConfigError(lineno, "server needs ip=, mac=, port=")
                current.servers.append(Server(
                    parse_ip(kv["ip"]), parse_mac(kv["mac"]), int(kv["port"], 0),
                    int(kv["dp"], 0) if "dp" in kv else None,
                ))
            else:
                raise ModuleConfigError(
                    lineno, f"unknown directive {word!r} for kind {current.kind!r}")
        except ValueError as exc:
            raise ModuleConfigError(lineno, str(exc)) from None
    return specs
