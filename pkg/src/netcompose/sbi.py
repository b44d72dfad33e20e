"""Simplified OpenFlow-like southbound vocabulary.

Packet headers, matches, actions, flow rules, and the asynchronous
events / commands exchanged between the network and application modules.
Also the match algebra (cover / intersect) and conflict predicate that
the composition policies are built on.

All addresses are plain integers internally: MACs are 48-bit, IPv4
addresses 32-bit. ``format_mac``/``parse_mac`` and ``format_ip``/
``parse_ip`` convert to the usual text forms.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Optional, Union

# Header fields and their bit widths. Order matters: it is the canonical
# field order used by the wire codec and by iteration everywhere else.
FIELD_BITS = {
    "in_port": 32,
    "eth_src": 48,
    "eth_dst": 48,
    "eth_type": 16,
    "ip_src": 32,
    "ip_dst": 32,
    "ip_proto": 8,
    "tp_src": 16,
    "tp_dst": 16,
}

HEADER_FIELDS = tuple(FIELD_BITS)
IP_FIELDS = ("ip_src", "ip_dst")

# apply_actions output-set markers for non-port destinations.
FLOOD = "flood"
CONTROLLER = "controller"


def _check_width(name: str, value: int) -> int:
    bits = FIELD_BITS[name]
    if not isinstance(value, int) or value < 0 or value >> bits:
        raise ValueError(f"{name} out of range for {bits}-bit field: {value!r}")
    return value


def parse_mac(text: str) -> int:
    parts = text.split(":")
    if len(parts) != 6:
        raise ValueError(f"bad MAC address: {text!r}")
    try:
        octets = [int(p, 16) for p in parts]
    except ValueError:
        raise ValueError(f"bad MAC address: {text!r}") from None
    if any(o < 0 or o > 255 for o in octets):
        raise ValueError(f"bad MAC address: {text!r}")
    value = 0
    for o in octets:
        value = (value << 8) | o
    return value


def format_mac(value: int) -> str:
    return ":".join(f"{(value >> s) & 0xFF:02x}" for s in range(40, -8, -8))


def parse_ip(text: str) -> int:
    parts = text.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad IPv4 address: {text!r}")
    try:
        octets = [int(p) for p in parts]
    except ValueError:
        raise ValueError(f"bad IPv4 address: {text!r}") from None
    if any(o < 0 or o > 255 for o in octets):
        raise ValueError(f"bad IPv4 address: {text!r}")
    return (octets[0] << 24) | (octets[1] << 16) | (octets[2] << 8) | octets[3]


def format_ip(value: int) -> str:
    return ".".join(str((value >> s) & 0xFF) for s in (24, 16, 8, 0))


def parse_prefix(text: str) -> tuple[int, int]:
    """Parse ``a.b.c.d/len`` (bare address means /32) into (addr, prefix_len)."""
    if "/" in text:
        addr_s, _, len_s = text.partition("/")
        plen = int(len_s)
    else:
        addr_s, plen = text, 32
    if plen < 0 or plen > 32:
        raise ValueError(f"bad prefix length in {text!r}")
    return parse_ip(addr_s), plen


def prefix_mask(plen: int) -> int:
    return 0 if plen == 0 else (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF


def format_prefix(constraint: tuple[int, int]) -> str:
    addr, plen = constraint
    return f"{format_ip(addr)}/{plen}"


@dataclass(frozen=True, slots=True)
class PacketHeaders:
    """Flat packet-header model; unused fields hold 0."""

    in_port: int = 0
    eth_src: int = 0
    eth_dst: int = 0
    eth_type: int = 0
    ip_src: int = 0
    ip_dst: int = 0
    ip_proto: int = 0
    tp_src: int = 0
    tp_dst: int = 0

    def __post_init__(self) -> None:
        for name in HEADER_FIELDS:
            _check_width(name, getattr(self, name))


@dataclass(frozen=True, slots=True)
class Match:
    """Per-field optional constraints; None means wildcard.

    ip_src/ip_dst take (address, prefix_len 0..32) pairs; host bits below
    the prefix are canonicalized to zero so semantically equal matches
    compare equal. Every other field is an exact value.
    """

    in_port: Optional[int] = None
    eth_src: Optional[int] = None
    eth_dst: Optional[int] = None
    eth_type: Optional[int] = None
    ip_src: Optional[tuple[int, int]] = None
    ip_dst: Optional[tuple[int, int]] = None
    ip_proto: Optional[int] = None
    tp_src: Optional[int] = None
    tp_dst: Optional[int] = None

    def __post_init__(self) -> None:
        for name in HEADER_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            if name in IP_FIELDS:
                addr, plen = value
                if plen < 0 or plen > 32:
                    raise ValueError(f"{name} prefix length out of range: {plen}")
                _check_width(name, addr)
                canon = addr & prefix_mask(plen)
                if canon != addr:
                    object.__setattr__(self, name, (canon, plen))
            else:
                _check_width(name, value)

    def constrained_fields(self) -> tuple[str, ...]:
        return tuple(n for n in HEADER_FIELDS if getattr(self, n) is not None)

    def is_match_all(self) -> bool:
        return all(getattr(self, n) is None for n in HEADER_FIELDS)

    def __str__(self) -> str:
        parts = []
        for name in HEADER_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            if name in IP_FIELDS:
                parts.append(f"{name}={format_prefix(value)}")
            elif name in ("eth_src", "eth_dst"):
                parts.append(f"{name}={format_mac(value)}")
            elif name == "eth_type":
                parts.append(f"{name}=0x{value:04x}")
            else:
                parts.append(f"{name}={value}")
        return ",".join(parts) if parts else "*"


MATCH_ALL = Match()


# --- Actions -----------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Output:
    port: int


@dataclass(frozen=True, slots=True)
class Drop:
    pass


@dataclass(frozen=True, slots=True)
class SetField:
    field: str
    value: int

    def __post_init__(self) -> None:
        if self.field not in FIELD_BITS:
            raise ValueError(f"SetField targets unknown field {self.field!r}")
        _check_width(self.field, self.value)


@dataclass(frozen=True, slots=True)
class Flood:
    pass


@dataclass(frozen=True, slots=True)
class ToController:
    pass


Action = Union[Output, Drop, SetField, Flood, ToController]

# Pseudo-fields usable in a conflict scope next to header field names.
ACTION_KIND_FIELDS = ("output", "flood", "to_controller", "drop")
SCOPE_FIELDS = HEADER_FIELDS + ACTION_KIND_FIELDS


def check_action_list(actions: tuple[Action, ...]) -> tuple[Action, ...]:
    """Enforce the list invariant: Drop, if present, must be alone."""
    actions = tuple(actions)
    if any(isinstance(a, Drop) for a in actions) and len(actions) != 1:
        raise ValueError("Drop must be the only action in a list")
    return actions


def format_actions(actions: tuple[Action, ...]) -> str:
    parts = []
    for a in actions:
        if isinstance(a, Output):
            parts.append(f"output:{a.port}")
        elif isinstance(a, Drop):
            parts.append("drop")
        elif isinstance(a, SetField):
            if a.field in ("eth_src", "eth_dst"):
                parts.append(f"set:{a.field}:{format_mac(a.value)}")
            elif a.field in IP_FIELDS:
                parts.append(f"set:{a.field}:{format_ip(a.value)}")
            else:
                parts.append(f"set:{a.field}:{a.value}")
        elif isinstance(a, Flood):
            parts.append("flood")
        elif isinstance(a, ToController):
            parts.append("to_controller")
    return ",".join(parts) if parts else "-"


@dataclass(frozen=True, slots=True)
class FlowRule:
    priority: int
    match: Match
    actions: tuple[Action, ...]
    idle_timeout: int = 0
    hard_timeout: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.priority <= 0xFFFF:
            raise ValueError(f"priority out of 16-bit range: {self.priority}")
        if self.idle_timeout < 0 or self.hard_timeout < 0:
            raise ValueError("timeouts must be >= 0")
        object.__setattr__(self, "actions", check_action_list(self.actions))


# --- Events and commands ------------------------------------------------

class RemovalReason(IntEnum):
    IDLE = 1
    HARD = 2


def _check_datapath(datapath: int) -> None:
    if datapath == 0:
        raise ValueError("datapath_id must be nonzero on events and commands")


@dataclass(frozen=True, slots=True)
class PacketIn:
    headers: PacketHeaders
    datapath: int
    in_port: int = -1

    def __post_init__(self) -> None:
        _check_datapath(self.datapath)
        if self.in_port == -1:
            object.__setattr__(self, "in_port", self.headers.in_port)
        elif self.in_port != self.headers.in_port:
            raise ValueError("PacketIn in_port must equal headers.in_port")


@dataclass(frozen=True, slots=True)
class PortStatus:
    datapath: int
    port: int
    up: bool

    def __post_init__(self) -> None:
        _check_datapath(self.datapath)


@dataclass(frozen=True, slots=True)
class FlowRemoved:
    datapath: int
    rule: FlowRule
    reason: RemovalReason

    def __post_init__(self) -> None:
        _check_datapath(self.datapath)


@dataclass(frozen=True, slots=True)
class StatsEntry:
    priority: int
    match: Match
    actions: tuple[Action, ...]
    packet_count: int


@dataclass(frozen=True, slots=True)
class StatsReply:
    datapath: int
    entries: tuple[StatsEntry, ...] = ()

    def __post_init__(self) -> None:
        _check_datapath(self.datapath)
        object.__setattr__(self, "entries", tuple(self.entries))


Event = Union[PacketIn, PortStatus, FlowRemoved, StatsReply]


@dataclass(frozen=True, slots=True)
class FlowModAdd:
    datapath: int
    rule: FlowRule

    def __post_init__(self) -> None:
        _check_datapath(self.datapath)


@dataclass(frozen=True, slots=True)
class FlowModDelete:
    datapath: int
    match: Match

    def __post_init__(self) -> None:
        _check_datapath(self.datapath)


@dataclass(frozen=True, slots=True)
class PacketOut:
    datapath: int
    headers: PacketHeaders
    actions: tuple[Action, ...]

    def __post_init__(self) -> None:
        _check_datapath(self.datapath)
        object.__setattr__(self, "actions", check_action_list(self.actions))


@dataclass(frozen=True, slots=True)
class StatsRequest:
    datapath: int
    match: Match = MATCH_ALL

    def __post_init__(self) -> None:
        _check_datapath(self.datapath)


Command = Union[FlowModAdd, FlowModDelete, PacketOut, StatsRequest]

EVENT_KINDS = ("packet_in", "port_status", "flow_removed", "stats_reply")

_EVENT_KIND_BY_TYPE = {
    PacketIn: "packet_in",
    PortStatus: "port_status",
    FlowRemoved: "flow_removed",
    StatsReply: "stats_reply",
}


def event_kind(ev: Event) -> str:
    return _EVENT_KIND_BY_TYPE[type(ev)]


def _parse_header_value(name: str, text: str) -> int:
    if name in ("eth_src", "eth_dst"):
        return parse_mac(text)
    if name in IP_FIELDS:
        return parse_ip(text)
    return int(text, 0)


def headers_from_kv(pairs: dict[str, str]) -> PacketHeaders:
    """Build headers from textual field=value pairs (trace/config syntax)."""
    fields = {}
    for key, value in pairs.items():
        if key not in FIELD_BITS:
            raise ValueError(f"unknown header field {key!r}")
        fields[key] = _parse_header_value(key, value)
    return PacketHeaders(**fields)


def match_from_kv(pairs: dict[str, str]) -> Match:
    """Build a match from textual field=value pairs; ip fields take prefixes."""
    fields: dict[str, object] = {}
    for key, value in pairs.items():
        if key not in FIELD_BITS:
            raise ValueError(f"unknown match field {key!r}")
        if key in IP_FIELDS:
            fields[key] = parse_prefix(value)
        else:
            fields[key] = _parse_header_value(key, value)
    return Match(**fields)


# --- Match algebra ------------------------------------------------------

def match_covers(m: Match, h: PacketHeaders) -> bool:
    """True iff every constrained field of m is satisfied by h."""
    for name in HEADER_FIELDS:
        constraint = getattr(m, name)
        if constraint is None:
            continue
        value = getattr(h, name)
        if name in IP_FIELDS:
            addr, plen = constraint
            if (value & prefix_mask(plen)) != addr:
                return False
        elif value != constraint:
            return False
    return True


def _intersect_prefix(c1: tuple[int, int], c2: tuple[int, int]) -> Optional[tuple[int, int]]:
    # Longer prefix survives iff its network lies inside the shorter one.
    (a1, p1), (a2, p2) = c1, c2
    if p1 > p2:
        (a1, p1), (a2, p2) = (a2, p2), (a1, p1)
    if (a2 & prefix_mask(p1)) != a1:
        return None
    return (a2, p2)


def match_intersect(m1: Match, m2: Match) -> Optional[Match]:
    """Field-wise conjunction of two matches; None iff no header satisfies both."""
    merged: dict[str, object] = {}
    for name in HEADER_FIELDS:
        c1 = getattr(m1, name)
        c2 = getattr(m2, name)
        if c1 is None and c2 is None:
            continue
        if c1 is None or c2 is None:
            merged[name] = c1 if c2 is None else c2
        elif name in IP_FIELDS:
            common = _intersect_prefix(c1, c2)
            if common is None:
                return None
            merged[name] = common
        else:
            if c1 != c2:
                return None
            merged[name] = c1
    return Match(**merged)


def apply_actions(
    h: PacketHeaders, actions: tuple[Action, ...]
) -> tuple[PacketHeaders, set, bool]:
    """Apply an action list left to right.

    Returns (transformed headers, output set, dropped flag). Output set
    elements are port numbers plus the FLOOD / CONTROLLER markers.
    """
    outputs: set = set()
    dropped = False
    for a in actions:
        if isinstance(a, SetField):
            h = replace(h, **{a.field: a.value})
        elif isinstance(a, Output):
            outputs.add(a.port)
        elif isinstance(a, Flood):
            outputs.add(FLOOD)
        elif isinstance(a, ToController):
            outputs.add(CONTROLLER)
        elif isinstance(a, Drop):
            dropped = True
            outputs.clear()
    return h, outputs, dropped


def project_actions(
    actions: tuple[Action, ...], scope: Optional[frozenset[str]]
) -> tuple[Action, ...]:
    """Restrict an action list to the fields named by a conflict scope.

    Scope entries are header field names (selecting SetField actions on
    that field) and the pseudo-fields output/flood/to_controller/drop
    (selecting those action kinds). scope=None keeps the full list.
    """
    if scope is None:
        return tuple(actions)
    kept = []
    for a in actions:
        if isinstance(a, SetField):
            if a.field in scope:
                kept.append(a)
        elif isinstance(a, Output):
            if "output" in scope:
                kept.append(a)
        elif isinstance(a, Flood):
            if "flood" in scope:
                kept.append(a)
        elif isinstance(a, ToController):
            if "to_controller" in scope:
                kept.append(a)
        elif isinstance(a, Drop):
            if "drop" in scope:
                kept.append(a)
    return tuple(kept)


def rules_conflict(
    r1: FlowRule, r2: FlowRule, scope: Optional[frozenset[str]] = None
) -> bool:
    """True iff the matches overlap and the (scoped) action lists differ.

    Equal actions on overlapping matches are compatible. Rule priorities
    do not mask conflicts; resolution belongs to the policy layer.
    """
    if match_intersect(r1.match, r2.match) is None:
        return False
    return project_actions(r1.actions, scope) != project_actions(r2.actions, scope)
