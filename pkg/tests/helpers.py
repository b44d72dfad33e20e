"""Shared test fixtures: discretized header space and random generators.

The header space is a small per-field product (2048 headers total) over
which match semantics can be checked exhaustively against brute force.
"""

from __future__ import annotations

import itertools
import random

from netcompose.sbi import (
    FIELD_BITS,
    Drop,
    Flood,
    FlowModAdd,
    FlowModDelete,
    FlowRemoved,
    FlowRule,
    Match,
    Output,
    PacketHeaders,
    PacketIn,
    PacketOut,
    PortStatus,
    RemovalReason,
    SetField,
    StatsEntry,
    StatsReply,
    StatsRequest,
    ToController,
    match_covers,
    parse_ip,
    parse_mac,
    prefix_mask,
)
from netcompose.wire import Message

MAC_A = parse_mac("00:00:00:00:00:0a")
MAC_B = parse_mac("00:00:00:00:00:0b")

FIELD_DOMAINS = {
    "in_port": (1, 2),
    "eth_src": (MAC_A,),
    "eth_dst": (MAC_A, MAC_B),
    "eth_type": (0x0800, 0x0806),
    "ip_src": tuple(parse_ip("10.0.0.0") + i for i in range(4)),
    "ip_dst": tuple(parse_ip("10.0.1.0") + i for i in range(4))
              + tuple(parse_ip("10.0.2.0") + i for i in range(4)),
    "ip_proto": (6, 17),
    "tp_src": (80,),
    "tp_dst": (80, 443),
}

HEADER_SPACE = tuple(
    PacketHeaders(**dict(zip(FIELD_DOMAINS, values)))
    for values in itertools.product(*FIELD_DOMAINS.values())
)

PREFIX_CHOICES = (0, 8, 16, 24, 28, 30, 31, 32)


def random_match(rng: random.Random, constrain_prob: float = 0.45) -> Match:
    fields: dict[str, object] = {}
    for name, domain in FIELD_DOMAINS.items():
        if rng.random() >= constrain_prob:
            continue
        if name in ("ip_src", "ip_dst"):
            plen = rng.choice(PREFIX_CHOICES)
            addr = rng.choice(domain) & prefix_mask(plen)
            fields[name] = (addr, plen)
        else:
            fields[name] = rng.choice(domain)
    return Match(**fields)


def random_headers(rng: random.Random) -> PacketHeaders:
    return PacketHeaders(**{n: rng.choice(d) for n, d in FIELD_DOMAINS.items()})


def naive_covers(m: Match, h: PacketHeaders) -> bool:
    """Independent cover oracle via bit-string comparison."""
    for name in FIELD_DOMAINS:
        constraint = getattr(m, name)
        if constraint is None:
            continue
        value = getattr(h, name)
        if name in ("ip_src", "ip_dst"):
            addr, plen = constraint
            if f"{value:032b}"[:plen] != f"{addr:032b}"[:plen]:
                return False
        elif value != constraint:
            return False
    return True


def covered_set(m: Match) -> frozenset[int]:
    return frozenset(i for i, h in enumerate(HEADER_SPACE) if match_covers(m, h))


# --- Random wire messages ----------------------------------------------

def _random_action(rng: random.Random) -> object:
    kind = rng.randrange(5)
    if kind == 0:
        return Output(rng.randrange(1, 2**32))
    if kind == 1:
        return Drop()
    if kind == 2:
        field = rng.choice(tuple(FIELD_BITS))
        return SetField(field, rng.randrange(2 ** FIELD_BITS[field]))
    if kind == 3:
        return Flood()
    return ToController()


def random_actions(rng: random.Random, max_len: int = 4) -> tuple:
    if rng.random() < 0.15:
        return (Drop(),)
    n = rng.randrange(0, max_len + 1)
    actions = []
    for _ in range(n):
        a = _random_action(rng)
        while isinstance(a, Drop):
            a = _random_action(rng)
        actions.append(a)
    return tuple(actions)


def random_wide_match(rng: random.Random) -> Match:
    """Match over full field ranges (wire coverage, not the small space)."""
    fields: dict[str, object] = {}
    for name, bits in FIELD_BITS.items():
        if rng.random() >= 0.5:
            continue
        if name in ("ip_src", "ip_dst"):
            plen = rng.randrange(0, 33)
            fields[name] = (rng.randrange(2**32) & prefix_mask(plen), plen)
        else:
            fields[name] = rng.randrange(2**bits)
    return Match(**fields)


def random_wide_headers(rng: random.Random) -> PacketHeaders:
    return PacketHeaders(**{n: rng.randrange(2**b) for n, b in FIELD_BITS.items()})


def random_rule(rng: random.Random) -> FlowRule:
    return FlowRule(
        priority=rng.randrange(2**16),
        match=random_wide_match(rng),
        actions=random_actions(rng),
        idle_timeout=rng.randrange(2**16),
        hard_timeout=rng.randrange(2**16),
    )


def random_message(rng: random.Random) -> Message:
    xid = rng.randrange(2**32)
    module_id = rng.randrange(2**32)
    dp = rng.randrange(1, 2**64)
    choice = rng.randrange(14)
    if choice == 0:
        n = rng.randrange(0, 5)
        pairs = rng.sample([(p, v) for p in range(256) for v in range(4)], n)
        return Message.hello(xid, tuple(pairs))
    if choice == 1:
        return Message.error(xid, module_id, rng.randrange(2**16), "boom ✗" * rng.randrange(3))
    if choice == 2:
        return Message.announce(xid, f"mod-{rng.randrange(1000)}")
    if choice == 3:
        return Message.acknowledge(xid, module_id, f"mod-{rng.randrange(1000)}")
    if choice == 4:
        return Message.fence(xid, module_id, rng.randrange(2**64))
    if choice == 5:
        return Message.sbi(xid, 0, PacketIn(random_wide_headers(rng), dp))
    if choice == 6:
        return Message.sbi(xid, module_id,
                           PacketOut(dp, random_wide_headers(rng), random_actions(rng)))
    if choice == 7:
        return Message.sbi(xid, module_id, FlowModAdd(dp, random_rule(rng)))
    if choice == 8:
        return Message.sbi(xid, module_id, FlowModDelete(dp, random_wide_match(rng)))
    if choice == 9:
        return Message.sbi(xid, 0, FlowRemoved(dp, random_rule(rng),
                                               rng.choice((RemovalReason.IDLE,
                                                           RemovalReason.HARD))))
    if choice == 10:
        return Message.sbi(xid, 0, PortStatus(dp, rng.randrange(2**32),
                                              rng.random() < 0.5))
    if choice == 11:
        return Message.sbi(xid, module_id, StatsRequest(dp, random_wide_match(rng)))
    if choice == 12:
        entries = tuple(
            StatsEntry(rng.randrange(2**16), random_wide_match(rng),
                       random_actions(rng), rng.randrange(2**64))
            for _ in range(rng.randrange(0, 4))
        )
        return Message.sbi(xid, 0, StatsReply(dp, entries))
    return Message.fence(xid, module_id)


# --- Core driving harness ------------------------------------------------

class FakePeerOutput:
    """Captures frames the core sends to one peer, decoded."""

    def __init__(self) -> None:
        self.messages: list[Message] = []

    def send(self, frame: bytes) -> None:
        from netcompose.wire import decode_message
        msg, _ = decode_message(frame)
        self.messages.append(msg)

    def take(self) -> list[Message]:
        out = self.messages[:]
        self.messages.clear()
        return out


class CoreHarness:
    """Drives a Core directly: fake shim + one fake backend per module."""

    def __init__(self, spec_text: str, separate_backends: bool = True):
        from netcompose.compspec import parse_spec
        from netcompose.core import Core
        from netcompose.report import RunLog
        from netcompose.wire import encode_message

        self._encode = encode_message
        self.log = RunLog()
        self.spec = parse_spec(spec_text)
        self.core = Core(self.spec, self.log)

        self.shim_out = FakePeerOutput()
        self.shim_peer = self.core.register_peer("shim", "shim", self.shim_out.send)
        self.core.receive(self.shim_peer, encode_message(Message.hello(1)))
        self.shim_out.take()

        self.peers = {}        # module name -> (peer, FakePeerOutput)
        self.module_ids = {}   # module name -> assigned id
        if separate_backends:
            groups = [(f"b-{decl.name}", [decl.name]) for decl in self.spec.modules]
        else:
            groups = [("b0", [decl.name for decl in self.spec.modules])]
        for bname, mods in groups:
            out = FakePeerOutput()
            peer = self.core.register_peer(bname, "backend", out.send)
            self.core.receive(peer, encode_message(Message.hello(1)))
            out.take()
            for name in mods:
                self.core.receive(peer, encode_message(Message.announce(2, name)))
                ack = out.take()[0]
                self.module_ids[name] = ack.header.module_id
                self.peers[name] = (peer, out)

    def feed(self, peer, msg: Message) -> None:
        self.core.receive(peer, self._encode(msg))

    def inject(self, ev) -> int:
        """Dispatch a network event via the shim; returns the assigned xid."""
        self.feed(self.shim_peer, Message.sbi(0, 0, ev))
        ingress = [e for e in self.log.entries() if e.kind == "event_ingress"]
        return ingress[-1].xid

    def respond(self, module: str, xid: int, commands) -> None:
        """Send a module's commands followed by its fence."""
        peer, _ = self.peers[module]
        mid = self.module_ids[module]
        for cmd in commands:
            self.feed(peer, Message.sbi(xid, mid, cmd))
        self.feed(peer, Message.fence(xid, mid))

    def released(self) -> list[Message]:
        """SBI command frames released to the network since the last call."""
        return [m for m in self.shim_out.take()
                if m.header.msg_type == 0x11]

    def invocations(self, module: str) -> list[Message]:
        _, out = self.peers[module]
        return [m for m in out.take() if m.header.msg_type == 0x11]

    def log_kinds(self) -> list[str]:
        return [e.kind for e in self.log.entries()]


# --- Conflict-matrix oracle ------------------------------------------------

def oracle_conflict_pairs(branches, scope=None):
    """Direct pairwise conflict matrix over (branch_idx, pos) command slots.

    branches: list of (priority, commands). Mirrors the definitional text:
    cross-branch FlowModAdds on one datapath conflict when their matches
    intersect and their (scoped) action lists differ; PacketOuts when they
    target the same (datapath, packet) with differing (scoped) actions.
    """
    from netcompose.sbi import match_intersect, project_actions

    slots = []
    for bi, (_, commands) in enumerate(branches):
        for pos, cmd in enumerate(commands):
            slots.append((bi, pos, cmd))
    pairs = set()
    for x in range(len(slots)):
        for y in range(x + 1, len(slots)):
            bi, pi, ci = slots[x]
            bj, pj, cj = slots[y]
            if bi == bj:
                continue
            conflict = False
            if isinstance(ci, FlowModAdd) and isinstance(cj, FlowModAdd):
                conflict = (ci.datapath == cj.datapath
                            and match_intersect(ci.rule.match, cj.rule.match) is not None
                            and project_actions(ci.rule.actions, scope)
                            != project_actions(cj.rule.actions, scope))
            elif isinstance(ci, PacketOut) and isinstance(cj, PacketOut):
                conflict = (ci.datapath == cj.datapath and ci.headers == cj.headers
                            and project_actions(ci.actions, scope)
                            != project_actions(cj.actions, scope))
            if conflict:
                pairs.add(((bi, pi), (bj, pj)))
    return pairs


def oracle_components(pairs):
    """Connected components of the conflict graph, as sets of slots."""
    graph = {}
    for a, b in pairs:
        graph.setdefault(a, set()).add(b)
        graph.setdefault(b, set()).add(a)
    seen = set()
    components = []
    for node in sorted(graph):
        if node in seen:
            continue
        comp = {node}
        frontier = [node]
        while frontier:
            cur = frontier.pop()
            for nxt in graph[cur]:
                if nxt not in comp:
                    comp.add(nxt)
                    frontier.append(nxt)
        seen |= comp
        components.append(comp)
    return components


_ORACLE_MATCHES = None


def random_module_results(rng: random.Random, n_modules: int):
    """Random per-module command lists over a small overlapping vocabulary."""
    global _ORACLE_MATCHES
    if _ORACLE_MATCHES is None:
        _ORACLE_MATCHES = (
            Match(),
            Match(ip_dst=(parse_ip("10.0.0.0"), 24)),
            Match(ip_dst=(parse_ip("10.0.0.0"), 30)),
            Match(ip_dst=(parse_ip("10.0.1.0"), 24)),
            Match(eth_dst=MAC_A),
            Match(in_port=1),
        )
    action_menu = (
        (Output(1),),
        (Output(2),),
        (Drop(),),
        (SetField("eth_dst", MAC_B), Output(1)),
    )
    headers_menu = (
        PacketHeaders(in_port=1, ip_dst=parse_ip("10.0.0.5")),
        PacketHeaders(in_port=2, ip_dst=parse_ip("10.0.1.5")),
    )
    results = []
    for _ in range(n_modules):
        commands = []
        for _ in range(rng.randrange(0, 4)):
            dp = rng.choice((1, 2))
            if rng.random() < 0.7:
                rule = FlowRule(rng.randrange(1, 300), rng.choice(_ORACLE_MATCHES),
                                rng.choice(action_menu))
                commands.append(FlowModAdd(dp, rule))
            else:
                commands.append(PacketOut(dp, rng.choice(headers_menu),
                                          rng.choice(action_menu)))
        results.append((rng.randrange(0, 20), commands))
    return results
