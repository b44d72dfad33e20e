"""Platform-independent composition Core.

One logical event loop consumes a totally ordered inbox of decoded frames
from the Shim (module_id 0) and the Backends. The Core:

  * registers modules announced by backends and assigns their identifiers,
  * distributes network events along the execution tree of the composition
    specification,
  * enforces run-to-completion with fences (end-of-execution markers),
  * merges parallel results under discard/ignore/priority policies,
  * derives sequential inputs by rewriting the packet with prior results,
  * pairs read-state requests with their replies outside composition,
  * releases composed output per datapath in event-arrival order.

All state transitions happen inside receive(); transports must deliver
frames of one producer in order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import sbi, wire
from .compspec import (
    CompositionSpec,
    Leaf,
    ModuleDecl,
    Node,
    Parallel,
    Policy,
    Sequential,
    tree_leaf_names,
)
from .report import RunLog
from .sbi import (
    Command,
    Event,
    FlowModAdd,
    PacketIn,
    PacketOut,
    StatsReply,
    StatsRequest,
    apply_actions,
    event_kind,
    match_covers,
    project_actions,
    rules_conflict,
)
from .wire import ErrorCode, Message, MsgType, ProtocolError

AttributedCommand = tuple[int, Command]  # (module_id, command)


def describe_headers(h: sbi.PacketHeaders) -> str:
    return (f"in_port={h.in_port} eth={sbi.format_mac(h.eth_src)}>"
            f"{sbi.format_mac(h.eth_dst)} type=0x{h.eth_type:04x} "
            f"ip={sbi.format_ip(h.ip_src)}>{sbi.format_ip(h.ip_dst)} "
            f"proto={h.ip_proto} tp={h.tp_src}>{h.tp_dst}")


def describe(obj) -> str:
    """Compact deterministic one-line form of an event or command."""
    if isinstance(obj, PacketIn):
        return f"packet_in {describe_headers(obj.headers)}"
    if isinstance(obj, sbi.PortStatus):
        return f"port_status port={obj.port} state={'up' if obj.up else 'down'}"
    if isinstance(obj, sbi.FlowRemoved):
        return (f"flow_removed reason={obj.reason.name.lower()} prio={obj.rule.priority} "
                f"match[{obj.rule.match}]")
    if isinstance(obj, StatsReply):
        return f"stats_reply entries={len(obj.entries)}"
    if isinstance(obj, FlowModAdd):
        r = obj.rule
        return (f"flow_mod_add prio={r.priority} match[{r.match}] "
                f"actions[{sbi.format_actions(r.actions)}] "
                f"idle={r.idle_timeout} hard={r.hard_timeout}")
    if isinstance(obj, sbi.FlowModDelete):
        return f"flow_mod_delete match[{obj.match}]"
    if isinstance(obj, PacketOut):
        return (f"packet_out actions[{sbi.format_actions(obj.actions)}] "
                f"{describe_headers(obj.headers)}")
    if isinstance(obj, StatsRequest):
        return f"stats_request match[{obj.match}]"
    return repr(obj)


# --- Parallel merge ------------------------------------------------------

@dataclass(slots=True, eq=False)
class MergeInput:
    """One branch of a parallel node: a module's (or subtree's) result.

    Compared by identity: two branches are distinct parties even when
    their contents coincide.
    """

    label: str
    unit_id: int      # tie-break identity: min module_id in the branch
    priority: int     # max module priority in the branch
    decl_index: int   # output ordering: min declaration index in the branch
    commands: list[AttributedCommand]


@dataclass(frozen=True, slots=True)
class ConflictPair:
    a_label: str
    a_index: int
    b_label: str
    b_index: int
    kind: str  # "flow_mod" | "packet_out"


@dataclass(slots=True)
class MergeResult:
    commands: list[AttributedCommand]
    conflicts: list[ConflictPair]
    tie_warnings: list[str]
    removed: int


def _commands_conflict(c1: Command, c2: Command,
                       scope: Optional[frozenset[str]]) -> Optional[str]:
    """Conflict kind for a cross-branch command pair, or None.

    Flow rules conflict when installed on the same datapath with
    intersecting matches and differing (scoped) actions; packet-outs when
    targeting the same (datapath, packet) with differing (scoped) actions.
    """
    if isinstance(c1, FlowModAdd) and isinstance(c2, FlowModAdd):
        if c1.datapath == c2.datapath and rules_conflict(c1.rule, c2.rule, scope):
            return "flow_mod"
        return None
    if isinstance(c1, PacketOut) and isinstance(c2, PacketOut):
        if (c1.datapath == c2.datapath and c1.headers == c2.headers
                and project_actions(c1.actions, scope) != project_actions(c2.actions, scope)):
            return "packet_out"
        return None
    return None


def merge_parallel(inputs: list[MergeInput], policy: Policy) -> MergeResult:
    """Merge parallel branch results into one composed command list.

    Conflict detection is pairwise and cross-branch only; a branch is
    trusted to be self-consistent. Output preserves each branch's internal
    order, branches ordered by ascending declaration index.
    """
    scope = policy.conflict_scope
    entries = []  # (branch, pos, command)
    for inp in inputs:
        for pos, (_, cmd) in enumerate(inp.commands):
            entries.append((inp, pos, cmd))

    conflicts: list[ConflictPair] = []
    adjacency: dict[int, set[int]] = {}
    for (i, (ia, pa, ca)), (j, (ib, pb, cb)) in itertools.combinations(enumerate(entries), 2):
        if ia is ib:
            continue
        kind = _commands_conflict(ca, cb, scope)
        if kind is None:
            continue
        conflicts.append(ConflictPair(ia.label, pa, ib.label, pb, kind))
        adjacency.setdefault(i, set()).add(j)
        adjacency.setdefault(j, set()).add(i)

    removed: set[int] = set()
    tie_warnings: list[str] = []
    if policy.kind == "discard":
        removed = set(adjacency)
    elif policy.kind == "priority":
        seen: set[int] = set()
        for start in sorted(adjacency):
            if start in seen:
                continue
            component = {start}
            frontier = [start]
            while frontier:
                node = frontier.pop()
                for nxt in adjacency[node]:
                    if nxt not in component:
                        component.add(nxt)
                        frontier.append(nxt)
            seen |= component
            branches = {entries[i][0] for i in component}
            top = max(b.priority for b in branches)
            winners = sorted((b for b in branches if b.priority == top),
                             key=lambda b: b.unit_id)
            if len(winners) > 1:
                tie_warnings.append(
                    "priority tie between " + ",".join(b.label for b in winners)
                    + f" at {top}; keeping {winners[0].label} (lowest module id)"
                )
            winner = winners[0]
            removed |= {i for i in component if entries[i][0] is not winner}
    # "ignore": install everything; conflicts are only reported.

    kept = [(inp, pos, cmd) for i, (inp, pos, cmd) in enumerate(entries) if i not in removed]
    kept.sort(key=lambda item: (item[0].decl_index, item[1]))
    commands = [item[0].commands[item[1]] for item in kept]
    return MergeResult(commands, conflicts, tie_warnings, len(removed))


# --- Sequential input derivation -----------------------------------------

@dataclass(slots=True)
class DeriveResult:
    event: Optional[Event]
    dropped: bool
    dropped_by: int = 0
    warning: Optional[str] = None


def derive_sequential_input(original: Event,
                            prior_results: list[list[AttributedCommand]]) -> DeriveResult:
    """Input for the next module in a sequential chain.

    PacketIn events are rewritten by every SetField of prior flow rules
    covering the packet and prior packet-outs for the same packet; a Drop
    among applicable prior results short-circuits the chain. Other event
    kinds pass through unmodified with a warning (no general
    output-to-event transformation exists for them).
    """
    if not isinstance(original, PacketIn):
        return DeriveResult(original, False,
                            warning=f"{event_kind(original)} forwarded unmodified "
                                    "through sequential chain")
    h = original.headers
    for unit in prior_results:
        for module_id, cmd in unit:
            if isinstance(cmd, FlowModAdd):
                if cmd.datapath != original.datapath or not match_covers(cmd.rule.match, h):
                    continue
                actions = cmd.rule.actions
            elif isinstance(cmd, PacketOut):
                if cmd.datapath != original.datapath or cmd.headers != h:
                    continue
                actions = cmd.actions
            else:
                continue
            h, _, dropped = apply_actions(h, actions)
            if dropped:
                return DeriveResult(None, True, dropped_by=module_id)
    if h == original.headers:
        return DeriveResult(original, False)
    return DeriveResult(PacketIn(h, original.datapath), False)


# --- Execution-plan state machine ----------------------------------------

@dataclass(slots=True)
class ResultUnit:
    commands: list[AttributedCommand]
    priority: int
    unit_id: int
    decl_index: int
    label: str


Invocation = tuple["ModuleInfo", Event]


class _LeafExec:
    def __init__(self, core: "Core", name: str):
        self._core = core
        self.info = core.module_info(name)
        self.module_names = frozenset({name})
        self.done = False
        self.unit: Optional[ResultUnit] = None

    def _empty_unit(self) -> ResultUnit:
        info = self.info
        return ResultUnit([], info.decl.priority, info.module_id or 0,
                          info.decl_index, info.decl.name)

    def start(self, pending: "PendingEvent", ev: Event) -> list[Invocation]:
        info = self.info
        kind = event_kind(ev)
        if info.module_id is None or info.peer is None:
            self._core._log.append("auto_fence", pending.xid, 0, pending.datapath_id,
                                   f"module {info.decl.name} not registered; empty result")
            self.unit = self._empty_unit()
            self.done = True
            return []
        if not info.decl.handles(kind):
            self._core._log.append("auto_fence", pending.xid, info.module_id,
                                   pending.datapath_id,
                                   f"module {info.decl.name} filtered out {kind}; empty result")
            self.unit = self._empty_unit()
            self.done = True
            return []
        return [(info, ev)]

    def on_module_done(self, pending: "PendingEvent", module_id: int,
                       commands: list[Command]) -> list[Invocation]:
        info = self.info
        self.unit = ResultUnit([(module_id, c) for c in commands], info.decl.priority,
                               module_id, info.decl_index, info.decl.name)
        self.done = True
        return []


class _SequentialExec:
    def __init__(self, core: "Core", node: Sequential):
        self._core = core
        self.children = [build_exec(core, child) for child in node.children]
        self.module_names = frozenset().union(*(c.module_names for c in self.children))
        self.idx = 0
        self.units: list[ResultUnit] = []
        self.original: Optional[Event] = None
        self.warned = False
        self.done = False
        self.unit: Optional[ResultUnit] = None

    def start(self, pending: "PendingEvent", ev: Event) -> list[Invocation]:
        self.original = ev
        return self._advance(pending)

    def _advance(self, pending: "PendingEvent") -> list[Invocation]:
        core = self._core
        while self.idx < len(self.children):
            if self.idx == 0:
                ev: Optional[Event] = self.original
            else:
                derived = derive_sequential_input(self.original,
                                                  [u.commands for u in self.units])
                if derived.warning and not self.warned:
                    core._log.append("warning", pending.xid, 0, pending.datapath_id,
                                     derived.warning)
                    self.warned = True
                if derived.dropped:
                    core._log.append("sequential_short_circuit", pending.xid,
                                     derived.dropped_by, pending.datapath_id,
                                     "drop in prior results ends the chain")
                    break
                ev = derived.event
            child = self.children[self.idx]
            invocations = child.start(pending, ev)
            if not child.done:
                return invocations
            self.units.append(child.unit)
            self.idx += 1
        self._finish()
        return []

    def _finish(self) -> None:
        commands = [c for u in self.units for c in u.commands]
        self.unit = ResultUnit(
            commands,
            max(u.priority for u in self.units),
            min(u.unit_id for u in self.units),
            min(u.decl_index for u in self.units),
            "sequential",
        )
        self.done = True

    def on_module_done(self, pending: "PendingEvent", module_id: int,
                       commands: list[Command]) -> list[Invocation]:
        child = self.children[self.idx]
        invocations = child.on_module_done(pending, module_id, commands)
        if not child.done:
            return invocations
        self.units.append(child.unit)
        self.idx += 1
        return self._advance(pending)


class _ParallelExec:
    def __init__(self, core: "Core", node: Parallel):
        self._core = core
        self.children = [build_exec(core, child) for child in node.children]
        self.module_names = frozenset().union(*(c.module_names for c in self.children))
        self.policy = node.policy
        self.done = False
        self.unit: Optional[ResultUnit] = None

    def start(self, pending: "PendingEvent", ev: Event) -> list[Invocation]:
        invocations: list[Invocation] = []
        for child in self.children:
            invocations.extend(child.start(pending, ev))
        if all(c.done for c in self.children):
            self._merge(pending)
        return invocations

    def on_module_done(self, pending: "PendingEvent", module_id: int,
                       commands: list[Command]) -> list[Invocation]:
        name = self._core.module_name(module_id)
        for child in self.children:
            if name in child.module_names and not child.done:
                invocations = child.on_module_done(pending, module_id, commands)
                if child.done and all(c.done for c in self.children):
                    self._merge(pending)
                return invocations
        raise AssertionError(f"module {name} not awaited by parallel node")

    def _merge(self, pending: "PendingEvent") -> None:
        core = self._core
        inputs = [MergeInput(u.label, u.unit_id, u.priority, u.decl_index, u.commands)
                  for u in (c.unit for c in self.children)]
        outcome = merge_parallel(inputs, self.policy)
        for pair in outcome.conflicts:
            core.metrics["conflicts_detected"] += 1
            core.metrics[f"conflicts_resolved_{self.policy.kind}"] += 1
            core._log.append("conflict_detected", pending.xid, 0, pending.datapath_id,
                             f"{pair.kind}: {pair.a_label}[{pair.a_index}] vs "
                             f"{pair.b_label}[{pair.b_index}] policy={self.policy.kind}")
        for warning in outcome.tie_warnings:
            core._log.append("warning", pending.xid, 0, pending.datapath_id, warning)
        core._log.append("merge", pending.xid, 0, pending.datapath_id,
                         f"policy={self.policy.kind} branches={len(inputs)} "
                         f"kept={len(outcome.commands)} removed={outcome.removed}")
        units = [c.unit for c in self.children]
        self.unit = ResultUnit(
            outcome.commands,
            max(u.priority for u in units),
            min(u.unit_id for u in units),
            min(u.decl_index for u in units),
            "parallel",
        )
        self.done = True


def build_exec(core: "Core", node: Node):
    if isinstance(node, Leaf):
        return _LeafExec(core, node.name)
    if isinstance(node, Sequential):
        return _SequentialExec(core, node)
    if isinstance(node, Parallel):
        return _ParallelExec(core, node)
    raise TypeError(f"unknown execution node {node!r}")


# --- Core proper ----------------------------------------------------------

@dataclass(slots=True)
class Peer:
    name: str
    kind: str  # "shim" | "backend"
    send: Callable[[bytes], None]
    negotiated: Optional[tuple[tuple[int, int], ...]] = None
    rejected: bool = False


@dataclass(slots=True)
class ModuleInfo:
    decl: ModuleDecl
    decl_index: int
    module_id: Optional[int] = None
    peer: Optional[Peer] = None


@dataclass(slots=True)
class PendingEvent:
    xid: int
    arrival_seq: int
    datapath_id: int
    origin: Event
    plan: object
    awaiting: set[int] = field(default_factory=set)
    results: dict[int, list[Command]] = field(default_factory=dict)
    composed: Optional[list[AttributedCommand]] = None
    released: bool = False


@dataclass(slots=True)
class ReadStateTicket:
    core_xid: int
    module_id: int
    original_xid: int


class Core:
    """Composition core; single-threaded over receive().

    buffer_high_water bounds how many completed compositions may sit
    waiting for per-datapath ordering before a warning is logged; the
    buffer itself stays unbounded.
    """

    def __init__(self, spec: CompositionSpec, log: RunLog,
                 buffer_high_water: int = 16):
        self._spec = spec
        self._log = log
        self._buffer_high_water = buffer_high_water
        self._modules: dict[str, ModuleInfo] = {
            decl.name: ModuleInfo(decl, i) for i, decl in enumerate(spec.modules)
        }
        self._modules_by_id: dict[int, ModuleInfo] = {}
        self._shim: Optional[Peer] = None
        self._next_module_id = 1
        self._next_xid = 1
        self._next_seq = 1
        self._pending: dict[int, PendingEvent] = {}
        self._completed: set[int] = set()
        self._direct: dict[tuple[int, int], int] = {}  # (module_id, xid) -> outstanding count
        self._tickets: dict[int, ReadStateTicket] = {}
        self._dp_queue: dict[int, list[int]] = {}  # datapath -> xids in arrival order
        self.metrics: dict[str, int] = {
            "events_processed": 0,
            "fences_received": 0,
            "conflicts_detected": 0,
            "conflicts_resolved_discard": 0,
            "conflicts_resolved_ignore": 0,
            "conflicts_resolved_priority": 0,
            "outputs_buffered_for_ordering": 0,
            "protocol_errors": 0,
        }

    # -- wiring ----------------------------------------------------------

    def register_peer(self, name: str, kind: str, send: Callable[[bytes], None]) -> Peer:
        peer = Peer(name, kind, send)
        if kind == "shim":
            if self._shim is not None:
                raise RuntimeError("a shim peer is already attached")
            self._shim = peer
        return peer

    def module_info(self, name: str) -> ModuleInfo:
        return self._modules[name]

    def module_name(self, module_id: int) -> str:
        return self._modules_by_id[module_id].decl.name

    def unregistered_modules(self) -> list[str]:
        return [n for n in tree_leaf_names(self._spec.execution)
                if self._modules[n].module_id is None]

    # -- inbox -----------------------------------------------------------

    def receive(self, peer: Peer, frame: bytes) -> None:
        """Process one complete frame from a peer."""
        try:
            msg, consumed = wire.decode_message(frame)
            if consumed != len(frame):
                raise ProtocolError("trailing bytes after frame")
        except (ProtocolError, wire.NeedMoreData) as exc:
            self._protocol_error(peer, 0, 0, ErrorCode.PROTOCOL, str(exc))
            return
        self._handle(peer, msg)

    def _send(self, peer: Peer, msg: Message) -> None:
        peer.send(wire.encode_message(msg))

    def _protocol_error(self, peer: Peer, xid: int, module_id: int,
                        code: ErrorCode, text: str) -> None:
        self.metrics["protocol_errors"] += 1
        self._log.append("protocol_error", xid, module_id, 0, f"{code.name}: {text}")
        self._send(peer, Message.error(xid, module_id, code, text))

    def _handle(self, peer: Peer, msg: Message) -> None:
        header = msg.header
        if peer.rejected:
            self._log.append("warning", header.xid, header.module_id, 0,
                             f"frame from rejected peer {peer.name} ignored")
            return
        mtype = MsgType(header.msg_type)
        if mtype is MsgType.HELLO:
            self._handle_hello(peer, msg)
        elif mtype is MsgType.MODULE_ANNOUNCEMENT:
            self._handle_announcement(peer, msg)
        elif mtype is MsgType.FENCE:
            self.handle_fence(peer, header.xid, header.module_id)
        elif mtype is MsgType.SBI:
            if header.module_id == 0:
                self._handle_network_sbi(peer, msg)
            else:
                self._handle_module_sbi(peer, msg)
        elif mtype is MsgType.ERROR:
            body = msg.payload
            self._log.append("peer_error", header.xid, header.module_id, 0,
                             f"{peer.name}: code={body.code} {body.text}")
        else:
            self._protocol_error(peer, header.xid, header.module_id, ErrorCode.PROTOCOL,
                                 f"unexpected {mtype.name} at core")

    # -- handshake and registration ---------------------------------------

    def _handle_hello(self, peer: Peer, msg: Message) -> None:
        local = wire.HelloBody(((wire.SBI_PROTOCOL_ID, wire.SBI_PROTOCOL_VERSION),))
        agreed = wire.negotiate_hello(local, msg.payload)
        peer.negotiated = agreed
        self._send(peer, Message.hello(msg.header.xid))
        detail = ",".join(f"{pid:#04x}v{ver}" for pid, ver in agreed) or "none"
        self._log.append("hello", msg.header.xid, 0, 0,
                         f"peer {peer.name} agreed=[{detail}]")
        if not agreed:
            peer.rejected = True
            self._protocol_error(peer, msg.header.xid, 0, ErrorCode.NEGOTIATION_FAILED,
                                 "no common SBI protocol")

    def _handle_announcement(self, peer: Peer, msg: Message) -> None:
        name = msg.payload.name
        xid = msg.header.xid
        info = self._modules.get(name)
        if info is not None and info.module_id is not None:
            self._protocol_error(peer, xid, 0, ErrorCode.DUPLICATE_MODULE,
                                 f"module {name!r} already registered")
            return
        module_id = self._next_module_id
        self._next_module_id += 1
        if info is None:
            # Not part of the composition; register so the id space is
            # consistent, but it will never be invoked.
            info = ModuleInfo(ModuleDecl(name), len(self._modules))
            self._modules[name] = info
            self._log.append("warning", xid, module_id, 0,
                             f"module {name!r} not in composition specification")
        info.module_id = module_id
        info.peer = peer
        self._modules_by_id[module_id] = info
        self._send(peer, Message.acknowledge(xid, module_id, name))
        self._log.append("module_registered", xid, module_id, 0,
                         f"{name} via {peer.name}")

    # -- events ------------------------------------------------------------

    def _handle_network_sbi(self, peer: Peer, msg: Message) -> None:
        payload = msg.payload
        if isinstance(payload, StatsReply):
            self.correlate_reply(msg.header.xid, payload)
            return
        if isinstance(payload, (FlowModAdd, sbi.FlowModDelete, PacketOut, StatsRequest)):
            self._protocol_error(peer, msg.header.xid, 0, ErrorCode.PROTOCOL,
                                 "command frame from network side")
            return
        self.dispatch_event(payload)

    def dispatch_event(self, ev: Event) -> PendingEvent:
        """Admit one network event: assign xid + arrival seq, invoke modules."""
        xid = self._next_xid
        self._next_xid += 1
        seq = self._next_seq
        self._next_seq += 1
        self.metrics["events_processed"] += 1
        self._log.append("event_ingress", xid, 0, ev.datapath,
                         f"seq={seq} {describe(ev)}")
        plan = build_exec(self, self._spec.execution)
        pending = PendingEvent(xid, seq, ev.datapath, ev, plan)
        self._pending[xid] = pending
        self._dp_queue.setdefault(ev.datapath, []).append(xid)
        invocations = plan.start(pending, ev)
        self._send_invocations(pending, invocations)
        if plan.done and not pending.awaiting:
            self._finish_event(pending)
        return pending

    def _send_invocations(self, pending: PendingEvent, invocations: list[Invocation]) -> None:
        for info, ev in invocations:
            pending.awaiting.add(info.module_id)
            pending.results.setdefault(info.module_id, [])
            self._send(info.peer, Message.sbi(pending.xid, info.module_id, ev))
            self._log.append("invocation", pending.xid, info.module_id, ev.datapath,
                             f"{info.decl.name} <- {event_kind(ev)}")

    # -- module results ----------------------------------------------------

    def _handle_module_sbi(self, peer: Peer, msg: Message) -> None:
        module_id = msg.header.module_id
        xid = msg.header.xid
        info = self._modules_by_id.get(module_id)
        if info is None or info.peer is not peer:
            self._protocol_error(peer, xid, module_id, ErrorCode.UNKNOWN_MODULE,
                                 f"module id {module_id} not registered to {peer.name}")
            return
        cmd = msg.payload
        if isinstance(cmd, StatsRequest):
            self._issue_ticket(info, xid, cmd)
            return
        if not isinstance(cmd, (FlowModAdd, sbi.FlowModDelete, PacketOut)):
            self._protocol_error(peer, xid, module_id, ErrorCode.PROTOCOL,
                                 f"unexpected event frame from module {info.decl.name}")
            return
        pending = self._pending.get(xid)
        if pending is not None and module_id in pending.awaiting:
            pending.results[module_id].append(cmd)
            self._log.append("command_collected", xid, module_id, cmd.datapath,
                             describe(cmd))
            return
        if self._direct.get((module_id, xid), 0) > 0:
            # Reaction to a correlated reply: bypasses composition.
            self._release_commands(xid, [(module_id, cmd)], direct=True)
            return
        self._protocol_error(peer, xid, module_id, ErrorCode.UNCORRELATED_COMMAND,
                             f"command with unknown xid {xid}")

    # -- fencing -------------------------------------------------------------

    def handle_fence(self, peer: Peer, xid: int, module_id: int) -> None:
        info = self._modules_by_id.get(module_id)
        if info is None or info.peer is not peer:
            self._protocol_error(peer, xid, module_id, ErrorCode.UNKNOWN_MODULE,
                                 f"fence from unregistered module id {module_id}")
            return
        pending = self._pending.get(xid)
        if pending is not None and module_id in pending.awaiting:
            pending.awaiting.discard(module_id)
            self.metrics["fences_received"] += 1
            commands = pending.results.get(module_id, [])
            detail = f"{len(commands)} command(s)" if commands else "NOP (empty result)"
            self._log.append("fence", xid, module_id, pending.datapath_id, detail)
            invocations = pending.plan.on_module_done(pending, module_id, commands)
            self._send_invocations(pending, invocations)
            if pending.plan.done and not pending.awaiting:
                self._finish_event(pending)
            return
        key = (module_id, xid)
        if self._direct.get(key, 0) > 0:
            self._direct[key] -= 1
            if self._direct[key] == 0:
                del self._direct[key]
            self.metrics["fences_received"] += 1
            self._log.append("fence", xid, module_id, 0, "read-state delivery complete")
            return
        if pending is not None or xid in self._completed:
            self._protocol_error(peer, xid, module_id, ErrorCode.DUPLICATE_FENCE,
                                 f"fence not awaited for xid {xid}")
        else:
            self._protocol_error(peer, xid, module_id, ErrorCode.UNKNOWN_XID,
                                 f"fence for unknown xid {xid}")

    # -- read-state correlation ----------------------------------------------

    def _issue_ticket(self, info: ModuleInfo, original_xid: int, req: StatsRequest) -> None:
        if self._shim is None:
            self._protocol_error(info.peer, original_xid, info.module_id,
                                 ErrorCode.PROTOCOL, "no network attached")
            return
        core_xid = self._next_xid
        self._next_xid += 1
        self._tickets[core_xid] = ReadStateTicket(core_xid, info.module_id, original_xid)
        self._send(self._shim, Message.sbi(core_xid, info.module_id, req))
        self._log.append("ticket_issued", core_xid, info.module_id, req.datapath,
                         f"read-state for {info.decl.name} original_xid={original_xid}")

    def correlate_reply(self, core_xid: int, reply: StatsReply) -> None:
        ticket = self._tickets.pop(core_xid, None)
        if ticket is None:
            self._log.append("warning", core_xid, 0, reply.datapath,
                             "stats reply with no outstanding ticket dropped")
            return
        info = self._modules_by_id[ticket.module_id]
        key = (ticket.module_id, ticket.original_xid)
        self._direct[key] = self._direct.get(key, 0) + 1
        self._send(info.peer, Message.sbi(ticket.original_xid, ticket.module_id, reply))
        self._log.append("reply_correlated", core_xid, ticket.module_id, reply.datapath,
                         f"delivered to {info.decl.name} as xid={ticket.original_xid}")

    # -- composition output ----------------------------------------------------

    def _finish_event(self, pending: PendingEvent) -> None:
        unit: ResultUnit = pending.plan.unit
        pending.composed = unit.commands
        detail = f"{len(unit.commands)} command(s)" if unit.commands else "no-op (empty)"
        self._log.append("composition_complete", pending.xid, 0, pending.datapath_id, detail)
        self._flush_datapath(pending.datapath_id, pending)

    def _flush_datapath(self, datapath: int, just_completed: PendingEvent) -> None:
        queue = self._dp_queue[datapath]
        if queue and queue[0] != just_completed.xid and just_completed.composed is not None:
            self.metrics["outputs_buffered_for_ordering"] += 1
            self._log.append("output_buffered", just_completed.xid, 0, datapath,
                             f"awaiting release of seq<{just_completed.arrival_seq} "
                             "events on this datapath")
        while queue:
            head = self._pending.get(queue[0])
            if head is None or head.composed is None:
                break
            queue.pop(0)
            self._release(head)

    def _release(self, pending: PendingEvent) -> None:
        pending.released = True
        del self._pending[pending.xid]
        self._completed.add(pending.xid)
        self._log.append("output_released", pending.xid, 0, pending.datapath_id,
                         f"seq={pending.arrival_seq} {len(pending.composed)} command(s)")
        self._release_commands(pending.xid, pending.composed)

    def _release_commands(self, xid: int, commands: list[AttributedCommand],
                          direct: bool = False) -> None:
        for module_id, cmd in commands:
            if self._shim is None:
                self._log.append("warning", xid, module_id, cmd.datapath,
                                 "no network attached; command dropped")
                continue
            self._send(self._shim, Message.sbi(xid, module_id, cmd))
            kind = "direct_release" if direct else "command_released"
            self._log.append(kind, xid, module_id, cmd.datapath, describe(cmd))
