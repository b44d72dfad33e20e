"""Client-controller side: module hosting, event steering, fence emission.

A backend owns a set of application modules. It performs the Hello
handshake, announces its modules to the Core, steers each incoming event
to the addressed module, forwards the module's commands with the event's
transaction id, and always closes the exchange with exactly one fence —
also when the module produced nothing (NOP), and also when the handler
failed or exceeded its step budget, so the Core's barrier never hangs.

The step budget bounds the number of commands a handler may produce per
delivered event; a handler that does not return at all cannot be
preempted in-process and is out of contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from . import wire
from .report import RunLog
from .sbi import Command, Event, FlowModAdd, FlowModDelete, PacketOut, StatsRequest
from .wire import ErrorCode, Message, MsgType

DEFAULT_STEP_BUDGET = 1024

_COMMAND_TYPES = (FlowModAdd, FlowModDelete, PacketOut, StatsRequest)


@dataclass
class AppModule:
    """A hosted application module.

    handler(event, state) returns the commands produced for that event;
    it must be deterministic given (state, event) and terminate.
    """

    name: str
    handler: Callable[[Event, Any], Iterable[Command]]
    state: Any = None


@dataclass(slots=True)
class ModuleRegistration:
    name: str
    module_id: int


class RegistrationAborted(Exception):
    pass


class Backend:
    def __init__(self, name: str, modules: list[AppModule], log: RunLog,
                 step_budget: int = DEFAULT_STEP_BUDGET):
        names = [m.name for m in modules]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate module names on backend {name}: {names}")
        self.name = name
        self.modules = {m.name: m for m in modules}
        self._log = log
        self._budget = step_budget
        self._send: Optional[Callable[[bytes], None]] = None
        self._next_xid = 1
        self.registrations: dict[str, ModuleRegistration] = {}
        self._modules_by_id: dict[int, AppModule] = {}
        self.aborted = False
        # Module-chosen xids for proactive read-state; the base just keeps
        # them visually distinct from core-assigned event xids in logs.
        self.next_request_xid = 9001

    def attach(self, send: Callable[[bytes], None]) -> None:
        self._send = send

    def _emit(self, msg: Message) -> None:
        self._send(wire.encode_message(msg))

    def _fresh_xid(self) -> int:
        xid = self._next_xid
        self._next_xid += 1
        return xid

    def start(self) -> None:
        """Open the session: Hello first; announcements follow its reply."""
        self._emit(Message.hello(self._fresh_xid()))

    @property
    def registered(self) -> bool:
        return len(self.registrations) == len(self.modules) and not self.aborted

    def receive(self, frame: bytes) -> None:
        try:
            msg, _ = wire.decode_message(frame)
        except (wire.ProtocolError, wire.NeedMoreData) as exc:
            self._log.append("backend_error", 0, 0, 0, f"{self.name}: {exc}")
            return
        mtype = MsgType(msg.header.msg_type)
        if mtype is MsgType.HELLO:
            agreed = wire.negotiate_hello(
                wire.HelloBody(((wire.SBI_PROTOCOL_ID, wire.SBI_PROTOCOL_VERSION),)),
                msg.payload,
            )
            if not agreed:
                self.aborted = True
                self._log.append("backend_error", msg.header.xid, 0, 0,
                                 f"{self.name}: hello negotiation failed")
                return
            for name in self.modules:
                self._emit(Message.announce(self._fresh_xid(), name))
        elif mtype is MsgType.MODULE_ACKNOWLEDGE:
            name = msg.payload.name
            module_id = msg.header.module_id
            if name in self.modules:
                self.registrations[name] = ModuleRegistration(name, module_id)
                self._modules_by_id[module_id] = self.modules[name]
        elif mtype is MsgType.ERROR:
            body = msg.payload
            if body.code == ErrorCode.DUPLICATE_MODULE:
                self.aborted = True
            self._log.append("backend_error", msg.header.xid, msg.header.module_id, 0,
                             f"{self.name}: code={body.code} {body.text}")
        elif mtype is MsgType.SBI:
            self.deliver_event(msg.header.module_id, msg.header.xid, msg.payload)
        else:
            self._emit(Message.error(msg.header.xid, msg.header.module_id,
                                     ErrorCode.PROTOCOL,
                                     f"unexpected {mtype.name} at backend"))

    def deliver_event(self, module_id: int, xid: int, ev: Event) -> None:
        """Run the addressed module, emit its commands, then one fence."""
        module = self._modules_by_id.get(module_id)
        if module is None:
            self._emit(Message.error(xid, module_id, ErrorCode.UNKNOWN_MODULE,
                                     f"no module {module_id} on backend {self.name}"))
            return
        try:
            commands = list(module.handler(ev, module.state))
        except Exception as exc:  # contain module bugs; the fence must still go out
            self._emit(Message.error(xid, module_id, ErrorCode.HANDLER_FAILURE,
                                     f"{module.name}: {type(exc).__name__}: {exc}"))
            self._emit(Message.fence(xid, module_id))
            return
        if len(commands) > self._budget:
            self._emit(Message.error(xid, module_id, ErrorCode.STEP_BUDGET_EXCEEDED,
                                     f"{module.name} produced {len(commands)} commands "
                                     f"(budget {self._budget})"))
            self._emit(Message.fence(xid, module_id))
            return
        for cmd in commands:
            if not isinstance(cmd, _COMMAND_TYPES):
                self._emit(Message.error(xid, module_id, ErrorCode.HANDLER_FAILURE,
                                         f"{module.name} returned non-command {cmd!r}"))
                self._emit(Message.fence(xid, module_id))
                return
            self._emit(Message.sbi(xid, module_id, cmd))
        self._emit(Message.fence(xid, module_id))

    def request_stats(self, module_name: str, request: StatsRequest) -> int:
        """Proactively issue a read-state request on behalf of a module."""
        reg = self.registrations.get(module_name)
        if reg is None:
            raise KeyError(f"module {module_name!r} not registered on {self.name}")
        xid = self.next_request_xid
        self.next_request_xid += 1
        self._emit(Message.sbi(xid, reg.module_id, request))
        return xid
