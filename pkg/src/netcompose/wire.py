"""Intermediate wire protocol linking Shim, Core, and Backends.

Frame layout (big-endian throughout):

    +---------+----------+-------------+---------+------------+--------------+
    | version | msg_type | payload_len |   xid   | module_id  | datapath_id  |
    |   1B    |    1B    |     2B      |   4B    |    4B      |     8B       |
    +---------+----------+-------------+---------+------------+--------------+
    | payload (payload_len bytes)                                            |
    +------------------------------------------------------------------------+

version is fixed 0x01. module_id 0 marks Shim/network origin; datapath_id
0 means "not applicable".

Payload bodies by msg_type:
    HELLO (0x01)               count(1B) + count x (protocol_id 1B, version 1B)
    ERROR (0x02)               code(2B) + UTF-8 text
    MODULE_ANNOUNCEMENT (0x03) UTF-8 module name
    MODULE_ACKNOWLEDGE (0x04)  UTF-8 module name; assigned id in header.module_id
    FENCE (0x06)               empty
    SBI (0x11)                 sbi_kind(1B) + field TLVs

SBI field TLVs are tag(1B) + length(2B) + value, in ascending tag order;
only the stats-entry tag 0x31 may repeat. Tags 0x14/0x15 carry a 4-byte
address plus a 1-byte prefix length; packet-header contexts (PACKET_IN,
PACKET_OUT) require prefix 32. Each action inside the 0x30 list is
length-prefixed (2B) and starts with an action kind byte; SET_FIELD
values use the bare header width of the target field (4-byte addresses,
no prefix byte).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

from . import sbi
from .sbi import (
    Action,
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
)

VERSION = 0x01
HEADER_LEN = 20
MAX_PAYLOAD = 0xFFFF
_HEADER_FMT = ">BBHIIQ"

# The simplified SBI defined by this engine, offered during Hello.
SBI_PROTOCOL_ID = 0x11
SBI_PROTOCOL_VERSION = 0x01


class MsgType(IntEnum):
    HELLO = 0x01
    ERROR = 0x02
    MODULE_ANNOUNCEMENT = 0x03
    MODULE_ACKNOWLEDGE = 0x04
    FENCE = 0x06
    SBI = 0x11


class SbiKind(IntEnum):
    PACKET_IN = 0x01
    PACKET_OUT = 0x02
    FLOW_MOD_ADD = 0x03
    FLOW_MOD_DELETE = 0x04
    FLOW_REMOVED = 0x05
    PORT_STATUS = 0x06
    STATS_REQUEST = 0x07
    STATS_REPLY = 0x08


class ErrorCode(IntEnum):
    PROTOCOL = 1
    NEGOTIATION_FAILED = 2
    DUPLICATE_MODULE = 3
    UNKNOWN_MODULE = 4
    UNKNOWN_DATAPATH = 5
    UNKNOWN_XID = 6
    DUPLICATE_FENCE = 7
    STEP_BUDGET_EXCEEDED = 8
    HANDLER_FAILURE = 9
    UNCORRELATED_COMMAND = 10


class ProtocolError(Exception):
    """Malformed or semantically invalid frame."""


class NeedMoreData(Exception):
    """Buffer holds less than one complete frame; .expected is the total needed."""

    def __init__(self, expected: int):
        super().__init__(f"need {expected} bytes")
        self.expected = expected


class EncodeError(Exception):
    """Message violates an encoding precondition (oversize, inconsistent header)."""


# Field TLV tags.
class Tag(IntEnum):
    IN_PORT = 0x10
    ETH_SRC = 0x11
    ETH_DST = 0x12
    ETH_TYPE = 0x13
    IP_SRC = 0x14
    IP_DST = 0x15
    IP_PROTO = 0x16
    TP_SRC = 0x17
    TP_DST = 0x18
    PRIORITY = 0x20
    IDLE_TIMEOUT = 0x21
    HARD_TIMEOUT = 0x22
    PACKET_COUNT = 0x23
    REASON = 0x24
    PORT_STATE = 0x25
    ACTIONS = 0x30
    STATS_ENTRY = 0x31


_FIELD_TAGS = {
    "in_port": Tag.IN_PORT,
    "eth_src": Tag.ETH_SRC,
    "eth_dst": Tag.ETH_DST,
    "eth_type": Tag.ETH_TYPE,
    "ip_src": Tag.IP_SRC,
    "ip_dst": Tag.IP_DST,
    "ip_proto": Tag.IP_PROTO,
    "tp_src": Tag.TP_SRC,
    "tp_dst": Tag.TP_DST,
}
_FIELD_BY_TAG = {tag: name for name, tag in _FIELD_TAGS.items()}

# Wire byte width of each header field value (TLV ip fields add a prefix byte).
_FIELD_WIDTH = {
    "in_port": 4,
    "eth_src": 6,
    "eth_dst": 6,
    "eth_type": 2,
    "ip_src": 4,
    "ip_dst": 4,
    "ip_proto": 1,
    "tp_src": 2,
    "tp_dst": 2,
}

_FIXED_TLV_LEN = {
    Tag.IN_PORT: 4,
    Tag.ETH_SRC: 6,
    Tag.ETH_DST: 6,
    Tag.ETH_TYPE: 2,
    Tag.IP_SRC: 5,
    Tag.IP_DST: 5,
    Tag.IP_PROTO: 1,
    Tag.TP_SRC: 2,
    Tag.TP_DST: 2,
    Tag.PRIORITY: 2,
    Tag.IDLE_TIMEOUT: 2,
    Tag.HARD_TIMEOUT: 2,
    Tag.PACKET_COUNT: 8,
    Tag.REASON: 1,
    Tag.PORT_STATE: 1,
}


class ActionKind(IntEnum):
    OUTPUT = 0x01
    DROP = 0x02
    SET_FIELD = 0x03
    FLOOD = 0x04
    TO_CONTROLLER = 0x05


@dataclass(frozen=True, slots=True)
class MessageHeader:
    version: int
    msg_type: int
    payload_length: int
    xid: int
    module_id: int
    datapath_id: int

    def __post_init__(self) -> None:
        for name, bits in (("version", 8), ("msg_type", 8), ("payload_length", 16),
                           ("xid", 32), ("module_id", 32), ("datapath_id", 64)):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0 or value >> bits:
                raise ValueError(f"header {name} out of {bits}-bit range: {value!r}")


@dataclass(frozen=True, slots=True)
class HelloBody:
    offered_protocols: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        offered = tuple(tuple(p) for p in self.offered_protocols)
        if len(set(offered)) != len(offered):
            raise ValueError("offered protocol list must be duplicate-free")
        for pid, ver in offered:
            if not (0 <= pid <= 0xFF and 0 <= ver <= 0xFF):
                raise ValueError(f"protocol entry out of byte range: {(pid, ver)}")
        object.__setattr__(self, "offered_protocols", offered)


@dataclass(frozen=True, slots=True)
class ErrorBody:
    code: int
    text: str

    def __post_init__(self) -> None:
        if not 0 <= self.code <= 0xFFFF:
            raise ValueError(f"error code out of 16-bit range: {self.code}")


@dataclass(frozen=True, slots=True)
class ModuleAnnouncement:
    name: str


@dataclass(frozen=True, slots=True)
class ModuleAcknowledge:
    name: str


@dataclass(frozen=True, slots=True)
class FenceBody:
    pass


SbiPayload = Union[
    PacketIn, PacketOut, FlowModAdd, FlowModDelete,
    FlowRemoved, PortStatus, StatsRequest, StatsReply,
]
Payload = Union[HelloBody, ErrorBody, ModuleAnnouncement, ModuleAcknowledge, FenceBody, SbiPayload]

_SBI_KIND_BY_TYPE = {
    PacketIn: SbiKind.PACKET_IN,
    PacketOut: SbiKind.PACKET_OUT,
    FlowModAdd: SbiKind.FLOW_MOD_ADD,
    FlowModDelete: SbiKind.FLOW_MOD_DELETE,
    FlowRemoved: SbiKind.FLOW_REMOVED,
    PortStatus: SbiKind.PORT_STATUS,
    StatsRequest: SbiKind.STATS_REQUEST,
    StatsReply: SbiKind.STATS_REPLY,
}


@dataclass(frozen=True, slots=True)
class Message:
    header: MessageHeader
    payload: Payload

    @staticmethod
    def make(msg_type: int, xid: int, module_id: int, datapath_id: int,
             payload: Payload) -> "Message":
        body = _encode_payload(msg_type, payload)
        if len(body) > MAX_PAYLOAD:
            raise EncodeError(f"payload exceeds {MAX_PAYLOAD} bytes")
        header = MessageHeader(VERSION, msg_type, len(body), xid, module_id, datapath_id)
        return Message(header, payload)

    @staticmethod
    def hello(xid: int, offered: tuple[tuple[int, int], ...] = ((SBI_PROTOCOL_ID, SBI_PROTOCOL_VERSION),)) -> "Message":
        return Message.make(MsgType.HELLO, xid, 0, 0, HelloBody(offered))

    @staticmethod
    def error(xid: int, module_id: int, code: int, text: str, datapath_id: int = 0) -> "Message":
        return Message.make(MsgType.ERROR, xid, module_id, datapath_id, ErrorBody(code, text))

    @staticmethod
    def announce(xid: int, name: str) -> "Message":
        return Message.make(MsgType.MODULE_ANNOUNCEMENT, xid, 0, 0, ModuleAnnouncement(name))

    @staticmethod
    def acknowledge(xid: int, module_id: int, name: str) -> "Message":
        return Message.make(MsgType.MODULE_ACKNOWLEDGE, xid, module_id, 0, ModuleAcknowledge(name))

    @staticmethod
    def fence(xid: int, module_id: int, datapath_id: int = 0) -> "Message":
        return Message.make(MsgType.FENCE, xid, module_id, datapath_id, FenceBody())

    @staticmethod
    def sbi(xid: int, module_id: int, payload: SbiPayload) -> "Message":
        return Message.make(MsgType.SBI, xid, module_id, payload.datapath, payload)


# --- Low-level TLV helpers ----------------------------------------------

def _tlv(tag: int, value: bytes) -> bytes:
    return struct.pack(">BH", tag, len(value)) + value


def _encode_field_value(name: str, value: int) -> bytes:
    return value.to_bytes(_FIELD_WIDTH[name], "big")


def _encode_headers_tlvs(h: PacketHeaders) -> bytes:
    out = bytearray()
    for name in sbi.HEADER_FIELDS:
        tag = _FIELD_TAGS[name]
        value = getattr(h, name)
        if name in sbi.IP_FIELDS:
            out += _tlv(tag, value.to_bytes(4, "big") + bytes([32]))
        else:
            out += _tlv(tag, _encode_field_value(name, value))
    return bytes(out)


def _encode_match_tlvs(m: Match) -> bytes:
    out = bytearray()
    for name in sbi.HEADER_FIELDS:
        constraint = getattr(m, name)
        if constraint is None:
            continue
        tag = _FIELD_TAGS[name]
        if name in sbi.IP_FIELDS:
            addr, plen = constraint
            out += _tlv(tag, addr.to_bytes(4, "big") + bytes([plen]))
        else:
            out += _tlv(tag, _encode_field_value(name, constraint))
    return bytes(out)


def _encode_action(a: Action) -> bytes:
    if isinstance(a, Output):
        body = bytes([ActionKind.OUTPUT]) + a.port.to_bytes(4, "big")
    elif isinstance(a, Drop):
        body = bytes([ActionKind.DROP])
    elif isinstance(a, SetField):
        body = (bytes([ActionKind.SET_FIELD, _FIELD_TAGS[a.field]])
                + _encode_field_value(a.field, a.value))
    elif isinstance(a, Flood):
        body = bytes([ActionKind.FLOOD])
    elif isinstance(a, ToController):
        body = bytes([ActionKind.TO_CONTROLLER])
    else:
        raise EncodeError(f"unknown action {a!r}")
    return struct.pack(">H", len(body)) + body


def _encode_actions_tlv(actions: tuple[Action, ...]) -> bytes:
    return _tlv(Tag.ACTIONS, b"".join(_encode_action(a) for a in actions))


def _encode_u16_tlv(tag: int, value: int) -> bytes:
    return _tlv(tag, struct.pack(">H", value))


def _encode_rule_tlvs(rule: FlowRule, before_actions: bytes = b"") -> bytes:
    # before_actions holds extra TLVs with tags between 0x22 and 0x30 so the
    # ascending-tag invariant is preserved.
    return (_encode_match_tlvs(rule.match)
            + _encode_u16_tlv(Tag.PRIORITY, rule.priority)
            + _encode_u16_tlv(Tag.IDLE_TIMEOUT, rule.idle_timeout)
            + _encode_u16_tlv(Tag.HARD_TIMEOUT, rule.hard_timeout)
            + before_actions
            + _encode_actions_tlv(rule.actions))


def _encode_sbi(payload: SbiPayload) -> bytes:
    kind = _SBI_KIND_BY_TYPE[type(payload)]
    if isinstance(payload, PacketIn):
        body = _encode_headers_tlvs(payload.headers)
    elif isinstance(payload, PacketOut):
        body = _encode_headers_tlvs(payload.headers) + _encode_actions_tlv(payload.actions)
    elif isinstance(payload, FlowModAdd):
        body = _encode_rule_tlvs(payload.rule)
    elif isinstance(payload, FlowModDelete):
        body = _encode_match_tlvs(payload.match)
    elif isinstance(payload, FlowRemoved):
        body = _encode_rule_tlvs(payload.rule, _tlv(Tag.REASON, bytes([payload.reason])))
    elif isinstance(payload, PortStatus):
        body = (_tlv(Tag.IN_PORT, payload.port.to_bytes(4, "big"))
                + _tlv(Tag.PORT_STATE, bytes([1 if payload.up else 0])))
    elif isinstance(payload, StatsRequest):
        body = _encode_match_tlvs(payload.match)
    elif isinstance(payload, StatsReply):
        parts = []
        for e in payload.entries:
            nested = (_encode_match_tlvs(e.match)
                      + _encode_u16_tlv(Tag.PRIORITY, e.priority)
                      + _tlv(Tag.PACKET_COUNT, e.packet_count.to_bytes(8, "big"))
                      + _encode_actions_tlv(e.actions))
            parts.append(_tlv(Tag.STATS_ENTRY, nested))
        body = b"".join(parts)
    else:
        raise EncodeError(f"unknown SBI payload {payload!r}")
    return bytes([kind]) + body


def _encode_payload(msg_type: int, payload: Payload) -> bytes:
    try:
        if msg_type == MsgType.HELLO:
            assert isinstance(payload, HelloBody)
            offered = payload.offered_protocols
            if len(offered) > 0xFF:
                raise EncodeError("too many offered protocols")
            return bytes([len(offered)]) + b"".join(bytes(p) for p in offered)
        if msg_type == MsgType.ERROR:
            assert isinstance(payload, ErrorBody)
            return struct.pack(">H", payload.code) + payload.text.encode("utf-8")
        if msg_type == MsgType.MODULE_ANNOUNCEMENT:
            assert isinstance(payload, ModuleAnnouncement)
            return payload.name.encode("utf-8")
        if msg_type == MsgType.MODULE_ACKNOWLEDGE:
            assert isinstance(payload, ModuleAcknowledge)
            return payload.name.encode("utf-8")
        if msg_type == MsgType.FENCE:
            assert isinstance(payload, FenceBody)
            return b""
        if msg_type == MsgType.SBI:
            if type(payload) not in _SBI_KIND_BY_TYPE:
                raise EncodeError(f"payload {payload!r} is not an SBI body")
            return _encode_sbi(payload)
    except AssertionError:
        raise EncodeError(
            f"payload {type(payload).__name__} inconsistent with msg_type {msg_type:#x}"
        ) from None
    raise EncodeError(f"unknown msg_type {msg_type:#x}")


def encode_message(msg: Message) -> bytes:
    """Serialize one frame; deterministic for identical input."""
    h = msg.header
    if h.version != VERSION:
        raise EncodeError(f"header version must be {VERSION:#04x}")
    body = _encode_payload(h.msg_type, msg.payload)
    if len(body) > MAX_PAYLOAD:
        raise EncodeError(f"payload exceeds {MAX_PAYLOAD} bytes")
    if h.payload_length != len(body):
        raise EncodeError(
            f"header payload_length {h.payload_length} != actual {len(body)}"
        )
    if type(msg.payload) in _SBI_KIND_BY_TYPE and h.datapath_id != msg.payload.datapath:
        raise EncodeError("header datapath_id disagrees with SBI payload datapath")
    return struct.pack(
        _HEADER_FMT, h.version, h.msg_type, h.payload_length,
        h.xid, h.module_id, h.datapath_id,
    ) + body


# --- Decoding ------------------------------------------------------------

def _parse_tlvs(data: bytes, context: str) -> list[tuple[int, bytes]]:
    """Parse a TLV stream, enforcing tag set, ordering, and fixed lengths."""
    tlvs: list[tuple[int, bytes]] = []
    offset = 0
    prev_tag = -1
    while offset < len(data):
        if len(data) - offset < 3:
            raise ProtocolError(f"truncated TLV header in {context}")
        tag = data[offset]
        (length,) = struct.unpack_from(">H", data, offset + 1)
        offset += 3
        if len(data) - offset < length:
            raise ProtocolError(f"truncated TLV value in {context}")
        value = data[offset:offset + length]
        offset += length
        try:
            tag_e = Tag(tag)
        except ValueError:
            raise ProtocolError(f"unknown TLV tag {tag:#04x} in {context}") from None
        if tag < prev_tag:
            raise ProtocolError(f"TLV tags out of order in {context}")
        if tag == prev_tag and tag_e is not Tag.STATS_ENTRY:
            raise ProtocolError(f"duplicate TLV tag {tag:#04x} in {context}")
        prev_tag = tag
        expected = _FIXED_TLV_LEN.get(tag_e)
        if expected is not None and length != expected:
            raise ProtocolError(
                f"TLV tag {tag:#04x} length {length} != {expected} in {context}"
            )
        tlvs.append((tag_e, value))
    return tlvs


def _decode_headers(tlvs: dict[int, bytes], context: str) -> PacketHeaders:
    fields = {}
    for name in sbi.HEADER_FIELDS:
        tag = _FIELD_TAGS[name]
        if tag not in tlvs:
            raise ProtocolError(f"missing header field {name} in {context}")
        value = tlvs[tag]
        if name in sbi.IP_FIELDS:
            if value[4] != 32:
                raise ProtocolError(f"{name} prefix must be 32 in {context}")
            fields[name] = int.from_bytes(value[:4], "big")
        else:
            fields[name] = int.from_bytes(value, "big")
    return PacketHeaders(**fields)


def _decode_match(tlvs: dict[int, bytes], context: str) -> Match:
    fields = {}
    for name in sbi.HEADER_FIELDS:
        tag = _FIELD_TAGS[name]
        if tag not in tlvs:
            continue
        value = tlvs[tag]
        if name in sbi.IP_FIELDS:
            plen = value[4]
            if plen > 32:
                raise ProtocolError(f"{name} prefix length {plen} > 32 in {context}")
            fields[name] = (int.from_bytes(value[:4], "big"), plen)
        else:
            fields[name] = int.from_bytes(value, "big")
    try:
        return Match(**fields)
    except ValueError as exc:
        raise ProtocolError(f"invalid match in {context}: {exc}") from None


def _decode_actions(data: bytes, context: str) -> tuple[Action, ...]:
    actions: list[Action] = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < 2:
            raise ProtocolError(f"truncated action length in {context}")
        (length,) = struct.unpack_from(">H", data, offset)
        offset += 2
        if length < 1 or len(data) - offset < length:
            raise ProtocolError(f"truncated action in {context}")
        body = data[offset:offset + length]
        offset += length
        kind = body[0]
        rest = body[1:]
        if kind == ActionKind.OUTPUT:
            if len(rest) != 4:
                raise ProtocolError(f"bad OUTPUT action length in {context}")
            actions.append(Output(int.from_bytes(rest, "big")))
        elif kind == ActionKind.DROP:
            if rest:
                raise ProtocolError(f"bad DROP action length in {context}")
            actions.append(Drop())
        elif kind == ActionKind.SET_FIELD:
            if len(rest) < 1:
                raise ProtocolError(f"bad SET_FIELD action in {context}")
            field_name = _FIELD_BY_TAG.get(rest[0])
            if field_name is None:
                raise ProtocolError(f"SET_FIELD unknown field tag {rest[0]:#04x} in {context}")
            value = rest[1:]
            if len(value) != _FIELD_WIDTH[field_name]:
                raise ProtocolError(f"SET_FIELD bad value width for {field_name} in {context}")
            actions.append(SetField(field_name, int.from_bytes(value, "big")))
        elif kind == ActionKind.FLOOD:
            if rest:
                raise ProtocolError(f"bad FLOOD action length in {context}")
            actions.append(Flood())
        elif kind == ActionKind.TO_CONTROLLER:
            if rest:
                raise ProtocolError(f"bad TO_CONTROLLER action length in {context}")
            actions.append(ToController())
        else:
            raise ProtocolError(f"unknown action kind {kind:#04x} in {context}")
    return tuple(actions)


_MATCH_TAGS = frozenset(_FIELD_TAGS.values())


def _tlv_dict(tlvs: list[tuple[int, bytes]], allowed: frozenset, required: frozenset,
              context: str) -> dict[int, bytes]:
    out: dict[int, bytes] = {}
    for tag, value in tlvs:
        if tag not in allowed:
            raise ProtocolError(f"TLV tag {tag:#04x} not allowed in {context}")
        out[tag] = value
    for tag in required:
        if tag not in out:
            raise ProtocolError(f"missing required TLV {tag:#04x} in {context}")
    return out


_HEADER_TAGS = frozenset(_FIELD_TAGS.values())
_RULE_TAGS = _MATCH_TAGS | {Tag.PRIORITY, Tag.IDLE_TIMEOUT, Tag.HARD_TIMEOUT, Tag.ACTIONS}
_RULE_REQUIRED = frozenset({Tag.PRIORITY, Tag.IDLE_TIMEOUT, Tag.HARD_TIMEOUT, Tag.ACTIONS})


def _u16(value: bytes) -> int:
    return struct.unpack(">H", value)[0]


def _decode_rule(tlvs: dict[int, bytes], context: str) -> FlowRule:
    match = _decode_match(tlvs, context)
    actions = _decode_actions(tlvs[Tag.ACTIONS], context)
    try:
        return FlowRule(
            priority=_u16(tlvs[Tag.PRIORITY]),
            match=match,
            actions=actions,
            idle_timeout=_u16(tlvs[Tag.IDLE_TIMEOUT]),
            hard_timeout=_u16(tlvs[Tag.HARD_TIMEOUT]),
        )
    except ValueError as exc:
        raise ProtocolError(f"invalid flow rule in {context}: {exc}") from None


def _decode_sbi(data: bytes, datapath_id: int) -> SbiPayload:
    if len(data) < 1:
        raise ProtocolError("empty SBI payload")
    try:
        kind = SbiKind(data[0])
    except ValueError:
        raise ProtocolError(f"unknown SBI kind {data[0]:#04x}") from None
    context = kind.name
    tlvs = _parse_tlvs(data[1:], context)
    try:
        if kind is SbiKind.PACKET_IN:
            d = _tlv_dict(tlvs, _HEADER_TAGS, _HEADER_TAGS, context)
            headers = _decode_headers(d, context)
            return PacketIn(headers, datapath_id)
        if kind is SbiKind.PACKET_OUT:
            allowed = _HEADER_TAGS | {Tag.ACTIONS}
            d = _tlv_dict(tlvs, allowed, allowed, context)
            headers = _decode_headers(d, context)
            return PacketOut(datapath_id, headers, _decode_actions(d[Tag.ACTIONS], context))
        if kind is SbiKind.FLOW_MOD_ADD:
            d = _tlv_dict(tlvs, _RULE_TAGS, _RULE_REQUIRED, context)
            return FlowModAdd(datapath_id, _decode_rule(d, context))
        if kind is SbiKind.FLOW_MOD_DELETE:
            d = _tlv_dict(tlvs, _MATCH_TAGS, frozenset(), context)
            return FlowModDelete(datapath_id, _decode_match(d, context))
        if kind is SbiKind.FLOW_REMOVED:
            allowed = _RULE_TAGS | {Tag.REASON}
            d = _tlv_dict(tlvs, allowed, _RULE_REQUIRED | {Tag.REASON}, context)
            try:
                reason = RemovalReason(d[Tag.REASON][0])
            except ValueError:
                raise ProtocolError(f"unknown removal reason in {context}") from None
            return FlowRemoved(datapath_id, _decode_rule(d, context), reason)
        if kind is SbiKind.PORT_STATUS:
            allowed = frozenset({Tag.IN_PORT, Tag.PORT_STATE})
            d = _tlv_dict(tlvs, allowed, allowed, context)
            state = d[Tag.PORT_STATE][0]
            if state > 1:
                raise ProtocolError(f"bad port state {state} in {context}")
            return PortStatus(datapath_id, int.from_bytes(d[Tag.IN_PORT], "big"), bool(state))
        if kind is SbiKind.STATS_REQUEST:
            d = _tlv_dict(tlvs, _MATCH_TAGS, frozenset(), context)
            return StatsRequest(datapath_id, _decode_match(d, context))
        if kind is SbiKind.STATS_REPLY:
            entries = []
            for tag, value in tlvs:
                if tag is not Tag.STATS_ENTRY:
                    raise ProtocolError(f"TLV tag {tag:#04x} not allowed in {context}")
                nested = _parse_tlvs(value, "STATS_ENTRY")
                allowed = _MATCH_TAGS | {Tag.PRIORITY, Tag.PACKET_COUNT, Tag.ACTIONS}
                required = frozenset({Tag.PRIORITY, Tag.PACKET_COUNT, Tag.ACTIONS})
                d = _tlv_dict(nested, allowed, required, "STATS_ENTRY")
                entries.append(StatsEntry(
                    priority=_u16(d[Tag.PRIORITY]),
                    match=_decode_match(d, "STATS_ENTRY"),
                    actions=_decode_actions(d[Tag.ACTIONS], "STATS_ENTRY"),
                    packet_count=int.from_bytes(d[Tag.PACKET_COUNT], "big"),
                ))
            return StatsReply(datapath_id, tuple(entries))
    except ValueError as exc:
        raise ProtocolError(f"invalid {context} payload: {exc}") from None
    raise ProtocolError(f"unhandled SBI kind {kind}")


def _decode_payload(msg_type: MsgType, data: bytes, header: MessageHeader) -> Payload:
    if msg_type is MsgType.HELLO:
        if len(data) < 1:
            raise ProtocolError("HELLO payload missing count byte")
        count = data[0]
        if len(data) != 1 + 2 * count:
            raise ProtocolError("HELLO payload length disagrees with count")
        offered = tuple((data[1 + 2 * i], data[2 + 2 * i]) for i in range(count))
        try:
            return HelloBody(offered)
        except ValueError as exc:
            raise ProtocolError(f"invalid HELLO body: {exc}") from None
    if msg_type is MsgType.ERROR:
        if len(data) < 2:
            raise ProtocolError("ERROR payload shorter than code field")
        code = _u16(data[:2])
        try:
            text = data[2:].decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("ERROR text is not valid UTF-8") from None
        return ErrorBody(code, text)
    if msg_type in (MsgType.MODULE_ANNOUNCEMENT, MsgType.MODULE_ACKNOWLEDGE):
        try:
            name = data.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("module name is not valid UTF-8") from None
        if msg_type is MsgType.MODULE_ANNOUNCEMENT:
            return ModuleAnnouncement(name)
        return ModuleAcknowledge(name)
    if msg_type is MsgType.FENCE:
        if data:
            raise ProtocolError("FENCE payload must be empty")
        return FenceBody()
    if msg_type is MsgType.SBI:
        return _decode_sbi(data, header.datapath_id)
    raise ProtocolError(f"unhandled msg_type {msg_type}")


def decode_message(data: bytes) -> tuple[Message, int]:
    """Decode one frame from the start of `data`.

    Returns (message, bytes consumed); bytes past the frame are untouched.
    Raises NeedMoreData when the buffer holds less than one frame and
    ProtocolError on any malformed content.
    """
    if len(data) < HEADER_LEN:
        raise NeedMoreData(HEADER_LEN)
    version, msg_type_raw, payload_length, xid, module_id, datapath_id = struct.unpack_from(
        _HEADER_FMT, data, 0
    )
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version:#04x}")
    try:
        msg_type = MsgType(msg_type_raw)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {msg_type_raw:#04x}") from None
    total = HEADER_LEN + payload_length
    if len(data) < total:
        raise NeedMoreData(total)
    header = MessageHeader(version, int(msg_type), payload_length, xid, module_id, datapath_id)
    payload = _decode_payload(msg_type, bytes(data[HEADER_LEN:total]), header)
    return Message(header, payload), total


def negotiate_hello(local: HelloBody, remote: HelloBody) -> tuple[tuple[int, int], ...]:
    """Intersection of offered (protocol_id, version) pairs, sorted; may be empty."""
    common = set(local.offered_protocols) & set(remote.offered_protocols)
    return tuple(sorted(common))
