"""Core semantics: merge policies, sequential derivation, fences, ordering."""

import random

import pytest

from netcompose.compspec import Policy
from netcompose.core import (
    DeriveResult,
    MergeInput,
    derive_sequential_input,
    merge_parallel,
)
from netcompose.sbi import (
    Drop,
    FlowModAdd,
    FlowRule,
    Match,
    Output,
    PacketHeaders,
    PacketIn,
    PacketOut,
    PortStatus,
    SetField,
    StatsEntry,
    StatsReply,
    StatsRequest,
    parse_ip,
)
from netcompose.wire import ErrorCode, Message, MsgType

from helpers import (
    CoreHarness,
    oracle_conflict_pairs,
    oracle_components,
    random_module_results,
)


def _merge_inputs(branches):
    return [
        MergeInput(f"m{i}", unit_id=i + 1, priority=prio, decl_index=i,
                   commands=[(i + 1, c) for c in commands])
        for i, (prio, commands) in enumerate(branches)
    ]


def _slot_multiset(branches):
    return sorted(
        ((bi, pos) for bi, (_, commands) in enumerate(branches)
         for pos in range(len(commands)))
    )


def _result_slots(branches, result):
    """Map merged commands back to (branch, pos) slots for oracle checks."""
    remaining = {bi: 0 for bi in range(len(branches))}
    slots = []
    for mid, cmd in result.commands:
        bi = mid - 1
        pos = branches[bi][1].index(cmd, remaining[bi])
        remaining[bi] = pos + 1
        slots.append((bi, pos))
    return slots


RULE_DENY = FlowRule(200, Match(ip_dst=(parse_ip("10.0.3.0"), 24)), (Drop(),))
RULE_FWD = FlowRule(100, Match(ip_dst=(parse_ip("10.0.3.0"), 24)), (Output(2),))
RULE_OTHER = FlowRule(100, Match(ip_dst=(parse_ip("10.0.2.0"), 24)), (Output(1),))


class TestMergeParallel:
    def test_disjoint_results_survive_every_policy(self):
        branches = [(10, [FlowModAdd(1, RULE_DENY)]), (5, [FlowModAdd(1, RULE_OTHER)])]
        for kind in ("discard", "ignore", "priority"):
            result = merge_parallel(_merge_inputs(branches), Policy(kind))
            assert [c for _, c in result.commands] == [
                FlowModAdd(1, RULE_DENY), FlowModAdd(1, RULE_OTHER)]
            assert result.conflicts == []

    def test_priority_keeps_highest_module(self):
        branches = [(10, [FlowModAdd(1, RULE_DENY)]), (5, [FlowModAdd(1, RULE_FWD)])]
        result = merge_parallel(_merge_inputs(branches), Policy("priority"))
        assert [c for _, c in result.commands] == [FlowModAdd(1, RULE_DENY)]
        assert len(result.conflicts) == 1

    def test_discard_removes_both_ignore_keeps_both(self):
        branches = [(10, [FlowModAdd(1, RULE_DENY)]), (5, [FlowModAdd(1, RULE_FWD)])]
        discard = merge_parallel(_merge_inputs(branches), Policy("discard"))
        assert discard.commands == []
        ignore = merge_parallel(_merge_inputs(branches), Policy("ignore"))
        assert [c for _, c in ignore.commands] == [
            FlowModAdd(1, RULE_DENY), FlowModAdd(1, RULE_FWD)]

    def test_same_module_commands_never_conflict(self):
        branches = [(10, [FlowModAdd(1, RULE_DENY), FlowModAdd(1, RULE_FWD)])]
        result = merge_parallel(_merge_inputs(branches), Policy("discard"))
        assert len(result.commands) == 2
        assert result.conflicts == []

    def test_priority_tie_breaks_by_module_id(self):
        branches = [(5, [FlowModAdd(1, RULE_DENY)]), (5, [FlowModAdd(1, RULE_FWD)])]
        result = merge_parallel(_merge_inputs(branches), Policy("priority"))
        assert [c for _, c in result.commands] == [FlowModAdd(1, RULE_DENY)]
        assert result.tie_warnings

    def test_packet_out_conflicts_on_same_packet(self):
        h = PacketHeaders(in_port=1, ip_dst=parse_ip("10.0.3.9"))
        branches = [(10, [PacketOut(1, h, (Output(1),))]),
                    (5, [PacketOut(1, h, (Output(2),))])]
        result = merge_parallel(_merge_inputs(branches), Policy("priority"))
        assert [c for _, c in result.commands] == [PacketOut(1, h, (Output(1),))]

    def test_equal_packet_outs_do_not_conflict(self):
        h = PacketHeaders(in_port=1)
        branches = [(10, [PacketOut(1, h, (Output(1),))]),
                    (5, [PacketOut(1, h, (Output(1),))])]
        result = merge_parallel(_merge_inputs(branches), Policy("discard"))
        assert len(result.commands) == 2

    def test_output_order_by_declaration(self):
        branches = [(1, [FlowModAdd(1, RULE_OTHER)]),
                    (99, [FlowModAdd(2, RULE_OTHER), FlowModAdd(2, RULE_DENY)])]
        result = merge_parallel(_merge_inputs(branches), Policy("ignore"))
        assert [mid for mid, _ in result.commands] == [1, 2, 2]

    def test_conflict_scope_masks_differences(self):
        m = Match(in_port=1)
        r1 = FlowRule(1, m, (SetField("eth_dst", 7), Output(1)))
        r2 = FlowRule(1, m, (SetField("eth_dst", 7), Output(9)))
        branches = [(10, [FlowModAdd(1, r1)]), (5, [FlowModAdd(1, r2)])]
        scoped = merge_parallel(_merge_inputs(branches),
                                Policy("discard", frozenset({"eth_dst"})))
        assert len(scoped.commands) == 2
        unscoped = merge_parallel(_merge_inputs(branches), Policy("discard"))
        assert unscoped.commands == []

    @pytest.mark.parametrize("kind", ["discard", "ignore", "priority"])
    def test_randomized_against_conflict_matrix_oracle(self, kind):
        rng = random.Random(hash(kind) & 0xFFFF)
        for _ in range(150):
            branches = random_module_results(rng, rng.choice((2, 3)))
            result = merge_parallel(_merge_inputs(branches), Policy(kind))
            pairs = oracle_conflict_pairs(branches)
            assert len(result.conflicts) == len(pairs)
            out_slots = set(_result_slots(branches, result))
            all_slots = set(_slot_multiset(branches))
            conflicted = {s for pair in pairs for s in pair}
            if kind == "ignore":
                assert out_slots == all_slots
            elif kind == "discard":
                assert out_slots == all_slots - conflicted
                for a, b in pairs:
                    assert a not in out_slots and b not in out_slots
            else:
                for comp in oracle_components(pairs):
                    top = max(branches[bi][0] for bi, _ in comp)
                    winners = {bi for bi, _ in comp if branches[bi][0] == top}
                    winner = min(winners)  # tie-break by module id == index order
                    assert out_slots & comp == {s for s in comp if s[0] == winner}
                assert all_slots - conflicted <= out_slots

    def test_policy_laws_hold(self):
        rng = random.Random(0xA11CE)
        for _ in range(100):
            branches = random_module_results(rng, 3)
            inputs = _merge_inputs(branches)
            ignore = merge_parallel(inputs, Policy("ignore"))
            discard = merge_parallel(inputs, Policy("discard"))
            priority = merge_parallel(inputs, Policy("priority"))
            ignore_cmds = [c for _, c in ignore.commands]
            for _, c in discard.commands:
                assert c in ignore_cmds
            if not ignore.conflicts:
                assert discard.commands == ignore.commands == priority.commands


HDR = PacketHeaders(in_port=1, ip_dst=parse_ip("10.0.1.5"), eth_dst=5)


class TestDeriveSequentialInput:
    def test_nop_passthrough(self):
        ev = PacketIn(HDR, 1)
        result = derive_sequential_input(ev, [[]])
        assert result == DeriveResult(ev, False)

    def test_drop_short_circuits(self):
        ev = PacketIn(HDR, 1)
        deny = FlowModAdd(1, FlowRule(200, Match(ip_dst=(parse_ip("10.0.1.0"), 24)),
                                      (Drop(),)))
        result = derive_sequential_input(ev, [[(3, deny)]])
        assert result.dropped and result.dropped_by == 3

    def test_setfield_rewrites_next_input(self):
        ev = PacketIn(HDR, 1)
        rewrite = FlowModAdd(1, FlowRule(
            100, Match(ip_dst=(parse_ip("10.0.1.0"), 24)),
            (SetField("ip_dst", parse_ip("10.0.2.9")), Output(2))))
        result = derive_sequential_input(ev, [[(2, rewrite)]])
        assert not result.dropped
        assert result.event.headers.ip_dst == parse_ip("10.0.2.9")
        assert result.event.datapath == 1

    def test_non_covering_rule_ignored(self):
        ev = PacketIn(HDR, 1)
        other = FlowModAdd(1, FlowRule(
            100, Match(ip_dst=(parse_ip("10.0.9.0"), 24)),
            (SetField("ip_dst", 1), Output(2))))
        result = derive_sequential_input(ev, [[(2, other)]])
        assert result.event == ev

    def test_other_datapath_rule_ignored(self):
        ev = PacketIn(HDR, 1)
        rewrite = FlowModAdd(2, FlowRule(
            100, Match(), (SetField("ip_dst", 1), Output(2))))
        result = derive_sequential_input(ev, [[(2, rewrite)]])
        assert result.event == ev

    def test_packet_out_for_same_packet_applies(self):
        ev = PacketIn(HDR, 1)
        po = PacketOut(1, HDR, (SetField("eth_dst", 77), Output(2)))
        result = derive_sequential_input(ev, [[(2, po)]])
        assert result.event.headers.eth_dst == 77

    def test_packet_out_other_packet_ignored(self):
        ev = PacketIn(HDR, 1)
        other = PacketOut(1, PacketHeaders(in_port=9), (SetField("eth_dst", 77),))
        result = derive_sequential_input(ev, [[(2, other)]])
        assert result.event == ev

    def test_rewrites_chain_across_modules(self):
        ev = PacketIn(HDR, 1)
        first = FlowModAdd(1, FlowRule(
            100, Match(ip_dst=(parse_ip("10.0.1.0"), 24)),
            (SetField("ip_dst", parse_ip("10.0.2.9")),)))
        second = FlowModAdd(1, FlowRule(
            100, Match(ip_dst=(parse_ip("10.0.2.9"), 32)),
            (SetField("tp_dst", 8080),)))
        result = derive_sequential_input(ev, [[(2, first)], [(3, second)]])
        assert result.event.headers.ip_dst == parse_ip("10.0.2.9")
        assert result.event.headers.tp_dst == 8080

    def test_non_packet_in_forwarded_with_warning(self):
        ev = PortStatus(1, 4, up=False)
        result = derive_sequential_input(ev, [[(2, FlowModAdd(1, RULE_DENY))]])
        assert result.event == ev
        assert result.warning


PAR_SPEC = (
    "module fw priority=10\n"
    "module r1 priority=5\n"
    "execution parallel policy=priority { fw r1 }\n"
)

SEQ_SPEC = (
    "module fw priority=10\n"
    "module r1 priority=5\n"
    "execution sequential { fw r1 }\n"
)


def _pkt(dp=1, ip="10.0.3.9", port=1, tp_src=0):
    return PacketIn(PacketHeaders(in_port=port, ip_dst=parse_ip(ip), tp_src=tp_src), dp)


class TestDispatch:
    def test_parallel_invokes_all_with_same_xid(self):
        h = CoreHarness(PAR_SPEC)
        xid = h.inject(_pkt())
        inv_fw = h.invocations("fw")
        inv_r1 = h.invocations("r1")
        assert len(inv_fw) == len(inv_r1) == 1
        assert inv_fw[0].header.xid == inv_r1[0].header.xid == xid
        assert inv_fw[0].payload == inv_r1[0].payload

    def test_sequential_invokes_first_only(self):
        h = CoreHarness(SEQ_SPEC)
        xid = h.inject(_pkt())
        assert len(h.invocations("fw")) == 1
        assert h.invocations("r1") == []
        h.respond("fw", xid, [])
        assert len(h.invocations("r1")) == 1

    def test_filtered_module_auto_fenced(self):
        spec = ("module fw priority=10 events=packet_in\n"
                "module r1 priority=5\n"
                "execution parallel policy=priority { fw r1 }\n")
        h = CoreHarness(spec)
        xid = h.inject(PortStatus(1, 2, up=False))
        assert h.invocations("fw") == []
        assert len(h.invocations("r1")) == 1
        assert "auto_fence" in h.log_kinds()
        h.respond("r1", xid, [])
        released = [e for e in h.log.entries() if e.kind == "output_released"]
        assert len(released) == 1

    def test_event_matched_by_no_module_is_noop(self):
        spec = ("module fw events=packet_in\nmodule r1 events=packet_in\n"
                "execution parallel policy=ignore { fw r1 }\n")
        h = CoreHarness(spec)
        h.inject(PortStatus(1, 2, up=True))
        entries = h.log.entries()
        compose = [e for e in entries if e.kind == "composition_complete"]
        assert len(compose) == 1 and "no-op" in compose[0].detail
        assert [e for e in entries if e.kind == "output_released"]
        assert h.released() == []


class TestFencing:
    def test_composition_waits_for_last_fence(self):
        h = CoreHarness(PAR_SPEC)
        xid = h.inject(_pkt())
        h.respond("fw", xid, [FlowModAdd(1, RULE_DENY)])
        assert "composition_complete" not in h.log_kinds()
        h.respond("r1", xid, [FlowModAdd(1, RULE_FWD)])
        assert "composition_complete" in h.log_kinds()

    def test_unknown_xid_fence_is_protocol_error(self):
        h = CoreHarness(PAR_SPEC)
        peer, out = h.peers["fw"]
        h.feed(peer, Message.fence(999, h.module_ids["fw"]))
        errors = [m for m in out.take() if m.header.msg_type == MsgType.ERROR]
        assert errors and errors[0].payload.code == ErrorCode.UNKNOWN_XID

    def test_duplicate_fence_is_protocol_error(self):
        h = CoreHarness(PAR_SPEC)
        xid = h.inject(_pkt())
        h.respond("fw", xid, [])
        peer, out = h.peers["fw"]
        out.take()
        h.feed(peer, Message.fence(xid, h.module_ids["fw"]))
        errors = [m for m in out.take() if m.header.msg_type == MsgType.ERROR]
        assert errors and errors[0].payload.code == ErrorCode.DUPLICATE_FENCE

    def test_fence_order_does_not_change_output(self):
        def run(order):
            h = CoreHarness(PAR_SPEC)
            xid = h.inject(_pkt())
            for module in order:
                cmds = [FlowModAdd(1, RULE_DENY if module == "fw" else RULE_FWD)]
                h.respond(module, xid, cmds)
            return [(m.header.module_id, m.payload) for m in h.released()]

        assert run(["fw", "r1"]) == run(["r1", "fw"])

    def test_nop_module_contributes_identity(self):
        h = CoreHarness(PAR_SPEC)
        xid = h.inject(_pkt())
        h.respond("fw", xid, [])
        h.respond("r1", xid, [FlowModAdd(1, RULE_FWD)])
        released = h.released()
        assert [m.payload for m in released] == [FlowModAdd(1, RULE_FWD)]
        fences = [e for e in h.log.entries() if e.kind == "fence"]
        assert any("NOP" in e.detail for e in fences)


class TestSequentialChain:
    def test_drop_short_circuit_skips_second_module(self):
        h = CoreHarness(SEQ_SPEC)
        xid = h.inject(_pkt(ip="10.0.3.9"))
        h.respond("fw", xid, [FlowModAdd(1, RULE_DENY)])
        assert h.invocations("r1") == []
        assert "sequential_short_circuit" in h.log_kinds()
        released = h.released()
        assert [m.payload for m in released] == [FlowModAdd(1, RULE_DENY)]

    def test_rewrite_feeds_next_module(self):
        h = CoreHarness(SEQ_SPEC)
        xid = h.inject(_pkt(ip="10.0.1.5"))
        rewrite = FlowModAdd(1, FlowRule(
            100, Match(ip_dst=(parse_ip("10.0.1.0"), 24)),
            (SetField("ip_dst", parse_ip("10.0.2.9")), Output(2))))
        h.respond("fw", xid, [rewrite])
        inv = h.invocations("r1")
        assert len(inv) == 1
        assert inv[0].payload.headers.ip_dst == parse_ip("10.0.2.9")

    def test_chain_concatenates_commands(self):
        h = CoreHarness(SEQ_SPEC)
        xid = h.inject(_pkt(ip="10.0.1.5"))
        h.respond("fw", xid, [FlowModAdd(1, RULE_OTHER)])
        h.respond("r1", xid, [FlowModAdd(1, RULE_FWD)])
        released = h.released()
        assert [m.payload for m in released] == [
            FlowModAdd(1, RULE_OTHER), FlowModAdd(1, RULE_FWD)]


class TestReadState:
    def test_ticket_roundtrip_restores_xid(self):
        h = CoreHarness(PAR_SPEC)
        peer, out = h.peers["fw"]
        mid = h.module_ids["fw"]
        req = StatsRequest(1, Match())
        h.feed(peer, Message.sbi(9, mid, req))
        forwarded = h.shim_out.take()
        assert len(forwarded) == 1
        core_xid = forwarded[0].header.xid
        assert core_xid != 9 and forwarded[0].payload == req
        reply = StatsReply(1, (StatsEntry(1, Match(), (Output(1),), 4),))
        h.feed(h.shim_peer, Message.sbi(core_xid, 0, reply))
        delivered = out.take()
        assert len(delivered) == 1
        assert delivered[0].header.xid == 9
        assert delivered[0].payload == reply
        h.feed(peer, Message.fence(9, mid))
        assert h.core.metrics["protocol_errors"] == 0

    def test_two_tickets_route_to_their_modules(self):
        h = CoreHarness(PAR_SPEC)
        peer_fw, out_fw = h.peers["fw"]
        peer_r1, out_r1 = h.peers["r1"]
        h.feed(peer_fw, Message.sbi(9, h.module_ids["fw"], StatsRequest(1)))
        h.feed(peer_r1, Message.sbi(44, h.module_ids["r1"], StatsRequest(2)))
        xids = [m.header.xid for m in h.shim_out.take()]
        h.feed(h.shim_peer, Message.sbi(xids[1], 0, StatsReply(2)))
        h.feed(h.shim_peer, Message.sbi(xids[0], 0, StatsReply(1)))
        got_fw = out_fw.take()
        got_r1 = out_r1.take()
        assert [m.header.xid for m in got_fw] == [9]
        assert [m.header.xid for m in got_r1] == [44]

    def test_reply_without_ticket_dropped_with_warning(self):
        h = CoreHarness(PAR_SPEC)
        h.feed(h.shim_peer, Message.sbi(999, 0, StatsReply(1)))
        warnings = [e for e in h.log.entries() if e.kind == "warning"]
        assert any("no outstanding ticket" in e.detail for e in warnings)
        assert h.core.metrics["protocol_errors"] == 0


class TestOutputOrdering:
    def test_later_event_buffered_until_earlier_releases(self):
        h = CoreHarness(PAR_SPEC)
        x1 = h.inject(_pkt(dp=5))
        x2 = h.inject(_pkt(dp=5, ip="10.0.2.7"))
        h.respond("fw", x2, [])
        h.respond("r1", x2, [FlowModAdd(5, RULE_OTHER)])
        assert h.released() == []
        assert "output_buffered" in h.log_kinds()
        h.respond("fw", x1, [])
        h.respond("r1", x1, [FlowModAdd(5, RULE_FWD)])
        released = h.released()
        assert [m.header.xid for m in released] == [x1, x2]

    def test_independent_datapaths_release_immediately(self):
        h = CoreHarness(PAR_SPEC)
        h.inject(_pkt(dp=5))
        x2 = h.inject(_pkt(dp=6))
        h.respond("fw", x2, [])
        h.respond("r1", x2, [FlowModAdd(6, RULE_OTHER)])
        released = h.released()
        assert [m.header.xid for m in released] == [x2]

    def test_randomized_completion_order_releases_in_arrival_order(self):
        rng = random.Random(0x0DD5)
        for _ in range(30):
            h = CoreHarness(PAR_SPEC)
            dp_of = {}
            for _ in range(8):
                dp = rng.choice((5, 6))
                xid = h.inject(_pkt(dp=dp, ip="10.0.1.1"))
                dp_of[xid] = dp
            pending = [(m, x) for x in dp_of for m in ("fw", "r1")]
            rng.shuffle(pending)
            for module, xid in pending:
                cmds = [FlowModAdd(dp_of[xid], RULE_OTHER)] if module == "r1" else []
                h.respond(module, xid, cmds)
            per_dp: dict[int, list[int]] = {}
            for e in h.log.entries():
                if e.kind == "output_released":
                    per_dp.setdefault(e.datapath_id, []).append(e.xid)
            for dp_list in per_dp.values():
                assert dp_list == sorted(dp_list)
