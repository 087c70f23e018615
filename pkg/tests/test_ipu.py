from collections import Counter

from hypothesis import given, settings
from hypothesis import strategies as st

from presend import scenarios as S
from presend.cache import Eviction
from presend.frontend import Mode, SimConfig, Simulator
from presend.hierarchy import Hierarchy, HierarchyConfig
from presend.ipu import (
    Decision, Ipu, IpuConfig, Presender, SyncResult, ipu_step, presend_decide, sync_with_processor,
)
from presend.progmap import RETURN, FragmentId, MapBuilder, Side

A = FragmentId(Side.CALL, S.A)
B = FragmentId(Side.CALL, S.B)
C = FragmentId(Side.CALL, S.C)


def tables(both_paths):
    b = MapBuilder()
    for rec in S.fig4_records(both_paths):
        b.observe_retired(rec)
    return b.tables


def test_traversal_walkthrough():
    ipu = Ipu(tables(both_paths=False))
    trk = ipu.start(A)
    assert ipu.step_track(trk) == [1, 2, 10]
    assert trk.ipus[-1][0] == FragmentId(Side.RET, S.A)
    assert [e.frag for e in trk.ufq] == [A]
    assert trk.next_frag == B
    assert ipu.step_track(trk) == [14, 15]
    assert trk.ipus[-1][0] == FragmentId(Side.RET, S.B)
    assert trk.next_frag is RETURN
    assert ipu.step_track(trk) == [26, 27]
    assert trk.next_frag == C
    assert [b for b, _, _ in ipu.ubaq] == [1, 2, 10, 14, 15, 26, 27]


def test_inactive_path_prevents_fork():
    t = tables(both_paths=True)
    t.dtt_entry(A).aging[:] = [3, 0]
    ipu = Ipu(t)
    trk = ipu.start(A)
    ipu.step_track(trk)
    assert len(ipu.tracks) == 1
    assert trk.next_frag == B


def test_both_active_forks_and_copies_ipus():
    ipu = Ipu(tables(both_paths=True))
    trk = ipu.start(A)
    ipu.step_track(trk)
    assert len(ipu.tracks) == 2
    a, b = ipu.tracks
    assert {a.next_frag, b.next_frag} == {B, C}
    assert a.ipus == b.ipus


def test_single_track_follows_higher_aged_path():
    t = tables(both_paths=True)
    t.dtt_entry(A).aging[:] = [1, 3]
    ipu = Ipu(t, IpuConfig(max_tracks=1))
    trk = ipu.start(A)
    ipu.step_track(trk)
    assert len(ipu.tracks) == 1 and trk.next_frag == C


def test_keep_ahead_threshold_pauses_track():
    ipu = Ipu(tables(both_paths=False), IpuConfig(keep_ahead=120))
    trk = ipu.start(A)
    trk.lookahead_instructions = 115
    ipu_step(ipu)
    assert trk.lookahead_instructions == 127
    assert ipu_step(ipu) == []


def test_on_track_keeps_state_and_third_successor_redirects():
    ipu = Ipu(tables(both_paths=False))
    trk = ipu.start(A)
    ipu.step_track(trk)
    ipu.step_track(trk)
    queued = len(ipu.ubaq)
    assert sync_with_processor(ipu, A) is SyncResult.ON_TRACK
    assert ipu.tracks == [trk] and len(ipu.ubaq) == queued
    assert trk.lookahead_instructions == trk.ufq[0].count
    assert sync_with_processor(ipu, FragmentId(Side.CALL, 0x9990)) is SyncResult.REDIRECT
    assert ipu.c.redirects == 1
    assert len(ipu.ubaq) == 0


def test_fork_resolution_ages_paths():
    t = tables(both_paths=True)
    ipu = Ipu(t)
    ipu.step_track(ipu.start(A))
    ipu.sync(A)
    ipu.sync(C)
    assert len(ipu.tracks) == 1
    assert t.dtt_entry(A).aging == [1, 3]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["step", "head", "A", "B", "C", "ret"]), max_size=40))
def test_lookahead_equals_queued_counts(ops):
    ipu = Ipu(tables(both_paths=True))
    ipu.start(A)
    ids = {"A": A, "B": B, "C": C, "ret": FragmentId(Side.RET, S.B)}
    for op in ops:
        if op == "step":
            ipu_step(ipu)
        elif op == "head":
            heads = [t.ufq[0].frag for t in ipu.tracks if t.ufq]
            if heads:
                ipu.sync(heads[0])
        else:
            ipu.sync(ids[op])
        assert 1 <= len(ipu.tracks) <= 2
        for t in ipu.tracks:
            assert t.lookahead_instructions == sum(e.count for e in t.ufq)
            assert t.lookahead_instructions >= 0


def presender(**kw):
    hier = Hierarchy(HierarchyConfig(**kw), bypass_l2=True)
    return Presender(IpuConfig(), hier), hier


def test_present_block_is_skipped_without_traffic():
    p, hier = presender()
    assert p.dispatch(40, 0) is Decision.SEND
    assert hier.stats.l3_accesses == 1
    assert p.dispatch(40, 5) is Decision.SKIP_PRESENT
    assert presend_decide(p, 40) is Decision.SKIP_PRESENT
    assert hier.stats.l3_accesses == 1
    assert hier.l1i.get(40).via_presend and not hier.l1i.get(40).accessed


def test_send_arrives_after_placement_latency():
    p, hier = presender()
    p.dispatch(41, 100)
    assert hier.l1i.get(41).ready == 100 + 20 + 200
    hier.l1i.invalidate(41)
    p.dispatch(41, 400)
    assert hier.l1i.get(41).ready == 400 + 20


def test_unused_evictions_cool_a_block():
    p, hier = presender(l1i_blocks=1, l1i_ways=1)
    for i in range(6):
        hier.l1i_install(7, 0, via_presend=False)
        hier.l1i_install(1000 + i, 0, via_presend=False)
    assert p.btt.temperature(7) == 1
    assert presend_decide(p, 7) is Decision.SKIP_COLD


def test_btt_used_eviction_keeps_temperature():
    p, _ = presender()
    p._on_evict(Eviction(9, True, True))
    assert p.btt.temperature(9) == 7


def test_btb_and_itlb_moves():
    p, hier = presender()
    block = 0x100
    for slot in (1, 2, 3):
        hier.l2btb.fill(block * 64 + 4 * slot, payload=0x9000)
    hier.l2btb.fill((block + 1) * 64, payload=0x9000)
    assert p.move_btb(block, 0) == 3
    assert p.move_btb(block, 1) == 0
    page = block * 64 >> 12
    hier.l2tlb.fill(page)
    tlb = (((page, hier.l2tlb_pointer(page)),),)
    assert p.move_itlb(tlb, 0) == 1
    assert p.move_itlb(tlb, 1) == 0


def test_stale_tlb_pointer_leaves_demand_miss():
    p, hier = presender()
    hier.l2tlb.fill(5)
    tlb = (((5, hier.l2tlb_pointer(5)),),)
    hier.l2tlb.invalidate(5)
    assert p.move_itlb(tlb, 0) == 0
    assert p.c.itlb_stale == 1
    assert hier.itlb_lookup(5, 10) > 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["send", "demand"]), st.integers(0, 47)), max_size=200))
def test_no_resend_while_resident_and_exact_pit(script):
    p, hier = presender(l1i_blocks=16, l1i_ways=4)
    q = Presender(IpuConfig(presence="pit", pit_bits=64), Hierarchy(HierarchyConfig(l1i_blocks=16, l1i_ways=4),
                                                                      bypass_l2=True))
    for t, (op, block) in enumerate(script):
        if op == "send":
            resident = block in hier.l1i
            d = p.dispatch(block, t)
            assert q.dispatch(block, t) is d
            if resident:
                assert d is Decision.SKIP_PRESENT
        else:
            for h in (hier, q.hier):
                if h.l1i.touch(block) is None:
                    h.l1i_install(block, t, via_presend=False)
        for k in range(48):
            assert q.pit.test(k) == (k in q.hier.l1i)


def _sim(trace, **kw):
    sim = Simulator(SimConfig(mode=Mode.PRESEND, warmup_passes=1, event_log=True, **kw))
    sim.ipu.presender.decisions = []
    sim.ipu.log = []
    rep = sim.run(trace)
    marks = [e[0] for e in sim.events if e[1] == "new_pass"]
    return sim, rep, marks[-1]


def test_self_recursion_becomes_passive_loop():
    sim, rep, _ = _sim(S.self_recursion(depth=10))
    self_call = FragmentId(Side.CALL, S.pc(S.REC_BODY, 15))
    loops = [e for e in sim.ipu.log if e[1] == "loop"]
    assert rep.ipu_redirects == 0
    assert loops and all(e[3] == [self_call] for e in loops)


def test_oversized_loop_resends_each_lap():
    laps = 4
    sim, rep, start = _sim(S.oversized_loop(laps=laps))
    sends = Counter(b for t, b, d in sim.ipu.presender.decisions
                    if t >= start and d is Decision.SEND and b >= 0x10000)
    assert len(sends) == 48 * 16
    assert set(sends.values()) == {laps}
    assert rep.ipu_redirects == 0


def test_ipu_sees_only_the_map_and_presender():
    ipu = Ipu(tables(both_paths=False))
    names = set(vars(ipu))
    assert not names & {"predictor", "btb", "hier", "l1i", "hierarchy"}
