import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from presend import scenarios as S
from presend.progmap import (
    RETURN, DttEntry, FragmentId, MapBuilder, MapTables, MapTablesConfig, Region, Side,
    StaleHandle, age_paths, coalesce,
)
from presend.trace import Kind

A = FragmentId(Side.CALL, S.A)
B = FragmentId(Side.CALL, S.B)
B_RET = FragmentId(Side.RET, S.B)


def build_until(pred):
    b = MapBuilder()
    for rec in S.fig4_records():
        b.observe_retired(rec)
        if pred(rec):
            break
    return b.tables


def test_after_first_inner_call():
    t = build_until(lambda r: r.pc == S.B and r.kind == Kind.DIRECT_CALL)
    s = t.side(A)
    assert (s.region, s.of, s.count, s.target) == (Region(1, 1), True, 12, S.B)
    assert t.ort_regions(A) == (2, [Region(10, 0)])


def test_after_return_and_second_call():
    t = build_until(lambda r: r.kind == Kind.RETURN)
    assert (t.side(B).region, t.side(B).count, t.side(B).target) == (Region(14, 1), 11, RETURN)
    t = build_until(lambda r: r.pc == S.C)
    s = t.side(B_RET)
    assert (s.region, s.count, s.target) == (Region(26, 1), 7, S.C)


def test_lookup_after_both_paths():
    b = MapBuilder()
    for rec in S.fig4_records():
        b.observe_retired(rec)
    info = b.tables.ft_lookup(A)
    assert info.regions == [Region(1, 1), Region(10, 0), Region(27, 0)]
    assert info.targets == [S.B, S.C]
    assert info.aging == (2, 2)
    b.tables.check_consistency()


def test_never_seen_is_absent():
    assert MapTables().ft_lookup(FragmentId(Side.CALL, 0x1234)) is None


def _populated(n, cfg=None):
    t = MapTables(cfg)
    frags = [FragmentId(Side.CALL, 0x1000 + 4 * i) for i in range(n)]
    for i, f in enumerate(frags):
        t.write_side(f, Region(10 * i, 1), [Region(10 * i + 5, 0)], 8, RETURN)
        t.set_dtt(f, 0x9000 + i)
    return t, frags


def test_eviction_takes_satellites_along():
    t, frags = _populated(40, MapTablesConfig(ft_entries=8, ft_ways=8, dtt_entries=64, ort2_entries=64))
    gone = [f for f in frags if t.ft_lookup(f) is None]
    assert gone
    for f in gone:
        assert t.dtt_entry(f) is None
        assert t.ort_regions(f) == (0, [])
    t.check_consistency()


def test_handle_matches_associative_lookup_and_goes_stale():
    t, frags = _populated(4, MapTablesConfig(ft_entries=4, ft_ways=4))
    h = t.ft_lookup(frags[0]).handle
    for f in frags[1:]:
        t.ft_lookup(f)
    assert t.ft_lookup_direct(frags[0], h) == t.ft_lookup(frags[0])
    t.write_side(FragmentId(Side.CALL, 0x7777), Region(1, 0), [], 3, RETURN)
    victim = next(f for f in frags if t.ft_lookup(f) is None)
    with pytest.raises(StaleHandle):
        t.ft_lookup_direct(victim, (victim.key, 1 + frags.index(victim)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 63), min_size=1, max_size=200), st.integers(0, 1000))
def test_fresh_handles_agree(keys, seed):
    t = MapTables(MapTablesConfig(ft_entries=16, ft_ways=4, seed=seed))
    for k in keys:
        t.write_side(FragmentId(Side.CALL, k), Region(k, 0), [], 1, RETURN)
    for k in set(keys):
        f = FragmentId(Side.CALL, k)
        info = t.ft_lookup(f)
        if info is not None:
            assert t.ft_lookup_direct(f, info.handle) == info


def test_aging_arithmetic():
    d = DttEntry(0x40)
    assert age_paths(d, 0) == (3, 1)
    d = DttEntry(0x40, [3, 0])
    assert d.inactive == (False, True)


def test_alternating_paths_never_age_out():
    d = DttEntry(0x40)
    seen = set()
    for i in range(100):
        seen.update(age_paths(d, i % 2))
    assert seen <= {1, 2, 3}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), max_size=50), st.tuples(st.integers(0, 3), st.integers(0, 3)))
def test_aging_saturates(paths, start):
    d = DttEntry(0x40, list(start))
    for p in paths:
        before = list(d.aging)
        after = age_paths(d, p)
        assert after[p] == min(3, before[p] + 1)
        assert after[1 - p] == max(0, before[1 - p] - 1)
        assert all(0 <= a <= 3 for a in after)


def test_third_successor_replaces_weaker_path():
    b = MapBuilder()
    t = b.tables
    t.write_side(A, Region(1, 0), [], 4, S.B)
    t.set_dtt(A, S.C, (3, 1))
    b.finalize(A, 0x5555, {1: None}, 4, False)
    assert t.side(A).target == S.B
    assert t.dtt_entry(A).second_target == 0x5555
    assert t.dtt_entry(A).aging == [2, 2]


def test_dump_restore_round_trip():
    b = MapBuilder()
    for rec in S.fig4_records():
        b.observe_retired(rec)
    text = b.tables.dump()
    assert MapTables.restore(text).dump() == text
    with pytest.raises(ValueError, match="line 1"):
        MapTables.restore("XYZ 0x1 call\n")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=30, unique=True))
def test_coalesce_covers_every_block_once(blocks):
    primary, overflow = coalesce(blocks)
    covered = [b for r in [primary] + overflow for b in r.blocks]
    assert sorted(covered) == sorted(blocks)
    assert primary.addr == blocks[0]


def test_random_builds_stay_consistent():
    rng = random.Random(0)
    b = MapBuilder(MapTables(MapTablesConfig(ft_entries=32, ft_ways=4, dtt_entries=8, ort2_entries=8,
                                             ort4_entries=8, ort16_entries=8)))
    for _ in range(3000):
        frag = FragmentId(Side(rng.randrange(2)), rng.randrange(64))
        blocks = {rng.randrange(200): None for _ in range(rng.randrange(1, 6))}
        tgt = RETURN if rng.random() < 0.3 else rng.randrange(64)
        b.finalize(frag, tgt, blocks, rng.randrange(1, 40), rng.random() < 0.2)
    b.tables.check_consistency()
