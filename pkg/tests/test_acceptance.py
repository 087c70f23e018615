"""End-to-end acceptance checks; each one also records a summary line."""

import bisect
import random
import time
from collections import Counter

import pytest

from conftest import record
from presend import config as C
from presend import harness as H
from presend import scenarios as S
from presend.cache import CacheGeometry, CacheModel
from presend.frontend import Mode, SimConfig, Simulator
from presend.ipu import Decision, Ipu, IpuConfig, SyncResult
from presend.progmap import RETURN, FragmentId, MapBuilder, Region, Side
from presend.trace import Kind

PRESETS = list(C.PRESETS)
KEEP_AHEAD = (40, 80, 120, 160)


def _fig4_tables(both_paths=True):
    b = MapBuilder()
    for rec in S.fig4_records(both_paths):
        b.observe_retired(rec)
    return b.tables


# frozen table dump for the worked three-fragment example, both paths replayed
FIG4_DUMP = """\
FT 0x0 call region 0x64 0 count 1 target 0x1900 mt 0 of 0 lossy 0
FT 0x2bc call region 0xe 1 count 11 target RETURN mt 0 of 0 lossy 0
FT 0x2bc ret region 0x1a 1 count 7 target 0x6e0 mt 0 of 0 lossy 0
FT 0x6e0 call region 0x14 1 count 4 target RETURN mt 0 of 0 lossy 0
FT 0x6e0 ret region 0x1b 0 count 3 target RETURN mt 0 of 0 lossy 0
FT 0x1900 call region 0x1 1 count 14 target 0x2bc mt 1 of 1 lossy 0
DTT 0x1900 call target 0x6e0 aging 2 2
ORT2 0x1900 call 0xa:0 0x1b:0
FT 0x1900 ret region 0x64 0 count 3 target 0x1900 mt 0 of 0 lossy 0"""

A, B, CC = FragmentId(Side.CALL, S.A), FragmentId(Side.CALL, S.B), FragmentId(Side.CALL, S.C)


def test_c1_golden_construction():
    t0 = time.perf_counter()
    one = _fig4_tables(both_paths=False)
    two = _fig4_tables(both_paths=True)
    elapsed = time.perf_counter() - t0
    checks = {
        "first-path ORT-2": one.ort_regions(A) == (2, [Region(10, 0)]),
        "first-path no DTT": one.dtt_entry(A) is None,
        "A call region": two.side(A).region == Region(1, 1),
        "ORT-2 after second path": two.ort_regions(A) == (2, [Region(10, 0), Region(27, 0)]),
        "B call": (two.side(B).region, two.side(B).target) == (Region(14, 1), RETURN),
        "B ret": (two.side(FragmentId(Side.RET, S.B)).region,
                  two.side(FragmentId(Side.RET, S.B)).target) == (Region(26, 1), S.C),
        "DTT A": (two.dtt_entry(A).second_target, list(two.dtt_entry(A).aging)) == (S.C, [2, 2]),
        "full dump": two.dump().strip() == FIG4_DUMP,
        "under 1 s": elapsed < 1.0,
    }
    failed = [k for k, v in checks.items() if not v]
    ok = record(1, not failed, f"tables exact in {elapsed * 1000:.1f} ms" if not failed
                else f"mismatch: {', '.join(failed)}")
    assert ok, failed


def test_c2_control_independence(workloads):
    ps = workloads.run("single-successor", sim__mode="presend")
    fdip = workloads.run("single-successor", sim__hierarchy__btb_entries=512)
    ok = record(2, ps.ipu_redirects == 0 and fdip.rpki > 1,
                f"single-successor PS redirects {ps.ipu_redirects}, FDIP-512 RPKI {fdip.rpki:.1f}")
    assert ps.ipu_redirects == 0 and fdip.rpki > 1

    fan_ps = workloads.run("fanout", sim__mode="presend")
    fan_fdip = workloads.run("fanout")
    ok = record(2, fan_ps.rpki < 0.1 * fan_fdip.rpki,
                f"fanout RPKI PS {fan_ps.rpki:.2f} vs FDIP {fan_fdip.rpki:.1f}")
    assert ok


def test_c2_runtime_5m():
    cfg = C.build({"trace.preset": "single-successor", "trace.instructions": "5000000",
                   "sim.mode": "presend"})
    trace = H.load_trace(cfg)
    t0 = time.perf_counter()
    rep = H.run(cfg, trace)
    dt = time.perf_counter() - t0
    ok = record(2, dt < 30.0 and rep.ipu_redirects == 0,
                f"5M-instruction PS run {dt:.1f} s, redirects {rep.ipu_redirects}")
    assert ok


@pytest.mark.parametrize("preset", PRESETS)
def test_c3_keep_ahead(workloads, preset):
    t0 = time.perf_counter()
    cwki = [workloads.run(preset, sim__mode="presend", sim__ipu__keep_ahead=k).cwki for k in KEEP_AHEAD]
    dt = time.perf_counter() - t0
    mono = all(a >= b for a, b in zip(cwki, cwki[1:]))
    text = "/".join(f"{c:.1f}" for c in cwki)
    parts = [f"{preset} CWKI {text}" + ("" if mono else " (not monotone)"),]
    ok = mono and dt < 120.0
    if preset == "cold-footprint":
        fdip = workloads.run(preset).cwki
        ratio = cwki[2] / fdip if fdip else float("inf")
        ok = ok and ratio < 0.10
        parts.append(f"PS-120/FDIP {ratio:.3f}")
    parts.append(f"{dt:.0f} s")
    record(3, ok, ", ".join(parts))
    assert mono, f"keep-ahead CWKI not monotone on {preset}: {text}"
    assert dt < 120.0
    assert ok


def test_c5_lru_oracle():
    # reference: recency recovered from the full access history of each step
    seeds, steps, sets, ways = 100, 10_000, 4, 4
    mismatches = 0
    for seed in range(seeds):
        rng = random.Random(seed)
        model = CacheModel(CacheGeometry(sets, ways))
        history: list = []
        resident: set = set()
        keys = [rng.randrange(48) for _ in range(steps)]
        for step, key in enumerate(keys):
            want_hit = key in resident
            want_victim = None
            if not want_hit:
                peers = [k for k in resident if k % sets == key % sets]
                if len(peers) >= ways:
                    last = {}
                    for i in range(len(history) - 1, -1, -1):
                        k = history[i]
                        if k in peers and k not in last:
                            last[k] = i
                            if len(last) == len(peers):
                                break
                    want_victim = min(peers, key=last.__getitem__)
                    resident.discard(want_victim)
                resident.add(key)
            history.append(key)
            hit = model.access(key, step) is not None
            victim = None
            if not hit:
                ev = model.fill(key)
                victim = ev.key if ev else None
            if hit != want_hit or victim != want_victim:
                mismatches += 1
    ok = record(5, mismatches == 0,
                f"{seeds} seeds x {steps} steps, {mismatches} per-step mismatches")
    assert ok


def _decisions(trace, **ipu):
    sim_cfg = C.build({"sim.mode": "presend", "sim.warmup_passes": "1",
                       **{f"sim.ipu.{k}": str(v) for k, v in ipu.items()}}).sim
    sim = Simulator(sim_cfg, trace.block_size)
    sim.ipu.presender.decisions = []
    rep = sim.run(trace)
    return sim.ipu.presender.decisions, rep


def test_c6_pit_fidelity(workloads):
    trace = workloads.trace("standard")
    probe, probe_rep = _decisions(trace, presence="probe")
    # the synthetic footprint spans well under 2^17 block numbers
    blocks = (trace.pc >> 6)
    span = int(blocks.max()) - int(blocks.min())
    assert span < 1 << 17
    exact, _ = _decisions(trace, presence="pit", pit_bits=1 << 18)
    same = exact == probe
    record(6, same, f"no-aliasing PIT {'identical' if same else 'differs'} over {len(probe)} decisions")
    pit_rep = workloads.run("standard", sim__mode="presend", sim__ipu__presence="pit")
    ps_rep = workloads.run("standard", sim__mode="presend")
    assert ps_rep.presend_sends == probe_rep.presend_sends
    diff = abs(pit_rep.presend_sends - ps_rep.presend_sends) / ps_rep.presend_sends
    record(6, diff < 0.05, f"8192-bit PIT L3 presend accesses {pit_rep.presend_sends} "
                          f"vs probe {ps_rep.presend_sends} ({100 * diff:.2f}%)")
    assert same
    assert diff < 0.05


def test_c7_btb_presend(workloads):
    preset = "high-call-fanout"
    ps = workloads.run(preset, sim__mode="presend", sim__hierarchy__btb_entries=512)
    f512 = workloads.run(preset, sim__hierarchy__btb_entries=512)
    f8k = workloads.run(preset)
    checks = (ps.btb_miss_redirects < f512.btb_miss_redirects, ps.cwki < f512.cwki,
              ps.pseudo_ipc >= 0.98 * f8k.pseudo_ipc)
    ok = record(7, all(checks),
                f"BTB redirects {ps.btb_miss_redirects} vs {f512.btb_miss_redirects}, "
                f"CWKI {ps.cwki:.1f} vs {f512.cwki:.1f}, IPC {ps.pseudo_ipc:.3f} vs FDIP-8K {f8k.pseudo_ipc:.3f}")
    assert ok


def _forked_ipu(tables):
    ipu = Ipu(tables, IpuConfig())
    trk = ipu.start(A)
    ipu.step_track(trk)
    return ipu


def test_c8_dual_track():
    tables = _fig4_tables()
    dtt = tables.dtt_entry(A)
    ipu = _forked_ipu(tables)
    forked = len(ipu.tracks) == 2
    for t in list(ipu.tracks):
        ipu.step_track(t)
    assert ipu.sync(A) is SyncResult.ON_TRACK
    assert ipu.sync(CC) is SyncResult.ON_TRACK
    one = len(ipu.tracks) == 1 and ipu.tracks[0].fork is None
    moved = list(dtt.aging) == [1, 3]

    seen = [tuple(dtt.aging)]
    for _ in range(3):
        ipu = _forked_ipu(tables)
        if len(ipu.tracks) == 2:
            ipu.sync(A)
            ipu.sync(CC)
        seen.append(tuple(dtt.aging))
    saturated = seen == [(1, 3), (0, 3), (0, 3), (0, 3)]
    ipu = _forked_ipu(tables)
    suppressed = len(ipu.tracks) == 1 and ipu.tracks[0].next_frag == CC
    ok = record(8, forked and one and moved and saturated and suppressed,
                f"fork {forked}, single survivor {one}, aging {seen}, aged-out path suppresses fork {suppressed}")
    assert ok


@pytest.mark.parametrize("preset", PRESETS)
def test_c9_traffic(workloads, preset):
    ps = workloads.run(preset, sim__mode="presend")
    fdip = workloads.run(preset)
    ok = ps.l3_accesses_per_ki >= fdip.l3_accesses_per_ki
    parts = [f"{preset} L3/KI {ps.l3_accesses_per_ki:.1f} vs {fdip.l3_accesses_per_ki:.1f}"]
    if preset == "single-successor":
        ok = ok and ps.useless_send_fraction < 0.25
        parts.append(f"useless {ps.useless_send_fraction:.3f}")
    record(9, ok, " ".join(parts))
    assert ok


def _exit_windows(trace):
    """(start, end) instruction spans from each loop exit to the next call or return."""
    k, pc = trace.kind.tolist(), trace.pc.tolist()
    tg, tk = trace.target.tolist(), trace.taken.tolist()
    out = []
    for i in range(1, len(k)):
        # the back-edge branch sits right after the callee returns to it
        if k[i] == Kind.COND_BRANCH and not tk[i] and k[i - 1] == Kind.RETURN and tg[i - 1] == pc[i]:
            j = i + 1
            while j < len(k) and k[j] < Kind.DIRECT_CALL:
                j += 1
            out.append((i, j))
    return out


def _measured(events):
    marks = [i for i, e in enumerate(events) if e[1] == "new_pass"]
    return events[marks[-1]:] if marks else events


def _exit_waits(events, windows):
    starts = [w[0] for w in windows]
    bad = []
    for e in _measured(events):
        if e[1] != "fetch_wait":
            continue
        s = e[4]
        # segments are at most one block long, so look one block before the exit
        p = bisect.bisect_right(starts, s + 15) - 1
        if p >= 0 and windows[p][0] - 15 <= s <= windows[p][1]:
            bad.append(e)
    return bad


def _loop_sim(trace, passes=1):
    cfg = SimConfig(mode=Mode.PRESEND, warmup_passes=passes, event_log=True)
    sim = Simulator(cfg, trace.block_size)
    sim.ipu.presender.decisions = []
    sim.run(trace)
    return sim


def test_c10_loop_once_and_warm_exit(workloads):
    episodes = 4
    trace = S.call_loop(iterations=100, episodes=episodes)
    sim = _loop_sim(trace)
    marks = [e[0] for e in sim.events if e[1] == "new_pass"]
    warm = [x for x in sim.ipu.presender.decisions if x[0] >= marks[-1]]
    loop_blocks = (S.LOOP_HEAD, S.LOOP_LEAF)
    sends = Counter(b for _, b, d in warm if d is Decision.SEND and b in loop_blocks)
    looked = Counter(b for _, b, _ in warm if b in loop_blocks)
    # one lap is walked per episode before the loop track goes passive; the head
    # block sits in both fragments of the lap, and the pass boundary adds one lap
    once = (all(sends[b] == episodes for b in loop_blocks)
            and all(looked[b] <= 2 * (episodes + 1) for b in loop_blocks))
    waits = _exit_waits(sim.events, _exit_windows(trace))
    record(10, once and not waits,
           f"100-lap loop x{episodes}: loop-block sends {dict(sends)}, queue visits {dict(looked)}, "
           f"exit waits {len(waits)}")
    assert once
    assert not waits

    preset_trace = workloads.trace("loop")
    psim = _loop_sim(preset_trace)
    windows = _exit_windows(preset_trace)
    pwaits = _exit_waits(psim.events, windows)
    ok = record(10, bool(windows) and psim.ipu_counters.loops > 0 and not pwaits,
                f"loop preset: {len(windows)} exits, {psim.ipu_counters.loops} loops detected, "
                f"exit waits {len(pwaits)}")
    assert ok


def test_c4_metric_algebra_and_determinism(workloads):
    # runs last in this module, so it sees every cached report
    reports = list(workloads._runs.values())
    if not reports:
        reports = [workloads.run("standard"), workloads.run("standard", sim__mode="presend")]
    bad = []
    for r in reports:
        try:
            r.check_algebra()
            n, a, m = r.retired_instructions, r.l1i_accesses, r.l1i_misses
            assert round(r.mpka * a) == round(r.mpki * n) == 1000 * m
        except AssertionError as exc:
            bad.append(f"{r.extra.get('name') or r.mode}: {exc}")
    cfg = workloads.config("standard", sim__mode="presend")
    first = H.run(cfg).to_json()
    second = H.run(workloads.config("standard", sim__mode="presend")).to_json()
    same = first == second
    ok = record(4, not bad and same and len(reports) > 0,
                f"{len(reports)} runs checked, {len(bad)} violations, repeat run "
                f"{'byte-identical' if same else 'differs'}")
    assert not bad, bad
    assert same
    assert ok
