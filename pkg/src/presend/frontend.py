"""Decoupled front end: FDIP prefetch engine, demand fetch and abstract backend.

The simulation walks the trace one fetch segment at a time. A segment is a
run of consecutive instructions in one block that does not cross a fragment
boundary. For every segment the prefetch engine time, demand fetch time and
retire time are derived from the previous segments, so the model keeps the
ordering of a cycle loop (engine ahead of fetch, fetch ahead of retire)
without visiting idle cycles.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .hierarchy import Hierarchy, HierarchyConfig
from .ipu import Ipu, IpuConfig, IpuCounters, Presender, SyncResult
from .metrics import Counters, MetricsReport
from .predictors import IndirectTargetCache, ReturnAddressStack, make_predictor
from .progmap import (RETURN, ROOT, FragmentId, MapBuilder, MapTables, MapTablesConfig, Side,
                      indirect_key)
from .trace import Kind, Trace, log2_exact


class Mode(str, Enum):
    FDIP = "fdip"
    PRESEND = "presend"
    PRESEND_BTB_ONLY = "presend_btb_only"
    PRESEND_ITLB_ONLY = "presend_itlb_only"


class RedirectCause(Enum):
    DIRECTION_MISPREDICT = "direction"
    BTB_MISS = "btb_miss"
    WRONG_TARGET = "wrong_target"


@dataclass(frozen=True)
class RedirectEvent:
    cause: RedirectCause
    at_pc: int
    cycle: int


@dataclass
class FrontendConfig:
    fetch_width: int = 6
    fetch_queue_depth: int = 192
    ras_depth: int = 64
    predictor: str = "gshare"
    bimodal_bits: int = 2
    history_bits: int = 14
    table_bits: int = 14
    itc_entries: int = 4096
    redirect_penalty: int = 2
    retire_width: int = 5
    backend_window: int = 472
    pipeline_depth: int = 12

    def validate(self) -> None:
        for name in ("fetch_width", "fetch_queue_depth", "ras_depth", "retire_width", "backend_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.redirect_penalty < 0 or self.pipeline_depth < 0:
            raise ValueError("latencies must be non-negative")


class FetchTargetQueue:
    """Instruction-capacity FIFO between a producer and a consumer.

    Each entry records how many instructions it holds and when the consumer
    released it; :meth:`reserve` returns the earliest time a new entry fits.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.entries: deque = deque()
        self.occupancy = 0

    def reserve(self, n: int, now: float) -> float:
        q = self.entries
        while q and q[0][1] <= now:
            self.occupancy -= q.popleft()[0]
        while q and self.occupancy + n > self.capacity:
            size, t = q.popleft()
            self.occupancy -= size
            if t > now:
                now = t
        return now

    def push(self, n: int, release: float) -> None:
        self.entries.append((n, release))
        self.occupancy += n

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class SimConfig:
    mode: Mode = Mode.FDIP
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)
    tables: MapTablesConfig = field(default_factory=MapTablesConfig)
    ipu: IpuConfig = field(default_factory=IpuConfig)
    warmup_instructions: Optional[int] = None  # default: 10% of the measured trace
    warmup_passes: int = 0
    build_map: Optional[bool] = None  # default: only when presending
    page_size: int = 4096
    event_log: bool = False


class Simulator:
    def __init__(self, cfg: SimConfig, block_size: int = 64):
        self.cfg = cfg
        cfg.frontend.validate()
        self.mode = Mode(cfg.mode)
        self.presending = self.mode is not Mode.FDIP
        self.block_shift = log2_exact(block_size)
        self.page_block_shift = log2_exact(cfg.page_size) - self.block_shift
        fe = cfg.frontend
        self.hier = Hierarchy(cfg.hierarchy, bypass_l2=self.presending, block_shift=self.block_shift)
        self.predictor = make_predictor(fe.predictor, fe.bimodal_bits, fe.history_bits, fe.table_bits)
        self.ras = ReturnAddressStack(fe.ras_depth)
        self.itc = IndirectTargetCache(fe.itc_entries)
        self.counters = Counters()
        build = cfg.build_map if cfg.build_map is not None else self.presending
        self.tables = MapTables(cfg.tables) if build or self.presending else None
        self.builder = None
        if self.tables is not None:
            self.builder = MapBuilder(self.tables, block_size, tlb_pointer=self.hier.l2tlb_pointer,
                                      page_size=cfg.page_size)
        self.ipu = None
        self.ipu_counters = IpuCounters()
        if self.presending:
            m = self.mode
            pres = Presender(cfg.ipu, self.hier,
                             blocks=m is Mode.PRESEND,
                             btb=m in (Mode.PRESEND, Mode.PRESEND_BTB_ONLY),
                             itlb=m in (Mode.PRESEND, Mode.PRESEND_ITLB_ONLY),
                             counters=self.ipu_counters)
            self.ipu = Ipu(self.tables, cfg.ipu, pres, block_shift=self.block_shift)
            self.ipu.start(ROOT)
        self.events: Optional[list] = [] if cfg.event_log else None
        self.redirect_log: list = []
        self._t = {"e": -1, "release": 0, "d": 0, "r": 0.0}
        self._prev_block = None
        self._prev_page = None
        self.ftq = FetchTargetQueue(fe.fetch_queue_depth)
        self.window = FetchTargetQueue(fe.backend_window)

    # -- counters ------------------------------------------------------------

    def snapshot(self) -> Counters:
        c = self.counters
        h = self.hier.stats
        ic = self.ipu_counters
        c.l2_accesses = h.l2_accesses
        c.l3_accesses = h.l3_accesses
        c.memory_accesses = h.memory_accesses
        c.useless_presends = h.useless_presends
        c.presend_sends = ic.sends
        c.presend_skip_cold = ic.skip_cold
        c.presend_skip_present = ic.skip_present
        c.btb_moves = ic.btb_moves
        c.itlb_moves = ic.itlb_moves
        c.ipu_redirects = ic.redirects
        c.ft_accesses = ic.ft_direct + ic.ft_assoc
        c.ort2_lookups = ic.ort_lookups[2]
        c.ort4_lookups = ic.ort_lookups[4]
        c.ort16_lookups = ic.ort_lookups[16]
        c.dtt_lookups = ic.dtt_lookups
        if self.builder is not None:
            c.fragments = self.builder.fragments
            c.ft_writes = self.builder.writes
        c.cycles = int(np.ceil(self._t["r"]))
        return c.copy()

    # -- main loop -------------------------------------------------------------

    def run(self, trace: Trace) -> MetricsReport:
        n = len(trace)
        cfg = self.cfg
        passes = 1 + max(0, cfg.warmup_passes)
        if cfg.warmup_instructions is not None:
            warm = cfg.warmup_instructions
        else:
            warm = 0 if cfg.warmup_passes else n // 10
        if n and warm >= n and not cfg.warmup_passes:
            raise ValueError("warm-up must be shorter than the trace")
        if n == 0:
            return MetricsReport.from_counters(self.mode.value, Counters())
        segs = _segments(trace, self.block_shift)
        base = None
        for p in range(passes):
            measuring = p == passes - 1
            if p > 0:
                self._new_pass()
            if measuring and warm == 0:
                base = self.snapshot()
            self._run_pass(trace, segs, warm if measuring else None)
            if measuring and base is None:
                base = self._warm_snapshot
        final = self.snapshot()
        return MetricsReport.from_counters(self.mode.value, final.minus(base), self._extra())

    def _extra(self) -> dict:
        ic = self.ipu_counters
        out = {"mshr_stall_cycles": self.hier.mshr.stall_cycles}
        if self.presending:
            out.update(ipu_forks=ic.forks, ipu_loops=ic.loops, ipu_map_misses=ic.map_misses,
                       ft_direct=ic.ft_direct, ft_assoc=ic.ft_assoc)
        return out

    def _new_pass(self) -> None:
        # the trace restarts at its first instruction with an empty call stack
        if self.events is not None:
            self.events.append((self._t["d"], "new_pass", None))
        b = self.builder
        if b is not None:
            b.current, b.blocks, b.count, b.dirty, b.stack = ROOT, {}, 0, False, []
        if self.ipu is not None:
            self.ipu.advance(self._t["d"])
            self.ipu.sync(ROOT, self._t["d"], ())
        self._prev_block = None

    def _run_pass(self, trace: Trace, segs, warm_at: Optional[int]) -> None:
        fe = self.cfg.frontend
        hier = self.hier
        l1i = hier.l1i
        frames = l1i.frames
        perfect_l1i = hier.cfg.l1i_perfect
        c = self.counters
        pcs, kinds, tgts, taken = segs["pc"], segs["kind"], segs["target"], segs["taken"]
        seg_start, seg_block, seg_fstart = segs["start"], segs["block"], segs["fstart"]
        ctrl = segs["ctrl"]
        n_total = len(pcs)
        width = fe.fetch_width
        rwidth = float(fe.retire_width)
        depth = fe.pipeline_depth
        penalty = fe.redirect_penalty
        pshift = self.page_block_shift
        predictor = self.predictor
        oracle = getattr(predictor, "is_oracle", False)
        predict, train = predictor.predict, predictor.update
        ras, itc = self.ras, self.itc
        btb_hit, btb_insert = hier.btb_hit, hier.btb_insert
        keep_l2 = self.presending
        ftq, window = self.ftq, self.window
        ipu = self.ipu
        builder = self.builder
        events = self.events
        t = self._t
        e_prev, release, d_next, r_clock = t["e"], t["release"], t["d"], t["r"]
        prev_block, prev_page = self._prev_block, self._prev_page
        pending = None  # (next fragment id, successor target) set by a call/return
        ci = 0
        n_ctrl = len(ctrl)
        nseg = len(seg_start)
        self._warm_snapshot = None
        for j in range(nseg):
            s = seg_start[j]
            end = seg_start[j + 1] if j + 1 < nseg else n_total
            nn = end - s
            bk = seg_block[j]
            if warm_at is not None and self._warm_snapshot is None and s >= warm_at:
                t.update(e=e_prev, release=release, d=d_next, r=r_clock)
                self._warm_snapshot = self.snapshot()

            # prefetch engine
            e = e_prev + 1
            if release > e:
                e = release
            e = ftq.reserve(nn, e)
            if ipu is not None:
                ipu.advance(e)
            if not perfect_l1i and bk not in frames:
                hier.request_fill(bk, e)
                c.prefetches += 1
            redirect_at = -1
            while ci < n_ctrl and ctrl[ci] < end:
                i = ctrl[ci]
                ci += 1
                k = kinds[i]
                pc = pcs[i]
                cause = None
                if k == 1:
                    actual = taken[i]
                    hit = btb_hit(pc, e)
                    if oracle:
                        pred = actual
                    else:
                        pred = predict(pc) if hit else False
                        train(pc, actual)
                    if pred != actual:
                        cause = RedirectCause.BTB_MISS if (actual and not hit) else RedirectCause.DIRECTION_MISPREDICT
                    if actual and not hit:
                        btb_insert(pc, tgts[i], e, keep_l2)
                else:
                    tgt = tgts[i]
                    hit = btb_hit(pc, e)
                    if not hit:
                        cause = RedirectCause.BTB_MISS
                    elif k == 4 and not oracle:
                        if itc.predict(pc) != tgt:
                            cause = RedirectCause.WRONG_TARGET
                    elif k == 5 and not oracle:
                        if ras.pop() != tgt:
                            cause = RedirectCause.WRONG_TARGET
                    if k == 5 and (not hit or oracle):
                        ras.pop()
                    if k == 4:
                        itc.update(pc, tgt)
                    if k == 3 or k == 4:
                        ras.push(pc + 4)
                    if not hit:
                        btb_insert(pc, tgt, e, keep_l2)
                if cause is not None:
                    redirect_at = i
                    c.fdip_redirects += 1
                    if cause is RedirectCause.DIRECTION_MISPREDICT:
                        c.direction_redirects += 1
                    elif cause is RedirectCause.BTB_MISS:
                        c.btb_miss_redirects += 1
                    else:
                        c.wrong_target_redirects += 1
                    if events is not None:
                        events.append((e, "redirect:" + cause.value, pc))

            # demand fetch
            d = d_next
            d = window.reserve(nn, d)
            if pending is not None:
                nxt, target = pending
                if ipu is not None:
                    ipu.advance(d)
                    res = ipu.sync(nxt, d, _restart_stack(builder, nxt))
                    if res is SyncResult.REDIRECT:
                        builder.mark_dirty()
                        if events is not None:
                            events.append((d, "ipu_redirect", pcs[s]))
                builder.transition(nxt, target)
                pending = None
            elif ipu is not None:
                ipu.advance(d)
            wait = 0
            if bk != prev_block:
                c.l1i_accesses += 1
                if not perfect_l1i:
                    frame = frames.get(bk)
                    if frame is None:
                        done = hier.request_fill(bk, d)
                        wait = done - d
                        if ipu is not None:
                            ipu.presender.btt.heat(bk)
                        l1i.touch(bk)
                    elif frame.ready > d:
                        wait = frame.ready - d
                        c.late_arrivals += 1
                        l1i.touch(bk)
                    else:
                        l1i.access(bk, d)
                    if wait > 0:
                        c.l1i_misses += 1
                        c.cwki_cycles += wait
                        if builder is not None:
                            builder.mark_dirty()
                        if events is not None:
                            events.append((d, "fetch_wait", bk, wait, s))
                prev_block = bk
            page = bk >> pshift
            stall = 0
            if page != prev_page:
                if hier.itlb.get(page) is None:
                    c.itlb_misses += 1
                stall = hier.itlb_lookup(page, d + wait)
                c.itlb_stall_cycles += stall
                prev_page = page
            fetch_cycles = -(-nn // width)
            start = d + wait + stall
            d_end = start + fetch_cycles
            ftq.push(nn, d_end)
            if redirect_at >= 0:
                release = start + (-(-(redirect_at - s + 1) // width)) + penalty
                d_next = max(d_end, release)
                prev_block = None  # the refetch after a redirect re-reads the block
            else:
                d_next = d_end
            ready = d_end + depth
            if r_clock < ready:
                r_clock = ready
            r_clock += nn / rwidth
            window.push(nn, r_clock)
            e_prev = e
            c.instructions += nn

            if builder is not None:
                builder.blocks.setdefault(bk, None)
                builder.count += nn
                last = end - 1
                k = kinds[last]
                if k >= 3:
                    if k == 5:
                        pending = (builder.return_fragment(tgts[last]), RETURN)
                    else:
                        key = pcs[last] if k == 3 else indirect_key(pcs[last], tgts[last])
                        pending = (FragmentId(Side.CALL, key), key)
        if pending is not None and builder is not None:
            builder.transition(*pending)
        t.update(e=e_prev, release=release, d=d_next, r=r_clock)
        self._prev_block, self._prev_page = prev_block, prev_page


def _restart_stack(builder: MapBuilder, nxt: FragmentId):
    def make():
        keys = list(builder.stack)
        if nxt.kind == Side.CALL:
            keys.append(nxt.key)
        return [(FragmentId(Side.RET, k), None) for k in keys]
    return make


def _segments(trace: Trace, block_shift: int) -> dict:
    n = len(trace)
    blk = (trace.pc >> np.uint64(block_shift)).astype(np.int64)
    kind = trace.kind
    term = kind >= Kind.DIRECT_CALL
    starts = np.zeros(n, dtype=bool)
    if n:
        starts[0] = True
        starts[1:] = (blk[1:] != blk[:-1]) | term[:-1]
    seg_start = np.flatnonzero(starts)
    fstart = np.zeros(len(seg_start), dtype=bool)
    if n:
        prev = seg_start[1:] - 1
        fstart[1:] = term[prev]
    return {
        "pc": trace.pc.tolist(),
        "kind": kind.tolist(),
        "target": trace.target.tolist(),
        "taken": trace.taken.tolist(),
        "start": seg_start.tolist(),
        "block": blk[seg_start].tolist(),
        "fstart": fstart.tolist(),
        "ctrl": np.flatnonzero(kind != Kind.PLAIN).tolist(),
    }


def simulate(trace: Trace, cfg: Optional[SimConfig] = None) -> MetricsReport:
    cfg = cfg or SimConfig()
    return Simulator(cfg, trace.block_size).run(trace)
