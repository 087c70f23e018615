"""Instruction Presending Unit.

The IPU walks the program map ahead of the processor, one Fragment Table
access per cycle per track, and queues the blocks of upcoming fragments for
presending. The processor reports each fragment it enters; the IPU matches
those ids against its plan to resolve forks or detect divergence.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .progmap import RETURN, FragmentId, FragmentInfo, MapTables, Side, StaleHandle, age_paths

INF = float("inf")


class PresenceCheck(str, Enum):
    PROBE = "probe"
    PIT = "pit"


class Decision(Enum):
    SEND = "send"
    SKIP_COLD = "skip_cold"
    SKIP_PRESENT = "skip_present"


class SyncResult(Enum):
    ON_TRACK = "on_track"
    REDIRECT = "redirect"


@dataclass
class IpuConfig:
    keep_ahead: int = 120
    max_tracks: int = 2
    ipus_depth: int = 64
    ufq_entries: int = 64
    pffq_entries: int = 64
    ubaq_entries: int = 128
    uptaq_entries: int = 32
    drain_per_cycle: int = 2
    presence: str = "probe"
    btt_entries: int = 2048
    btt_bits: int = 3
    btt_threshold: int = 2
    pit_bits: int = 8192
    ipu_to_l1i_latency: int = 20
    loop_history: int = 16
    loops: bool = True


class BlockTemperatureTable:
    def __init__(self, entries: int = 2048, bits: int = 3):
        if entries & (entries - 1):
            raise ValueError("BTT size must be a power of two")
        self.mask = entries - 1
        self.hot = (1 << bits) - 1
        self.temps = [self.hot] * entries

    def temperature(self, block: int) -> int:
        return self.temps[block & self.mask]

    def heat(self, block: int) -> None:
        self.temps[block & self.mask] = self.hot

    def cool(self, block: int) -> None:
        i = block & self.mask
        if self.temps[i]:
            self.temps[i] -= 1


class PseudoInclusionTable:
    def __init__(self, bits: int = 8192):
        if bits & (bits - 1):
            raise ValueError("PIT size must be a power of two")
        self.mask = bits - 1
        self.bits = bytearray(bits)

    def set(self, block: int) -> None:
        self.bits[block & self.mask] = 1

    def clear(self, block: int) -> None:
        self.bits[block & self.mask] = 0

    def test(self, block: int) -> bool:
        return bool(self.bits[block & self.mask])


@dataclass
class UfqEntry:
    frag: FragmentId
    count: int
    info: Optional[FragmentInfo]
    ipus: tuple  # IPUS after this fragment was stepped
    path: int = 0  # which recorded successor the track followed


@dataclass(eq=False)
class IpuTrack:
    next_frag: object = None  # FragmentId, RETURN, or None while waiting
    next_handle: Optional[tuple] = None
    ipus: tuple = ()
    ufq: deque = field(default_factory=deque)
    lookahead_instructions: int = 0
    history: deque = field(default_factory=deque)
    fork: Optional[tuple] = None  # (fork fragment, path index) until resolved
    loop: Optional[frozenset] = None  # cycle ids while this track is a passive loop path
    stalled: bool = False

    def copy(self) -> "IpuTrack":
        return IpuTrack(self.next_frag, self.next_handle, self.ipus, deque(self.ufq),
                        self.lookahead_instructions, deque(self.history, self.history.maxlen),
                        self.fork, self.loop, self.stalled)


@dataclass
class IpuCounters:
    steps: int = 0
    ft_direct: int = 0
    ft_assoc: int = 0
    map_misses: int = 0
    redirects: int = 0
    forks: int = 0
    fork_resolutions: int = 0
    loops: int = 0
    ipus_overflows: int = 0
    ort_lookups: dict = field(default_factory=lambda: {2: 0, 4: 0, 16: 0})
    dtt_lookups: int = 0
    sends: int = 0
    skip_cold: int = 0
    skip_present: int = 0
    btb_moves: int = 0
    itlb_moves: int = 0
    itlb_stale: int = 0
    dequeued: int = 0


def _as_frag(target) -> object:
    return RETURN if target is RETURN else FragmentId(Side.CALL, target)


class Presender:
    """UBAQ back end: presence and temperature filtering, then the moves.

    ``hier`` is a :class:`~presend.hierarchy.Hierarchy`; only its L1i, L3,
    L2 BTB/L1 BTB and TLB pair are touched.
    """

    def __init__(self, cfg: IpuConfig, hier, blocks: bool = True, btb: bool = True, itlb: bool = True,
                 counters: Optional[IpuCounters] = None):
        self.cfg = cfg
        self.hier = hier
        self.mode = PresenceCheck(cfg.presence)
        self.do_blocks, self.do_btb, self.do_itlb = blocks, btb, itlb
        self.btt = BlockTemperatureTable(cfg.btt_entries, cfg.btt_bits)
        self.pit = PseudoInclusionTable(cfg.pit_bits)
        self.c = counters or IpuCounters()
        self.decisions: Optional[list] = None  # set to a list to record (cycle, block, Decision)
        self._pit_mode = self.mode is PresenceCheck.PIT
        hier.listeners.append(self._on_evict)
        hier.fill_listeners.append(self.pit.set)

    def _on_evict(self, ev) -> None:
        if not ev.accessed:
            self.btt.cool(ev.key)
        self.pit.clear(ev.key)

    def decide(self, block: int) -> Decision:
        present = self.pit.test(block) if self.mode is PresenceCheck.PIT else self.hier.l1i.probe(block)
        if present:
            return Decision.SKIP_PRESENT
        if self.btt.temperature(block) < self.cfg.btt_threshold:
            return Decision.SKIP_COLD
        return Decision.SEND

    def dispatch(self, block: int, now: int) -> Optional[Decision]:
        d = None
        if self.do_blocks:
            hier = self.hier
            if self._pit_mode:
                present = self.pit.test(block)
            else:
                present = block in hier.l1i.frames
            if present:
                d = Decision.SKIP_PRESENT
                self.c.skip_present += 1
            elif self.btt.temperature(block) < self.cfg.btt_threshold:
                d = Decision.SKIP_COLD
                self.c.skip_cold += 1
            else:
                d = Decision.SEND
                extra = hier.l3_read(block) - hier.cfg.l3_latency
                hier.l1i_install(block, now + self.cfg.ipu_to_l1i_latency + extra, via_presend=True)
                self.btt.heat(block)
                self.c.sends += 1
            if self.decisions is not None:
                self.decisions.append((now, block, d))
        if self.do_btb:
            self.move_btb(block, now)
        return d

    def move_btb(self, block: int, now: int) -> int:
        hier = self.hier
        btb = hier.btb
        if btb is None:
            return 0
        l2 = hier.l2btb
        shift = l2.geometry.index_shift
        resident = btb.frames
        l2frames = l2.frames
        ready = now + hier.cfg.l2btb_latency
        moved = 0
        # L2 BTB sets are indexed by block number
        for pc in l2.sets[l2.set_index(block << shift)]:
            if pc >> shift == block and pc not in resident:
                btb.fill(pc, False, ready, l2frames[pc].payload)
                moved += 1
        self.c.btb_moves += moved
        return moved

    def move_itlb(self, tlb: tuple, now: int) -> int:
        if not self.do_itlb:
            return 0
        hier = self.hier
        moved = 0
        ready = now + hier.cfg.l2tlb_latency
        for region in tlb:
            for page, handle in region:
                if hier.itlb.probe(page):
                    continue
                frame = hier.l2tlb.resolve(handle) if handle is not None else None
                if frame is None:
                    self.c.itlb_stale += 1
                    if not hier.l2tlb.probe(page):
                        continue
                hier.itlb.fill(page, ready=ready)
                moved += 1
        self.c.itlb_moves += moved
        return moved


class Ipu:
    """Tracks, queues and the traversal engine; time advances lazily."""

    def __init__(self, tables: MapTables, cfg: Optional[IpuConfig] = None,
                 presender: Optional[Presender] = None, counters: Optional[IpuCounters] = None,
                 block_shift: int = 6):
        self.cfg = cfg or IpuConfig()
        self.tables = tables
        self.presender = presender
        self.c = counters or (presender.c if presender else IpuCounters())
        self.tracks: list[IpuTrack] = []
        self.ubaq: deque = deque()  # (block, owner track or None, enqueue time)
        self.pffq: deque = deque()
        self.clock = 0
        self.drain_cycle = 0
        self.drained = 0
        self.last: Optional[UfqEntry] = None
        self.handles: dict = {}
        self.log: Optional[list] = None
        self.idle = False

    # -- queries ------------------------------------------------------------

    @property
    def ufq(self) -> list:
        return [(t, e.frag) for t in self.tracks for e in t.ufq]

    def lookahead(self) -> int:
        live = [t.lookahead_instructions for t in self.tracks if t.loop is None]
        return max(live) if live else 0

    # -- map access --------------------------------------------------------

    def _lookup(self, frag: FragmentId, handle: Optional[tuple]) -> Optional[FragmentInfo]:
        t = self.tables
        h = handle or self.handles.get(frag.key)
        info = None
        if h is not None:
            try:
                info = t.ft_lookup_direct(frag, h)
                self.c.ft_direct += 1
            except StaleHandle:
                info = None
        if info is None:
            self.c.ft_assoc += 1
            info = t.ft_lookup(frag)
        if info is None:
            self.handles.pop(frag.key, None)
            return None
        self.handles[frag.key] = info.handle
        if info.ort:
            self.c.ort_lookups[info.ort] += 1
        if info.mt:
            self.c.dtt_lookups += 1
        return info

    # -- traversal -----------------------------------------------------------

    def start(self, frag: FragmentId, ipus: tuple = ()) -> IpuTrack:
        """Begin a fresh single track whose next fragment is ``frag``."""
        trk = IpuTrack(next_frag=frag, ipus=tuple(ipus))
        trk.history = deque(maxlen=self.cfg.loop_history)
        self.tracks = [trk]
        self.idle = False
        return trk

    def _eligible(self, trk: IpuTrack) -> bool:
        cfg = self.cfg
        return (trk.loop is None and not trk.stalled and trk.next_frag is not None
                and trk.lookahead_instructions < cfg.keep_ahead
                and len(trk.ufq) < cfg.ufq_entries and len(self.ubaq) < cfg.ubaq_entries)

    def _push_ipus(self, ipus: tuple, item) -> tuple:
        if len(ipus) >= self.cfg.ipus_depth:
            self.c.ipus_overflows += 1
            ipus = ipus[1:]
        return ipus + (item,)

    def _enqueue_blocks(self, trk: Optional[IpuTrack], info: FragmentInfo, now: int) -> list:
        blocks = info.blocks
        for b in blocks:
            self.ubaq.append((b, trk, now))
        if self.presender is not None and info.tlb:
            self.presender.move_itlb(info.tlb, now)
        return blocks

    def step_track(self, trk: IpuTrack, now: int = 0) -> list:
        """One FT access on ``trk``; returns the blocks queued."""
        nf = trk.next_frag
        if nf is RETURN:
            if not trk.ipus:
                trk.stalled = True
                return []
            frag, handle = trk.ipus[-1]
            trk.ipus = trk.ipus[:-1]
        else:
            frag, handle = nf, trk.next_handle
        self.c.steps += 1
        info = self._lookup(frag, handle)
        if info is None:
            self.c.map_misses += 1
            trk.next_frag, trk.next_handle, trk.stalled = frag, None, True
            return []
        if self.cfg.loops and self._detect_loop(trk, frag, now):
            return []
        if frag.kind == Side.CALL:
            trk.ipus = self._push_ipus(trk.ipus, (FragmentId(Side.RET, frag.key), info.handle))
        entry = UfqEntry(frag, info.count, info, trk.ipus)
        trk.ufq.append(entry)
        trk.history.append(entry)
        trk.lookahead_instructions += info.count
        blocks = self._enqueue_blocks(trk, info, now)
        self._follow(trk, entry, now)
        if self.log is not None:
            self.log.append((now, "step", frag))
        return blocks

    def _follow(self, trk: IpuTrack, entry: UfqEntry, now: int, allow_fork: bool = True) -> None:
        info = entry.info
        path = 0
        if info.mt:
            a0, a1 = info.aging
            if a0 > 0 and a1 > 0:
                if allow_fork and len(self.tracks) < self.cfg.max_tracks:
                    other = trk.copy()
                    self._retag_shared(trk)
                    other.next_frag, other.next_handle = _as_frag(info.targets[1]), None
                    other.fork = (entry.frag, 1)
                    trk.fork = (entry.frag, 0)
                    self.tracks.append(other)
                    self.c.forks += 1
                else:
                    path = 0 if a0 >= a1 else 1
            elif a0 == 0 and a1 > 0:
                path = 1
        entry.path = path
        trk.next_frag, trk.next_handle = _as_frag(info.targets[path]), None

    def _retag_shared(self, trk: IpuTrack) -> None:
        # blocks queued before a fork belong to both paths
        if any(o is trk for _, o, _ in self.ubaq):
            kept = [(b, None if o is trk else o, t) for b, o, t in self.ubaq]
            self.ubaq.clear()
            self.ubaq.extend(kept)

    def _detect_loop(self, trk: IpuTrack, frag: FragmentId, now: int) -> bool:
        hist = list(trk.history)
        pos = None
        for i in range(len(hist) - 1, -1, -1):
            if hist[i].frag == frag:
                pos = i
                break
        if pos is None or len(self.tracks) > self.cfg.max_tracks:
            return False
        lap = hist[pos:]
        cycle = frozenset(e.frag for e in lap)
        others = [t for t in self.tracks if t is not trk]
        if others:
            if any(t.loop is not None for t in others):
                return False
            cont = others[0]
        else:
            cont = None
            for e in lap:
                info = e.info
                if not info.mt:
                    continue
                alt = info.targets[1 - e.path]
                cand = self._resolve_target(alt, e.ipus)
                if cand is not None and cand[0] not in cycle:
                    cont = IpuTrack(next_frag=cand[0], next_handle=cand[1], ipus=cand[2])
                    cont.history = deque(maxlen=self.cfg.loop_history)
                    break
            if cont is None:
                return False
            self.tracks.append(cont)
        trk.loop = cycle
        trk.fork = None
        cont.fork = None
        self.c.loops += 1
        if self.log is not None:
            self.log.append((now, "loop", frag, sorted(cycle)))
        return True

    @staticmethod
    def _resolve_target(target, ipus: tuple):
        if target is RETURN:
            if not ipus:
                return None
            frag, handle = ipus[-1]
            return frag, handle, ipus[:-1]
        return FragmentId(Side.CALL, target), None, ipus

    # -- processor synchronisation ------------------------------------------

    def sync(self, frag: FragmentId, now: int = 0, restart_ipus=None) -> SyncResult:
        """Match the processor's newly entered fragment against the plan."""
        self.idle = False
        loop_trk = next((t for t in self.tracks if t.loop is not None), None)
        heads = [t for t in self.tracks if t.ufq and t.ufq[0].frag == frag]
        if loop_trk is not None:
            cont = [t for t in self.tracks if t is not loop_trk]
            cont_heads = [t for t in cont if t in heads]
            if cont_heads and loop_trk in heads:
                pass  # entry queued before the split; both tracks keep going
            elif cont_heads:
                self.tracks = cont
                heads = cont_heads
            elif loop_trk in heads:
                heads = [loop_trk]
            elif not loop_trk.ufq and frag in loop_trk.loop:
                self.last = UfqEntry(frag, 0, None, ())
                return SyncResult.ON_TRACK
            else:
                heads = []
        if heads:
            if len(heads) < len(self.tracks) and loop_trk is None:
                self._resolve_fork(heads)
            for t in heads:
                e = t.ufq.popleft()
                t.lookahead_instructions -= e.count
                self.last = e
            self.c.dequeued += 1
            return SyncResult.ON_TRACK
        if self.last is not None and self.last.frag == frag and frag.kind == Side.RET:
            # recursion unwinding re-enters the same continuation
            return SyncResult.ON_TRACK
        self._redirect(frag, now, restart_ipus)
        return SyncResult.REDIRECT

    def _resolve_fork(self, survivors: list) -> None:
        for t in self.tracks:
            if t in survivors:
                continue
            kept = [x for x in self.ubaq if x[1] is not t]
            self.ubaq.clear()
            self.ubaq.extend(kept)
        self.tracks = list(survivors)
        for t in survivors:
            if t.fork is not None:
                fork_frag, path = t.fork
                d = self.tables.dtt_entry(fork_frag)
                if d is not None:
                    age_paths(d, path)
                t.fork = None
        self.c.fork_resolutions += 1

    def _redirect(self, frag: FragmentId, now: int, restart_ipus) -> None:
        self.c.redirects += 1
        prev = self.last
        if prev is not None and prev.info is not None and prev.info.mt:
            targets = prev.info.targets
            alt = 1 - prev.path
            want = RETURN if frag.kind == Side.RET else frag.key
            if targets[alt] is want or targets[alt] == want:
                d = self.tables.dtt_entry(prev.frag)
                if d is not None:
                    age_paths(d, alt)
        if self.log is not None:
            self.log.append((now, "redirect", frag))
        self.ubaq.clear()
        ipus = restart_ipus() if callable(restart_ipus) else (restart_ipus or ())
        ipus = tuple(ipus)[-self.cfg.ipus_depth:]
        trk = self.start(frag, ipus)
        self.clock = max(self.clock, now)
        info = self._lookup(frag, None)
        self.c.steps += 1
        if info is None:
            self.c.map_misses += 1
            trk.next_frag, trk.stalled = None, True
            self.last = UfqEntry(frag, 0, None, trk.ipus)
            return
        entry = UfqEntry(frag, info.count, info, trk.ipus)
        trk.history.append(entry)
        self._enqueue_blocks(trk, info, now)
        self._follow(trk, entry, now)
        self.last = entry

    # -- time ------------------------------------------------------------------

    def advance(self, now: int) -> None:
        """Run IPU steps and UBAQ dispatches scheduled up to cycle ``now``."""
        ubaq = self.ubaq
        pres = self.presender
        if pres is None:
            ubaq.clear()
        while True:
            ts = INF
            if not self.idle and self.clock <= now:
                ready = [t for t in self.tracks if self._eligible(t)]
                if ready:
                    ts = self.clock
                else:
                    self.idle = True
            if ubaq and ubaq[0][2] <= now and self.drain_cycle <= now:
                self._drain(min(ts - 1, now))
                if ts == INF:
                    continue
            if ts > now:
                break
            for t in ready:
                if t in self.tracks and self._eligible(t):
                    self.step_track(t, ts)
            self.clock = ts + 1
            if pres is None:
                ubaq.clear()
        if self.clock < now:
            self.clock = now

    def _drain(self, until) -> None:
        """Dispatch queued blocks whose UBAQ slot falls at or before ``until``."""
        ubaq = self.ubaq
        dispatch = self.presender.dispatch
        per = self.cfg.drain_per_cycle
        cyc, used = self.drain_cycle, self.drained
        while ubaq:
            t = ubaq[0][2]
            if t > cyc:
                cyc, used = t, 0
            if cyc > until:
                break
            dispatch(ubaq.popleft()[0], cyc)
            used += 1
            if used >= per:
                cyc, used = cyc + 1, 0
        self.drain_cycle, self.drained = cyc, used
        self.idle = False


def ipu_step(ipu: Ipu, now: int = 0) -> list:
    """One cycle of traversal on every track that may step; returns queued blocks."""
    out = []
    for t in list(ipu.tracks):
        if t in ipu.tracks and t.loop is None and not t.stalled and t.next_frag is not None \
                and t.lookahead_instructions < ipu.cfg.keep_ahead:
            out.extend(ipu.step_track(t, now))
    return out


def sync_with_processor(ipu: Ipu, retired_frag: FragmentId, now: int = 0, restart_ipus=None) -> SyncResult:
    return ipu.sync(retired_frag, now, restart_ipus)


def presend_decide(presender: Presender, block: int) -> Decision:
    return presender.decide(block)
