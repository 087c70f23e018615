"""Instruction-side storage: L1i/L2/L3, MSHR, TLBs and BTBs with fill paths."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .cache import CacheGeometry, CacheModel, Eviction, Mshr, Replacement


def _geom(entries: int, ways: int, latency: int, **kw) -> CacheGeometry:
    return CacheGeometry.from_size(entries, ways, latency, **kw)


@dataclass
class HierarchyConfig:
    l1i_blocks: int = 512  # 32KB of 64B blocks
    l1i_ways: int = 8
    l1i_latency: int = 4
    l1i_perfect: bool = False
    mshr: int = 16
    l2_blocks: int = 8192  # 512KB
    l2_ways: int = 8
    l2_latency: int = 10
    l3_blocks: int = 32768  # 2MB
    l3_ways: int = 16
    l3_latency: int = 20
    memory_latency: int = 200
    itlb_entries: int = 64
    itlb_ways: int = 4
    itlb_latency: int = 1
    l2tlb_entries: int = 2048
    l2tlb_ways: int = 8
    l2tlb_latency: int = 8
    page_walk_latency: int = 50
    btb_entries: int = 8192  # 0 means an ideal BTB that never misses
    btb_ways: int = 8
    l2btb_entries: int = 16384
    l2btb_ways: int = 8
    l2btb_latency: int = 8
    replacement: str = "lru"
    seed: int = 7


@dataclass
class FillStats:
    l1i_fills: int = 0
    l2_accesses: int = 0
    l3_accesses: int = 0
    memory_accesses: int = 0
    evictions: int = 0
    useless_presends: int = 0


class Hierarchy:
    """Owns the caches and decides fill latencies.

    ``bypass_l2`` selects the presend-mode path where L1i fills come straight
    from the L3. Eviction listeners see every L1i victim.
    """

    def __init__(self, cfg: HierarchyConfig, bypass_l2: bool = False, block_shift: int = 6):
        self.cfg = cfg
        rep = Replacement(cfg.replacement)
        s = cfg.seed
        self.l1i = CacheModel(_geom(cfg.l1i_blocks, cfg.l1i_ways, cfg.l1i_latency, replacement=rep, seed=s), "l1i")
        self.l2 = CacheModel(_geom(cfg.l2_blocks, cfg.l2_ways, cfg.l2_latency, replacement=rep, seed=s + 1), "l2")
        self.l3 = CacheModel(_geom(cfg.l3_blocks, cfg.l3_ways, cfg.l3_latency, replacement=rep, seed=s + 2), "l3")
        self.itlb = CacheModel(_geom(cfg.itlb_entries, cfg.itlb_ways, cfg.itlb_latency, replacement=rep, seed=s + 3), "itlb")
        self.l2tlb = CacheModel(_geom(cfg.l2tlb_entries, cfg.l2tlb_ways, cfg.l2tlb_latency, replacement=rep, seed=s + 4), "l2tlb")
        self.btb_perfect = cfg.btb_entries <= 0
        self.btb = None if self.btb_perfect else CacheModel(
            _geom(cfg.btb_entries, min(cfg.btb_ways, cfg.btb_entries), 1, replacement=rep, seed=s + 5,
              index_shift=2), "btb")
        # branches of one block share a set, so a block probe is one set read
        self.l2btb = CacheModel(
            _geom(cfg.l2btb_entries, cfg.l2btb_ways, cfg.l2btb_latency, replacement=rep, seed=s + 6,
                  index_shift=block_shift), "l2btb")
        self.mshr = Mshr(cfg.mshr)
        self.bypass_l2 = bypass_l2
        self.stats = FillStats()
        self.listeners: list[Callable[[Eviction], None]] = []
        self.fill_listeners: list[Callable[[int], None]] = []

    # -- L1i --------------------------------------------------------------

    def l1i_install(self, block: int, ready: int, via_presend: bool) -> None:
        ev = self.l1i.fill(block, via_presend=via_presend, ready=ready)
        self.stats.l1i_fills += 1
        for fn in self.fill_listeners:
            fn(block)
        if ev is not None:
            self.stats.evictions += 1
            if ev.via_presend and not ev.accessed:
                self.stats.useless_presends += 1
            for fn in self.listeners:
                fn(ev)

    def backing_latency(self, block: int) -> int:
        """Latency to obtain a block from below the L1i, updating L2/L3."""
        cfg = self.cfg
        lat = 0
        if not self.bypass_l2:
            self.stats.l2_accesses += 1
            lat += cfg.l2_latency
            if self.l2.access(block) is not None:
                return lat
            self.l2.fill(block)
        return lat + self.l3_read(block)

    def l3_read(self, block: int) -> int:
        self.stats.l3_accesses += 1
        if self.l3.access(block) is not None:
            return self.cfg.l3_latency
        self.stats.memory_accesses += 1
        self.l3.fill(block)
        return self.cfg.l3_latency + self.cfg.memory_latency

    def request_fill(self, block: int, now: int) -> int:
        """Demand or prefetch fill through the MSHRs; returns arrival time."""
        done = self.mshr.issue(now, self.backing_latency(block))
        self.l1i_install(block, done, via_presend=False)
        return done

    # -- translation --------------------------------------------------------

    def itlb_lookup(self, page: int, now: int) -> int:
        """Stall cycles for translating ``page`` at demand fetch."""
        frame = self.itlb.get(page)
        if frame is not None:
            self.itlb.touch(page)
            return max(0, frame.ready - now)
        lat = self.cfg.l2tlb_latency
        if self.l2tlb.access(page) is None:
            lat += self.cfg.page_walk_latency
            self.l2tlb.fill(page)
        self.itlb.fill(page, ready=now + lat)
        return lat

    def l2tlb_pointer(self, page: int) -> Optional[tuple]:
        return self.l2tlb.handle(page)

    # -- branch targets -----------------------------------------------------

    def btb_hit(self, pc: int, now: int) -> bool:
        if self.btb_perfect:
            return True
        return self.btb.access(pc, now) is not None

    def btb_insert(self, pc: int, target: int, now: int, keep_l2: bool) -> None:
        if not self.btb_perfect:
            self.btb.fill(pc, ready=now, payload=target)
        if keep_l2:
            if pc in self.l2btb.frames:
                self.l2btb.touch(pc)
            else:
                self.l2btb.fill(pc, payload=target)
