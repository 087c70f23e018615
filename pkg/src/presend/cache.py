"""Set-associative storage model shared by caches, TLBs and BTBs."""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional

from .trace import log2_exact


class Replacement(str, Enum):
    LRU = "lru"
    RANDOM = "random"


@dataclass
class CacheGeometry:
    num_sets: int
    ways: int
    hit_latency: int = 1
    replacement: Replacement = Replacement.LRU
    seed: int = 0
    # keys are shifted right by this much before set indexing (BTB: index by block)
    index_shift: int = 0
    # mix key bits before indexing (tables keyed by sparse PCs)
    hashed: bool = False

    def __post_init__(self):
        log2_exact(self.num_sets)
        if self.ways < 1:
            raise ValueError("ways must be >= 1")
        self.replacement = Replacement(self.replacement)

    @property
    def entries(self) -> int:
        return self.num_sets * self.ways

    @classmethod
    def from_size(cls, entries: int, ways: int, hit_latency: int = 1, **kw) -> "CacheGeometry":
        ways = min(ways, entries)
        return cls(entries // ways, ways, hit_latency, **kw)


class Eviction(NamedTuple):
    key: int
    accessed: bool
    via_presend: bool


class Frame:
    __slots__ = ("ready", "accessed", "via_presend", "payload", "gen")

    def __init__(self, ready, via_presend, payload, gen):
        self.ready = ready
        self.accessed = False
        self.via_presend = via_presend
        self.payload = payload
        self.gen = gen


class CacheModel:
    """Tag store with per-set recency lists.

    Each set is a list of keys ordered least- to most-recently used. Frames
    carry an arrival time (``ready``) so in-flight fills can be modelled, the
    L1i accessed bit, and an optional payload (BTB target, TLB entry).
    """

    def __init__(self, geometry: CacheGeometry, name: str = ""):
        self.geometry = geometry
        self.name = name
        self._mask = geometry.num_sets - 1
        self._shift = geometry.index_shift
        self._ways = geometry.ways
        self._lru = geometry.replacement is Replacement.LRU
        self._rng = random.Random(geometry.seed)
        mask, shift = self._mask, self._shift
        if geometry.hashed:
            self._idx = lambda k: (((k ^ (k >> 17) ^ (k >> 31)) * 0x9E3779B97F4A7C15) >> 37) & mask
        else:
            self._idx = lambda k: (k >> shift) & mask
        self._hashed = geometry.hashed
        self.sets: list[list[int]] = [[] for _ in range(geometry.num_sets)]
        self.frames: dict[int, Frame] = {}
        self._gen = 0

    def set_index(self, key: int) -> int:
        return self._idx(key)

    def __contains__(self, key: int) -> bool:
        return key in self.frames

    def __len__(self) -> int:
        return len(self.frames)

    def access(self, key: int, now: int = 0) -> Optional[int]:
        """Return the hit latency, or None on a miss (no state change)."""
        frame = self.frames.get(key)
        if frame is None or frame.ready > now:
            return None
        if self._lru:
            s = self.sets[self._idx(key) if self._hashed else (key >> self._shift) & self._mask]
            if s[-1] != key:
                s.remove(key)
                s.append(key)
        frame.accessed = True
        return self.geometry.hit_latency

    def touch(self, key: int) -> Optional[Frame]:
        """Demand touch regardless of arrival time; returns the frame if resident."""
        frame = self.frames.get(key)
        if frame is None:
            return None
        if self._lru:
            s = self.sets[self._idx(key) if self._hashed else (key >> self._shift) & self._mask]
            if s[-1] != key:
                s.remove(key)
                s.append(key)
        frame.accessed = True
        return frame

    def probe(self, key: int) -> bool:
        return key in self.frames

    def get(self, key: int) -> Optional[Frame]:
        return self.frames.get(key)

    def fill(self, key: int, via_presend: bool = False, ready: int = 0, payload=None) -> Optional[Eviction]:
        """Install ``key``; returns the victim if one had to be evicted."""
        frames = self.frames
        if key in frames:
            return None
        s = self.sets[self._idx(key) if self._hashed else (key >> self._shift) & self._mask]
        victim = None
        if len(s) >= self._ways:
            vkey = s.pop(0) if self._lru else s.pop(self._rng.randrange(len(s)))
            vf = frames.pop(vkey)
            victim = Eviction(vkey, vf.accessed, vf.via_presend)
        s.append(key)
        self._gen += 1
        frames[key] = Frame(ready, via_presend, payload, self._gen)
        return victim

    def invalidate(self, key: int) -> bool:
        frame = self.frames.pop(key, None)
        if frame is None:
            return False
        self.sets[self._idx(key)].remove(key)
        return True

    def handle(self, key: int) -> Optional[tuple[int, int]]:
        """Opaque pointer to a resident entry: (key, generation)."""
        frame = self.frames.get(key)
        return None if frame is None else (key, frame.gen)

    def resolve(self, handle: tuple[int, int]) -> Optional[Frame]:
        key, gen = handle
        frame = self.frames.get(key)
        if frame is None or frame.gen != gen:
            return None
        return frame

    def keys_in_set(self, index: int) -> list[int]:
        return list(self.sets[index])


class Mshr:
    """Bounded pool of outstanding fills; a full pool delays the next issue."""

    def __init__(self, capacity: int = 16):
        if capacity < 1:
            raise ValueError("MSHR capacity must be >= 1")
        self.capacity = capacity
        self._busy: list[int] = []
        self.stall_cycles = 0

    def issue(self, now: int, latency: int) -> int:
        """Issue a fill no earlier than ``now``; returns its completion time."""
        busy = self._busy
        while busy and busy[0] <= now:
            heapq.heappop(busy)
        start = now
        if len(busy) >= self.capacity:
            start = heapq.heappop(busy)
            self.stall_cycles += start - now
        done = start + latency
        heapq.heappush(busy, done)
        return done

    def outstanding(self, now: int) -> int:
        return sum(1 for t in self._busy if t > now)
