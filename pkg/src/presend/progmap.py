"""Program map: Fragment Table plus Dual Target and Overflow Regions tables.

Fragments start at a call or return target and end at the next retired call
or return. A Fragment Table entry is keyed by the call-site key and holds two
sides: the Call side (the callee's first fragment) and the Ret side (the
continuation after the callee returns).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, NamedTuple, Optional

from .cache import CacheGeometry, CacheModel, Replacement
from .trace import Kind, TraceRecord, log2_exact

MASK64 = (1 << 64) - 1
COUNT_MAX = 255
MAX_OVERFLOW_REGIONS = 16
ORT_SIZES = (2, 4, 16)
UNMATCHED_TAG = 1 << 63


class Side(IntEnum):
    CALL = 0
    RET = 1


class _Return:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "RETURN"

    def __reduce__(self):
        return (_Return, ())


RETURN = _Return()


class FragmentId(NamedTuple):
    kind: Side
    key: int

    def __repr__(self):
        return f"{self.kind.name.title()}({self.key:#x})"


ROOT = FragmentId(Side.CALL, 0)


def rotl64(x: int, r: int) -> int:
    return ((x << r) | (x >> (64 - r))) & MASK64


def indirect_key(call_pc: int, target_pc: int) -> int:
    return (call_pc ^ rotl64(target_pc, 17)) & MASK64


def call_key(rec: TraceRecord) -> int:
    if rec.kind == Kind.INDIRECT_CALL:
        return indirect_key(rec.pc, rec.target)
    return rec.pc


def target_repr(target) -> str:
    return "RETURN" if target is RETURN else f"{target:#x}"


@dataclass(frozen=True)
class Region:
    addr: int
    size: int = 0

    @property
    def blocks(self) -> range:
        return range(self.addr, self.addr + self.size + 1)

    def __repr__(self):
        return f"<{self.addr:#x},{self.size}>"


def coalesce(blocks: Iterable[int], entry: Optional[int] = None) -> tuple[Region, list[Region]]:
    """Split touched blocks (first-touch order) into primary + overflow regions.

    The primary region is the contiguous run starting at the entry block; the
    remaining blocks merge into maximal contiguous runs, ordered by the first
    touch of any member.
    """
    order = list(dict.fromkeys(blocks))
    if not order:
        raise ValueError("fragment touched no blocks")
    if entry is None:
        entry = order[0]
    left = set(order)
    end = entry
    left.discard(entry)
    while end + 1 in left:
        end += 1
        left.discard(end)
    primary = Region(entry, end - entry)
    overflow = []
    for b in order:
        if b not in left:
            continue
        lo = hi = b
        left.discard(b)
        while lo - 1 in left:
            lo -= 1
            left.discard(lo)
        while hi + 1 in left:
            hi += 1
            left.discard(hi)
        overflow.append(Region(lo, hi - lo))
    return primary, overflow


def ort_size_for(n_overflow: int) -> int:
    for size in ORT_SIZES:
        if n_overflow <= size:
            return size
    return ORT_SIZES[-1]


@dataclass
class SideInfo:
    region: Region
    count: int
    target: object  # int call-site key or RETURN
    mt: bool = False
    of: bool = False
    lossy: bool = False
    tlb: tuple = ()  # per region: tuple of (page, l2-tlb handle)


@dataclass
class FtEntry:
    key: int
    sides: list = field(default_factory=lambda: [None, None])


@dataclass
class DttEntry:
    second_target: object
    aging: list = field(default_factory=lambda: [2, 2])

    @property
    def inactive(self) -> tuple[bool, bool]:
        return (self.aging[0] == 0, self.aging[1] == 0)


def age_paths(entry: DttEntry, taken_path: int) -> tuple[int, int]:
    """Saturating +1 on the taken path and -1 on the other, both in [0, 3]."""
    a = entry.aging
    other = 1 - taken_path
    a[taken_path] = min(3, a[taken_path] + 1)
    a[other] = max(0, a[other] - 1)
    return a[0], a[1]


class StaleHandle(LookupError):
    pass


@dataclass
class FragmentInfo:
    id: FragmentId
    region: Region
    overflow: list
    count: int
    targets: list  # [ft_target] or [ft_target, dtt_target]
    aging: Optional[tuple]
    ort: int  # 0 when no overflow entry, else 2/4/16
    lossy: bool
    tlb: tuple
    handle: tuple

    @property
    def regions(self) -> list:
        return [self.region] + list(self.overflow)

    @property
    def blocks(self) -> list:
        return [b for r in self.regions for b in r.blocks]

    @property
    def mt(self) -> bool:
        return len(self.targets) > 1


def _sat_key(key: int, side: Side) -> int:
    return (key << 1) | int(side)


@dataclass
class MapUpdate:
    kind: str
    frag: FragmentId
    detail: object = None


@dataclass
class MapTablesConfig:
    ft_entries: int = 4096
    ft_ways: int = 8
    dtt_entries: int = 256
    ort2_entries: int = 1024
    ort4_entries: int = 256
    ort16_entries: int = 128
    ways: int = 8
    seed: int = 1


def _table(entries: int, ways: int, seed: int, name: str) -> CacheModel:
    ways = min(ways, entries)
    geom = CacheGeometry(entries // ways, ways, 1, Replacement.RANDOM, seed, hashed=True)
    return CacheModel(geom, name)


class MapTables:
    """FT + DTT + ORT-2/4/16 with eviction-consistent linkage bits."""

    def __init__(self, config: Optional[MapTablesConfig] = None):
        cfg = config or MapTablesConfig()
        self.config = cfg
        self.ft = _table(cfg.ft_entries, cfg.ft_ways, cfg.seed, "ft")
        self.dtt = _table(cfg.dtt_entries, cfg.ways, cfg.seed + 1, "dtt")
        self.orts = {
            2: _table(cfg.ort2_entries, cfg.ways, cfg.seed + 2, "ort2"),
            4: _table(cfg.ort4_entries, cfg.ways, cfg.seed + 3, "ort4"),
            16: _table(cfg.ort16_entries, cfg.ways, cfg.seed + 4, "ort16"),
        }
        self.evictions = {"ft": 0, "dtt": 0, "ort": 0}

    # -- lookups ---------------------------------------------------------

    def entry(self, key: int) -> Optional[FtEntry]:
        frame = self.ft.get(key)
        return None if frame is None else frame.payload

    def side(self, frag: FragmentId) -> Optional[SideInfo]:
        e = self.entry(frag.key)
        return None if e is None else e.sides[frag.kind]

    def dtt_entry(self, frag: FragmentId) -> Optional[DttEntry]:
        frame = self.dtt.get(_sat_key(frag.key, frag.kind))
        return None if frame is None else frame.payload

    def ort_regions(self, frag: FragmentId) -> tuple[int, list]:
        sk = _sat_key(frag.key, frag.kind)
        for size, table in self.orts.items():
            frame = table.get(sk)
            if frame is not None:
                return size, frame.payload
        return 0, []

    def ft_lookup(self, frag: FragmentId) -> Optional[FragmentInfo]:
        frame = self.ft.get(frag.key)
        if frame is None:
            return None
        return self._info(frag, frame.payload, (frag.key, frame.gen))

    def ft_lookup_direct(self, frag: FragmentId, handle: tuple) -> FragmentInfo:
        frame = self.ft.resolve(handle)
        if frame is None or handle[0] != frag.key:
            raise StaleHandle(f"handle {handle} no longer names {frag}")
        info = self._info(frag, frame.payload, handle)
        if info is None:
            raise StaleHandle(f"{frag} side not populated")
        return info

    def _info(self, frag, entry: FtEntry, handle) -> Optional[FragmentInfo]:
        side = entry.sides[frag.kind]
        if side is None:
            return None
        targets = [side.target]
        aging = None
        if side.mt:
            d = self.dtt_entry(frag)
            targets.append(d.second_target)
            aging = tuple(d.aging)
        ort, overflow = (0, [])
        if side.of:
            ort, overflow = self.ort_regions(frag)
        return FragmentInfo(frag, side.region, list(overflow), side.count, targets, aging,
                            ort, side.lossy, side.tlb, handle)

    # -- writes ----------------------------------------------------------

    def _insert_ft(self, key: int) -> FtEntry:
        entry = FtEntry(key)
        ev = self.ft.fill(key, payload=None)
        self.ft.get(key).payload = entry
        if ev is not None:
            self.evictions["ft"] += 1
            for side in Side:
                self._drop_satellites(ev.key, side)
        return entry

    def _drop_satellites(self, key: int, side: Side) -> None:
        sk = _sat_key(key, side)
        self.dtt.invalidate(sk)
        for table in self.orts.values():
            table.invalidate(sk)

    def _owner_side(self, sat_key: int) -> Optional[SideInfo]:
        e = self.entry(sat_key >> 1)
        return None if e is None else e.sides[sat_key & 1]

    def set_dtt(self, frag: FragmentId, second_target, aging=(2, 2)) -> None:
        sk = _sat_key(frag.key, frag.kind)
        frame = self.dtt.get(sk)
        if frame is not None:
            frame.payload = DttEntry(second_target, list(aging))
        else:
            ev = self.dtt.fill(sk, payload=DttEntry(second_target, list(aging)))
            if ev is not None:
                self.evictions["dtt"] += 1
                owner = self._owner_side(ev.key)
                if owner is not None:
                    owner.mt = False
        self.side(frag).mt = True

    def set_overflow(self, frag: FragmentId, overflow: list) -> None:
        sk = _sat_key(frag.key, frag.kind)
        side = self.side(frag)
        for table in self.orts.values():
            table.invalidate(sk)
        side.lossy = len(overflow) > MAX_OVERFLOW_REGIONS
        overflow = overflow[:MAX_OVERFLOW_REGIONS]
        if not overflow:
            side.of = False
            return
        table = self.orts[ort_size_for(len(overflow))]
        ev = table.fill(sk, payload=list(overflow))
        if ev is not None:
            self.evictions["ort"] += 1
            owner = self._owner_side(ev.key)
            if owner is not None:
                owner.of = False
        side.of = True

    def write_side(self, frag: FragmentId, region, overflow, count, target, tlb=()) -> None:
        entry = self.entry(frag.key) or self._insert_ft(frag.key)
        old = entry.sides[frag.kind]
        mt = old.mt if old is not None else False
        entry.sides[frag.kind] = SideInfo(region, min(count, COUNT_MAX), target, mt, False, False, tlb)
        self.set_overflow(frag, overflow)

    def check_consistency(self) -> None:
        """Assert mt/of bits agree with satellite residence (test helper)."""
        for key, frame in self.ft.frames.items():
            for side in Side:
                s = frame.payload.sides[side]
                if s is None:
                    continue
                sk = _sat_key(key, side)
                assert s.mt == (sk in self.dtt.frames), (key, side)
                assert s.of == any(sk in t.frames for t in self.orts.values()), (key, side)
        for table in (self.dtt, *self.orts.values()):
            for sk in table.frames:
                owner = self._owner_side(sk)
                assert owner is not None, f"orphan satellite {sk:#x} in {table.name}"

    # -- dump/restore ----------------------------------------------------

    def dump(self) -> str:
        lines = []
        for key in sorted(self.ft.frames):
            entry = self.ft.frames[key].payload
            for side in Side:
                s = entry.sides[side]
                if s is None:
                    continue
                frag = FragmentId(side, key)
                lines.append(
                    f"FT {key:#x} {side.name.lower()} region {s.region.addr:#x} {s.region.size} "
                    f"count {s.count} target {target_repr(s.target)} mt {int(s.mt)} of {int(s.of)} "
                    f"lossy {int(s.lossy)}"
                )
                if s.mt:
                    d = self.dtt_entry(frag)
                    lines.append(f"DTT {key:#x} {side.name.lower()} target {target_repr(d.second_target)} "
                                 f"aging {d.aging[0]} {d.aging[1]}")
                if s.of:
                    size, regs = self.ort_regions(frag)
                    body = " ".join(f"{r.addr:#x}:{r.size}" for r in regs)
                    lines.append(f"ORT{size} {key:#x} {side.name.lower()} {body}")
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def restore(cls, text: str, config: Optional[MapTablesConfig] = None) -> "MapTables":
        tables = cls(config)
        pending_dtt, pending_ort = [], []
        for lineno, raw in enumerate(text.splitlines(), 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                tag, key, side = parts[0], int(parts[1], 0), Side[parts[2].upper()]
                frag = FragmentId(side, key)
                if tag == "FT":
                    kv = dict(zip(parts[6::2], parts[7::2]))
                    region = Region(int(parts[4], 0), int(parts[5]))
                    target = RETURN if kv["target"] == "RETURN" else int(kv["target"], 0)
                    tables.write_side(frag, region, [], int(kv["count"]), target)
                    tables.side(frag).lossy = bool(int(kv.get("lossy", "0")))
                elif tag == "DTT":
                    target = RETURN if parts[4] == "RETURN" else int(parts[4], 0)
                    pending_dtt.append((frag, target, (int(parts[6]), int(parts[7]))))
                elif tag.startswith("ORT"):
                    regs = [Region(int(a, 0), int(s)) for a, s in (p.split(":") for p in parts[3:])]
                    pending_ort.append((frag, regs))
                else:
                    raise ValueError(f"unknown record {tag}")
            except (KeyError, IndexError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        for frag, target, aging in pending_dtt:
            tables.set_dtt(frag, target, aging)
        for frag, regs in pending_ort:
            lossy = tables.side(frag).lossy
            tables.set_overflow(frag, regs)
            tables.side(frag).lossy = lossy
        return tables


class MapBuilder:
    """Builds the program map from the retired instruction stream.

    The simulator drives :meth:`touch`/:meth:`finalize` at block granularity;
    :meth:`observe_retired` is the per-record entry point.
    """

    def __init__(self, tables: Optional[MapTables] = None, block_size: int = 64,
                 tlb_pointer: Optional[Callable[[int], tuple]] = None, page_size: int = 4096):
        self.tables = tables or MapTables()
        self.block_shift = log2_exact(block_size)
        self.page_block_shift = log2_exact(page_size) - self.block_shift
        self.tlb_pointer = tlb_pointer
        self.current = ROOT
        self.blocks: dict[int, None] = {}
        self.count = 0
        self.dirty = False
        self.stack: list[int] = []
        self.fragments = 0
        self.writes = 0
        self.unmatched_returns = 0

    # -- per-record interface --------------------------------------------

    def observe_retired(self, rec: TraceRecord) -> list:
        self.blocks.setdefault(rec.pc >> self.block_shift, None)
        self.count += 1
        if rec.kind.is_call:
            key = call_key(rec)
            return self.transition(FragmentId(Side.CALL, key), key)
        if rec.kind == Kind.RETURN:
            return self.transition(self.return_fragment(rec.target), RETURN)
        return []

    def return_fragment(self, return_target: int) -> FragmentId:
        if self.stack:
            return FragmentId(Side.RET, self.stack.pop())
        self.unmatched_returns += 1
        return FragmentId(Side.RET, (return_target | UNMATCHED_TAG) & MASK64)

    def transition(self, nxt: FragmentId, target) -> list:
        """End the current fragment with successor ``target`` and start ``nxt``."""
        events = self.finalize(self.current, target, self.blocks, self.count, self.dirty)
        events.append(MapUpdate("transition", self.current, nxt))
        if nxt.kind == Side.CALL:
            self.stack.append(nxt.key)
        self.current = nxt
        self.blocks = {}
        self.count = 0
        self.dirty = False
        return events

    def mark_dirty(self) -> None:
        """Flag the in-flight fragment (L1i miss or IPU redirect)."""
        self.dirty = True

    # -- construction ----------------------------------------------------

    def _tlb(self, regions) -> tuple:
        if self.tlb_pointer is None:
            return ()
        shift = self.page_block_shift
        out = []
        for r in regions:
            pages = sorted({b >> shift for b in (r.addr, r.addr + r.size)})
            out.append(tuple((p, self.tlb_pointer(p)) for p in pages))
        return tuple(out)

    def finalize(self, frag: FragmentId, target, blocks, count: int, dirty: bool) -> list:
        self.fragments += 1
        if not blocks:
            return []
        t = self.tables
        side = t.side(frag)
        events = []
        if side is None:
            region, overflow = coalesce(blocks)
            t.write_side(frag, region, overflow, count, target, self._tlb([region] + overflow))
            self.writes += 1
            return [MapUpdate("create", frag)]
        wrote = False
        known = target == side.target
        if not known and side.mt:
            known = target == t.dtt_entry(frag).second_target
        if not known:
            if side.mt:
                d = t.dtt_entry(frag)
                # third successor: overwrite the weaker path (tie -> DTT path)
                if d.aging[0] < d.aging[1]:
                    side.target, d.second_target = d.second_target, target
                else:
                    d.second_target = target
                d.aging[:] = [2, 2]
                events.append(MapUpdate("dtt_replace", frag, target))
            else:
                t.set_dtt(frag, target)
                events.append(MapUpdate("dtt_create", frag, target))
            wrote = dirty = True
        if dirty:
            _, old_overflow = t.ort_regions(frag) if side.of else (0, [])
            old_blocks = [b for r in [side.region] + list(old_overflow) for b in r.blocks]
            merged = list(dict.fromkeys(old_blocks + list(blocks)))
            region, overflow = coalesce(merged, side.region.addr)
            lossy = side.lossy
            side.region = region
            side.count = min(count, COUNT_MAX)
            side.tlb = self._tlb([region] + overflow)
            t.set_overflow(frag, overflow)
            side.lossy = side.lossy or lossy
            wrote = True
            events.append(MapUpdate("update", frag))
        if wrote:
            self.writes += 1
        return events

    @property
    def update_rate_percent(self) -> float:
        return 100.0 * self.writes / self.fragments if self.fragments else 0.0
