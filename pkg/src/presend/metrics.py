"""Run counters and the derived per-kilo-instruction report."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields


@dataclass
class Counters:
    instructions: int = 0
    cycles: int = 0
    l1i_accesses: int = 0
    l1i_misses: int = 0
    late_arrivals: int = 0
    cwki_cycles: int = 0
    itlb_misses: int = 0
    itlb_stall_cycles: int = 0
    fdip_redirects: int = 0
    direction_redirects: int = 0
    btb_miss_redirects: int = 0
    wrong_target_redirects: int = 0
    ipu_redirects: int = 0
    prefetches: int = 0
    l2_accesses: int = 0
    l3_accesses: int = 0
    memory_accesses: int = 0
    presend_sends: int = 0
    presend_skip_cold: int = 0
    presend_skip_present: int = 0
    useless_presends: int = 0
    btb_moves: int = 0
    itlb_moves: int = 0
    fragments: int = 0
    ft_writes: int = 0
    ft_accesses: int = 0
    ort2_lookups: int = 0
    ort4_lookups: int = 0
    ort16_lookups: int = 0
    dtt_lookups: int = 0

    def minus(self, other: "Counters") -> "Counters":
        return Counters(**{f.name: getattr(self, f.name) - getattr(other, f.name) for f in fields(self)})

    def copy(self) -> "Counters":
        return Counters(**asdict(self))


def _per(num: int, den: int, scale: float = 1000.0) -> float:
    return scale * num / den if den else 0.0


@dataclass
class MetricsReport:
    mode: str
    retired_instructions: int
    cycles: int
    l1i_accesses: int
    l1i_misses: int
    mpki: float
    mpka: float
    redirects: int
    rpki: float
    cwki_cycles: int
    cwki: float
    l3_accesses: int
    l3_accesses_per_ki: float
    itlb_misses: int
    itlb_misses_pki: float
    fdip_redirects: int
    btb_miss_redirects: int
    direction_redirects: int
    wrong_target_redirects: int
    ipu_redirects: int
    presend_sends: int
    useless_presends: int
    useless_send_fraction: float
    ft_update_rate_percent: float
    ort2_lookup_percent: float
    ort4_lookup_percent: float
    ort16_lookup_percent: float
    dtt_lookup_percent: float
    pseudo_ipc: float
    no_instructions: bool = False
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_counters(cls, mode: str, c: Counters, extra: dict | None = None) -> "MetricsReport":
        n = c.instructions
        presend = mode != "fdip"
        redirects = c.ipu_redirects if presend else c.fdip_redirects
        return cls(
            mode=mode,
            retired_instructions=n,
            cycles=c.cycles,
            l1i_accesses=c.l1i_accesses,
            l1i_misses=c.l1i_misses,
            mpki=_per(c.l1i_misses, n),
            mpka=_per(c.l1i_misses, c.l1i_accesses),
            redirects=redirects,
            rpki=_per(redirects, n),
            cwki_cycles=c.cwki_cycles,
            cwki=_per(c.cwki_cycles, n),
            l3_accesses=c.l3_accesses,
            l3_accesses_per_ki=_per(c.l3_accesses, n),
            itlb_misses=c.itlb_misses,
            itlb_misses_pki=_per(c.itlb_misses, n),
            fdip_redirects=c.fdip_redirects,
            btb_miss_redirects=c.btb_miss_redirects,
            direction_redirects=c.direction_redirects,
            wrong_target_redirects=c.wrong_target_redirects,
            ipu_redirects=c.ipu_redirects,
            presend_sends=c.presend_sends,
            useless_presends=c.useless_presends,
            useless_send_fraction=c.useless_presends / c.presend_sends if c.presend_sends else 0.0,
            ft_update_rate_percent=_per(c.ft_writes, c.fragments, 100.0),
            ort2_lookup_percent=_per(c.ort2_lookups, c.ft_accesses, 100.0),
            ort4_lookup_percent=_per(c.ort4_lookups, c.ft_accesses, 100.0),
            ort16_lookup_percent=_per(c.ort16_lookups, c.ft_accesses, 100.0),
            dtt_lookup_percent=_per(c.dtt_lookups, c.ft_accesses, 100.0),
            pseudo_ipc=n / c.cycles if c.cycles else 0.0,
            no_instructions=n == 0,
            extra=dict(extra or {}),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @staticmethod
    def csv_columns() -> list:
        return [f.name for f in fields(MetricsReport) if f.name != "extra"]

    def csv_row(self) -> list:
        d = self.to_dict()
        return [d[k] for k in self.csv_columns()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_columns())
        w.writerow(self.csv_row())
        return buf.getvalue()

    def check_algebra(self) -> None:
        """Raise AssertionError if the derived rates disagree with the counts."""
        m, n, a = self.l1i_misses, self.retired_instructions, self.l1i_accesses
        assert a <= n, "more L1i accesses than instructions"
        assert self.cwki_cycles <= self.cycles, "wait cycles exceed total cycles"
        if n:
            assert round(self.mpki * n) == 1000 * m
        if a:
            assert round(self.mpka * a) == 1000 * m
        if a <= n:
            assert self.mpka >= self.mpki
