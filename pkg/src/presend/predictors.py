"""Direction predictors, return address stack and indirect target cache."""

from __future__ import annotations

from typing import Optional

from .cache import CacheGeometry, CacheModel


class OraclePredictor:
    """Always right; the simulator feeds it the trace outcome."""

    is_oracle = True

    def predict(self, pc: int, actual: bool = False) -> bool:
        return actual

    def update(self, pc: int, taken: bool) -> None:
        pass


class BimodalPredictor:
    is_oracle = False

    def __init__(self, counter_bits: int = 2, table_bits: int = 12, initial: Optional[int] = None):
        self.max = (1 << counter_bits) - 1
        self.threshold = 1 << (counter_bits - 1)
        self.mask = (1 << table_bits) - 1
        start = self.threshold - 1 if initial is None else initial
        self.table = bytearray([start]) * (1 << table_bits)

    def predict(self, pc: int, actual: bool = False) -> bool:
        return self.table[(pc >> 2) & self.mask] >= self.threshold

    def update(self, pc: int, taken: bool) -> None:
        i = (pc >> 2) & self.mask
        c = self.table[i]
        if taken:
            if c < self.max:
                self.table[i] = c + 1
        elif c:
            self.table[i] = c - 1


class GsharePredictor:
    is_oracle = False

    def __init__(self, history_bits: int = 14, table_bits: int = 14):
        self.mask = (1 << table_bits) - 1
        self.hmask = (1 << history_bits) - 1
        self.history = 0
        self.table = bytearray([1]) * (1 << table_bits)

    def predict(self, pc: int, actual: bool = False) -> bool:
        return self.table[((pc >> 2) ^ self.history) & self.mask] >= 2

    def update(self, pc: int, taken: bool) -> None:
        i = ((pc >> 2) ^ self.history) & self.mask
        c = self.table[i]
        if taken:
            if c < 3:
                self.table[i] = c + 1
        elif c:
            self.table[i] = c - 1
        self.history = ((self.history << 1) | taken) & self.hmask


def make_predictor(kind: str, bits: int = 2, history_bits: int = 14, table_bits: int = 14):
    kind = kind.lower()
    if kind == "oracle":
        return OraclePredictor()
    if kind == "bimodal":
        return BimodalPredictor(bits, table_bits)
    if kind == "gshare":
        return GsharePredictor(history_bits, table_bits)
    raise ValueError(f"unknown predictor {kind!r}")


class ReturnAddressStack:
    """Bounded RAS; overflow drops the oldest entry."""

    def __init__(self, depth: int = 64):
        self.depth = depth
        self.stack: list[int] = []

    def push(self, addr: int) -> None:
        if len(self.stack) >= self.depth:
            del self.stack[0]
        self.stack.append(addr)

    def pop(self) -> Optional[int]:
        return self.stack.pop() if self.stack else None


class IndirectTargetCache:
    """Last-target table keyed by branch PC."""

    def __init__(self, entries: int = 4096, ways: int = 4):
        self.cache = CacheModel(CacheGeometry.from_size(entries, ways), "itc")

    def predict(self, pc: int) -> Optional[int]:
        frame = self.cache.touch(pc >> 2)
        return None if frame is None else frame.payload

    def update(self, pc: int, target: int) -> None:
        key = pc >> 2
        frame = self.cache.get(key)
        if frame is None:
            self.cache.fill(key, payload=target)
        else:
            frame.payload = target
