"""Instruction trace records, their binary/text encodings and block arithmetic.

A trace is the correct-path (retired) instruction stream. Each record is one
instruction; control transfers carry their target and outcome.
"""

from __future__ import annotations

import gzip
import io
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

RECORD_SIZE = 18
MAGIC = b"PSTR"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHH")

_RECORD = struct.Struct("<QQBB")
RECORD_DTYPE = np.dtype(
    [("pc", "<u8"), ("target", "<u8"), ("kind", "u1"), ("flags", "u1")]
)
assert RECORD_DTYPE.itemsize == RECORD_SIZE


class TraceError(Exception):
    pass


class MalformedRecord(TraceError):
    pass


class TruncatedStream(TraceError):
    pass


class InvalidGeometry(ValueError):
    pass


class Kind(IntEnum):
    PLAIN = 0
    COND_BRANCH = 1
    UNCOND_JUMP = 2
    DIRECT_CALL = 3
    INDIRECT_CALL = 4
    RETURN = 5

    @property
    def is_call(self) -> bool:
        return self in (Kind.DIRECT_CALL, Kind.INDIRECT_CALL)


ALWAYS_TAKEN = frozenset({Kind.UNCOND_JUMP, Kind.DIRECT_CALL, Kind.INDIRECT_CALL, Kind.RETURN})

_KIND_NAMES = {
    "plain": Kind.PLAIN,
    "cond": Kind.COND_BRANCH,
    "condbranch": Kind.COND_BRANCH,
    "jump": Kind.UNCOND_JUMP,
    "uncondjump": Kind.UNCOND_JUMP,
    "call": Kind.DIRECT_CALL,
    "directcall": Kind.DIRECT_CALL,
    "icall": Kind.INDIRECT_CALL,
    "indirectcall": Kind.INDIRECT_CALL,
    "ret": Kind.RETURN,
    "return": Kind.RETURN,
}
_TEXT_NAMES = {
    Kind.PLAIN: "plain",
    Kind.COND_BRANCH: "cond",
    Kind.UNCOND_JUMP: "jump",
    Kind.DIRECT_CALL: "call",
    Kind.INDIRECT_CALL: "icall",
    Kind.RETURN: "ret",
}


@dataclass(frozen=True)
class TraceRecord:
    pc: int
    kind: Kind = Kind.PLAIN
    target: int = 0
    taken: bool = False

    def validate(self) -> None:
        if not 0 <= self.pc < 1 << 64 or not 0 <= self.target < 1 << 64:
            raise MalformedRecord(f"address out of range in {self}")
        if self.kind == Kind.PLAIN:
            if self.target != 0 or self.taken:
                raise MalformedRecord(f"plain instruction with target/taken: {self}")
            return
        if self.pc == 0 or self.target == 0:
            raise MalformedRecord(f"control transfer with zero pc/target: {self}")
        if self.kind in ALWAYS_TAKEN and not self.taken:
            raise MalformedRecord(f"{self.kind.name} must be taken: {self}")


def encode_record(rec: TraceRecord) -> bytes:
    return _RECORD.pack(rec.pc, rec.target, int(rec.kind), 1 if rec.taken else 0)


def decode_record(data: bytes) -> TraceRecord:
    if len(data) < RECORD_SIZE:
        raise TruncatedStream(f"need {RECORD_SIZE} bytes, have {len(data)}")
    pc, target, kind, flags = _RECORD.unpack_from(data)
    if kind > Kind.RETURN:
        raise MalformedRecord(f"kind byte {kind} out of range")
    rec = TraceRecord(pc, Kind(kind), target, bool(flags & 1))
    rec.validate()
    return rec


def iter_records(data: bytes) -> Iterator[TraceRecord]:
    """Decode back-to-back records; a short tail raises TruncatedStream."""
    view = memoryview(data)
    off = 0
    while off < len(view):
        yield decode_record(bytes(view[off : off + RECORD_SIZE]))
        off += RECORD_SIZE


def log2_exact(value: int) -> int:
    if value <= 0 or value & (value - 1):
        raise InvalidGeometry(f"{value} is not a power of two")
    return value.bit_length() - 1


def block_of(pc: int, block_size: int = 64) -> int:
    return pc >> log2_exact(block_size)


def page_of(pc: int, page_size: int = 4096) -> int:
    return pc >> log2_exact(page_size)


class Trace:
    """Columnar in-memory trace.

    Columns are numpy arrays so that multi-million instruction traces stay
    compact; iteration yields TraceRecord objects.
    """

    def __init__(self, pc, kind, target, taken, block_size: int = 64):
        self.pc = np.asarray(pc, dtype=np.uint64)
        self.kind = np.asarray(kind, dtype=np.uint8)
        self.target = np.asarray(target, dtype=np.uint64)
        self.taken = np.asarray(taken, dtype=bool)
        if not (len(self.pc) == len(self.kind) == len(self.target) == len(self.taken)):
            raise ValueError("trace columns differ in length")
        log2_exact(block_size)
        self.block_size = block_size

    @classmethod
    def from_records(cls, records: Iterable[TraceRecord], block_size: int = 64) -> "Trace":
        recs = list(records)
        return cls(
            [r.pc for r in recs],
            [int(r.kind) for r in recs],
            [r.target for r in recs],
            [r.taken for r in recs],
            block_size,
        )

    @classmethod
    def empty(cls, block_size: int = 64) -> "Trace":
        return cls([], [], [], [], block_size)

    def __len__(self) -> int:
        return len(self.pc)

    def __getitem__(self, i: int) -> TraceRecord:
        return TraceRecord(
            int(self.pc[i]), Kind(int(self.kind[i])), int(self.target[i]), bool(self.taken[i])
        )

    def __iter__(self) -> Iterator[TraceRecord]:
        for pc, k, t, tk in zip(
            self.pc.tolist(), self.kind.tolist(), self.target.tolist(), self.taken.tolist()
        ):
            yield TraceRecord(pc, Kind(k), t, tk)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.block_size == other.block_size
            and np.array_equal(self.pc, other.pc)
            and np.array_equal(self.kind, other.kind)
            and np.array_equal(self.target, other.target)
            and np.array_equal(self.taken, other.taken)
        )

    def slice(self, start: int, stop: int) -> "Trace":
        return Trace(
            self.pc[start:stop], self.kind[start:stop], self.target[start:stop],
            self.taken[start:stop], self.block_size,
        )

    def concat(self, other: "Trace") -> "Trace":
        return Trace(
            np.concatenate([self.pc, other.pc]),
            np.concatenate([self.kind, other.kind]),
            np.concatenate([self.target, other.target]),
            np.concatenate([self.taken, other.taken]),
            self.block_size,
        )

    def validate(self) -> None:
        """Vectorised check of the record invariants."""
        if len(self) == 0:
            return
        if self.kind.max() > Kind.RETURN:
            raise MalformedRecord("kind out of range")
        plain = self.kind == Kind.PLAIN
        if np.any(plain & ((self.target != 0) | self.taken)):
            raise MalformedRecord(f"plain record with target/taken at index {int(np.argmax(plain & ((self.target != 0) | self.taken)))}")
        ctl = ~plain
        if np.any(ctl & ((self.pc == 0) | (self.target == 0))):
            raise MalformedRecord("control transfer with zero pc/target")
        always = np.isin(self.kind, [int(k) for k in ALWAYS_TAKEN])
        if np.any(always & ~self.taken):
            raise MalformedRecord("call/return/jump not taken")

    # -- binary ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        arr = np.empty(len(self), dtype=RECORD_DTYPE)
        arr["pc"] = self.pc
        arr["target"] = self.target
        arr["kind"] = self.kind
        arr["flags"] = self.taken.astype(np.uint8)
        return HEADER.pack(MAGIC, FORMAT_VERSION, self.block_size) + arr.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Trace":
        if len(data) < HEADER.size:
            raise TruncatedStream("missing trace header")
        magic, version, block_size = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise MalformedRecord(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise MalformedRecord(f"unsupported trace version {version}")
        body = data[HEADER.size :]
        n, rem = divmod(len(body), RECORD_SIZE)
        if rem:
            raise TruncatedStream(f"{rem} trailing bytes after {n} records")
        arr = np.frombuffer(body, dtype=RECORD_DTYPE, count=n)
        if n and arr["kind"].max() > Kind.RETURN:
            bad = int(np.argmax(arr["kind"] > Kind.RETURN))
            raise MalformedRecord(f"record {bad}: kind byte {arr['kind'][bad]} out of range")
        trace = cls(arr["pc"].copy(), arr["kind"].copy(), arr["target"].copy(),
                    (arr["flags"] & 1).astype(bool), block_size)
        trace.validate()
        return trace

    def save(self, path) -> None:
        path = Path(path)
        data = self.to_bytes()
        if path.suffix == ".gz":
            with gzip.open(path, "wb") as f:
                f.write(data)
        else:
            path.write_bytes(data)

    @classmethod
    def load(cls, path) -> "Trace":
        path = Path(path)
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                data = f.read()
        else:
            data = path.read_bytes()
        if data[:4] != MAGIC:
            return cls.from_text(data.decode(), source=str(path))
        return cls.from_bytes(data)

    # -- text ------------------------------------------------------------

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"# presend trace block_size={self.block_size}\n")
        out.write("# pc kind target taken\n")
        for r in self:
            out.write(f"{r.pc:#x} {_TEXT_NAMES[r.kind]} {r.target:#x} {int(r.taken)}\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str, block_size: int = 64, source: str = "<text>") -> "Trace":
        records = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                if "block_size=" in raw:
                    block_size = int(raw.split("block_size=")[1].split()[0])
                continue
            parts = line.split()
            if len(parts) != 4:
                raise MalformedRecord(f"{source}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                pc = int(parts[0], 0)
                kind = _parse_kind(parts[1])
                target = int(parts[2], 0)
                taken = bool(int(parts[3], 0))
                rec = TraceRecord(pc, kind, target, taken)
                rec.validate()
            except (ValueError, MalformedRecord) as exc:
                raise MalformedRecord(f"{source}:{lineno}: {exc}") from None
            records.append(rec)
        return cls.from_records(records, block_size)


def _parse_kind(field: str) -> Kind:
    name = field.lower()
    if name in _KIND_NAMES:
        return _KIND_NAMES[name]
    value = int(field, 0)
    if not 0 <= value <= Kind.RETURN:
        raise MalformedRecord(f"kind {value} out of range")
    return Kind(value)
