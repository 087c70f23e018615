import gzip

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from presend.trace import (
    ALWAYS_TAKEN, RECORD_SIZE, InvalidGeometry, Kind, MalformedRecord, Trace, TraceRecord,
    TruncatedStream, block_of, decode_record, encode_record, iter_records, page_of,
)

addr = st.integers(min_value=1, max_value=(1 << 64) - 1)


@st.composite
def records(draw):
    kind = draw(st.sampled_from(list(Kind)))
    pc = draw(addr)
    if kind == Kind.PLAIN:
        return TraceRecord(pc)
    taken = True if kind in ALWAYS_TAKEN else draw(st.booleans())
    return TraceRecord(pc, kind, draw(addr), taken)


def test_plain_record_layout():
    data = encode_record(TraceRecord(0x400000))
    assert data == bytes([0x00, 0x00, 0x40, 0x00, 0, 0, 0, 0]) + bytes(8) + b"\x00\x00"
    assert len(data) == RECORD_SIZE


def test_call_kind_and_flags_bytes():
    data = encode_record(TraceRecord(0x1000, Kind.DIRECT_CALL, 0x2000, True))
    assert data[16] == 3
    assert data[17] == 1


@settings(max_examples=10_000, deadline=None)
@given(records())
def test_record_round_trip(rec):
    assert decode_record(encode_record(rec)) == rec


def test_bad_kind_byte():
    data = bytearray(encode_record(TraceRecord(0x1000, Kind.UNCOND_JUMP, 0x2000, True)))
    data[16] = 7
    with pytest.raises(MalformedRecord):
        decode_record(bytes(data))


def test_truncated_tail_after_three_records():
    recs = [TraceRecord(0x1000 + 4 * i) for i in range(3)]
    data = b"".join(encode_record(r) for r in recs) + b"\x01" * 5
    got = []
    with pytest.raises(TruncatedStream):
        for r in iter_records(data):
            got.append(r)
    assert got == recs


@pytest.mark.parametrize("rec", [
    TraceRecord(0x1000, Kind.PLAIN, 0x10, False),
    TraceRecord(0x1000, Kind.PLAIN, 0, True),
    TraceRecord(0x1000, Kind.DIRECT_CALL, 0x2000, False),
    TraceRecord(0x1000, Kind.RETURN, 0, True),
])
def test_invalid_records_rejected(rec):
    with pytest.raises(MalformedRecord):
        rec.validate()


@pytest.mark.parametrize("pc, block", [(0x1040, 0x41), (0x0, 0x0), (0xFFFF, 0x3FF)])
def test_block_of(pc, block):
    assert block_of(pc, 64) == block


def test_page_of_and_geometry():
    assert page_of(0x12345, 4096) == 0x12
    with pytest.raises(InvalidGeometry):
        block_of(0x100, 48)


@settings(max_examples=50, deadline=None)
@given(st.lists(records(), max_size=200))
def test_trace_binary_and_text_round_trip(recs):
    tr = Trace.from_records(recs)
    assert Trace.from_bytes(tr.to_bytes()) == tr
    assert Trace.from_text(tr.to_text()) == tr
    assert list(tr) == recs


def test_save_load_gzip(tmp_path):
    tr = Trace.from_records([TraceRecord(0x40), TraceRecord(0x44, Kind.COND_BRANCH, 0x40, True)])
    for name in ("t.bin", "t.bin.gz"):
        tr.save(tmp_path / name)
        assert Trace.load(tmp_path / name) == tr
    with gzip.open(tmp_path / "t.bin.gz", "rb") as f:
        assert f.read(4) == b"PSTR"


def test_text_errors_name_the_line():
    with pytest.raises(MalformedRecord, match="<text>:2"):
        Trace.from_text("0x40 plain 0 0\n0x44 call 0x80\n")
    with pytest.raises(MalformedRecord):
        Trace.from_text("0x40 9 0x80 1\n")


def test_bad_header_and_trailing_bytes():
    tr = Trace.from_records([TraceRecord(0x40)])
    with pytest.raises(MalformedRecord):
        Trace.from_bytes(b"XXXX" + tr.to_bytes()[4:])
    with pytest.raises(TruncatedStream):
        Trace.from_bytes(tr.to_bytes() + b"\x00")


def test_slice_and_concat():
    tr = Trace.from_records([TraceRecord(0x40 + 4 * i) for i in range(10)])
    assert tr.slice(0, 4).concat(tr.slice(4, 10)) == tr
    assert len(Trace.empty()) == 0
