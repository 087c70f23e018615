"""Small hand-written traces used by tests and the acceptance suite."""

from __future__ import annotations

from .trace import Kind, Trace, TraceRecord

BLOCK = 64


def pc(block: int, slot: int = 0) -> int:
    return block * BLOCK + slot * 4


# call sites of the three-fragment example: A calls B, B's continuation calls C
A = pc(100, 0)
B = pc(10, 15)
C = pc(27, 8)


def fig4_records(both_paths: bool = True) -> list:
    """A -> B -> (return) -> C, then A again taking the path that skips B.

    Block numbers follow the worked example: region B1..B2 plus B10 leads to
    the call of B; B's body spans B14..B15; its continuation covers B26..B27
    and calls C. The second visit of A branches from B10 to B27 and calls C
    directly, giving A a second successor.
    """
    recs: list = []

    def run(block: int, n: int, start: int = 0) -> None:
        recs.extend(TraceRecord(pc(block, start + i)) for i in range(n))

    recs.append(TraceRecord(A, Kind.DIRECT_CALL, pc(1), True))
    run(1, 5)
    run(2, 4)
    run(10, 2, 13)
    recs.append(TraceRecord(B, Kind.DIRECT_CALL, pc(14), True))
    run(14, 6)
    run(15, 4)
    recs.append(TraceRecord(pc(15, 4), Kind.RETURN, pc(26), True))
    run(26, 3)
    run(27, 3, 5)
    recs.append(TraceRecord(C, Kind.DIRECT_CALL, pc(20), True))
    run(20, 3)
    recs.append(TraceRecord(pc(21), Kind.RETURN, C + 4, True))
    run(27, 2, 9)
    recs.append(TraceRecord(pc(27, 11), Kind.RETURN, A + 4, True))
    run(100, 2, 1)
    if both_paths:
        recs.append(TraceRecord(A, Kind.DIRECT_CALL, pc(1), True))
        run(1, 5)
        run(2, 4)
        run(10, 2, 13)
        run(27, 2, 6)
        recs.append(TraceRecord(C, Kind.DIRECT_CALL, pc(20), True))
    return recs


def fig4_trace(both_paths: bool = True) -> Trace:
    return Trace.from_records(fig4_records(both_paths))


def straight_line(n_blocks: int, base_block: int = 0x1000) -> Trace:
    """Plain instructions walking ``n_blocks`` consecutive blocks once."""
    recs = [TraceRecord(pc(base_block + b, s)) for b in range(n_blocks) for s in range(16)]
    return Trace.from_records(recs)


def block_loop(iterations: int, block: int = 0x2000) -> Trace:
    """One block whose last instruction jumps back to its first."""
    recs = []
    for _ in range(iterations):
        recs.extend(TraceRecord(pc(block, s)) for s in range(15))
        recs.append(TraceRecord(pc(block, 15), Kind.UNCOND_JUMP, pc(block), True))
    return Trace.from_records(recs)


LOOP_HEAD = 0x3000
LOOP_LEAF = 0x5000
LOOP_EXIT = 0x3001
LOOP_EXIT_CALLEE = 0x6000


def call_loop(iterations: int = 100, episodes: int = 4, filler: int = 64) -> Trace:
    """A two-fragment loop: the head block calls a leaf, then branches back.

    After ``iterations`` laps the branch falls through to the exit block,
    which calls another function and then sweeps ``filler`` 8-block callees
    so the next episode starts with a cold L1i but warm tables.
    """
    recs: list = []
    call_site = pc(LOOP_HEAD, 14)
    for _ in range(episodes):
        for it in range(iterations):
            recs.extend(TraceRecord(pc(LOOP_HEAD, s)) for s in range(14))
            recs.append(TraceRecord(call_site, Kind.DIRECT_CALL, pc(LOOP_LEAF), True))
            recs.extend(TraceRecord(pc(LOOP_LEAF, s)) for s in range(15))
            recs.append(TraceRecord(pc(LOOP_LEAF, 15), Kind.RETURN, call_site + 4, True))
            again = it + 1 < iterations
            recs.append(TraceRecord(pc(LOOP_HEAD, 15), Kind.COND_BRANCH,
                                    pc(LOOP_HEAD), again))
        recs.extend(TraceRecord(pc(LOOP_EXIT, s)) for s in range(15))
        recs.append(TraceRecord(pc(LOOP_EXIT, 15), Kind.DIRECT_CALL, pc(LOOP_EXIT_CALLEE), True))
        recs.extend(TraceRecord(pc(LOOP_EXIT_CALLEE, s)) for s in range(15))
        recs.append(TraceRecord(pc(LOOP_EXIT_CALLEE, 15), Kind.RETURN, pc(LOOP_EXIT + 1), True))
        for i in range(filler):
            site = pc(LOOP_EXIT + 1 + i, 15)
            recs.extend(TraceRecord(pc(LOOP_EXIT + 1 + i, s)) for s in range(15))
            callee = 0x8000 + 8 * i
            recs.append(TraceRecord(site, Kind.DIRECT_CALL, pc(callee), True))
            recs.extend(TraceRecord(pc(callee + b, s)) for b in range(8) for s in range(16))
            recs[-1] = TraceRecord(pc(callee + 7, 15), Kind.RETURN, site + 4, True)
        tail = LOOP_EXIT + 1 + filler
        recs.extend(TraceRecord(pc(tail, s)) for s in range(15))
        recs.append(TraceRecord(pc(tail, 15), Kind.UNCOND_JUMP, pc(LOOP_HEAD), True))
    return Trace.from_records(recs)


REC_MAIN = 0x3800
REC_BODY = 0x4000
REC_UNWIND = 0x4001


def self_recursion(depth: int = 10, episodes: int = 6) -> Trace:
    """A function that calls itself ``depth`` times, then unwinds."""
    recs: list = []
    site = pc(REC_BODY, 15)
    for _ in range(episodes):
        recs.extend(TraceRecord(pc(REC_MAIN, s)) for s in range(15))
        recs.append(TraceRecord(pc(REC_MAIN, 15), Kind.DIRECT_CALL, pc(REC_BODY), True))
        for _ in range(depth):
            recs.extend(TraceRecord(pc(REC_BODY, s)) for s in range(15))
            recs.append(TraceRecord(site, Kind.DIRECT_CALL, pc(REC_BODY), True))
        recs.extend(TraceRecord(pc(REC_BODY, s)) for s in range(15))
        recs.append(TraceRecord(site, Kind.UNCOND_JUMP, pc(REC_UNWIND), True))
        # every return lands right after the call site, which is the unwind block
        for _ in range(depth):
            recs.extend(TraceRecord(pc(REC_UNWIND, s)) for s in range(15))
            recs.append(TraceRecord(pc(REC_UNWIND, 15), Kind.RETURN, site + 4, True))
        recs.extend(TraceRecord(pc(REC_UNWIND, s)) for s in range(15))
        recs.append(TraceRecord(pc(REC_UNWIND, 15), Kind.RETURN, pc(REC_MAIN, 15) + 4, True))
        recs.extend(TraceRecord(pc(REC_MAIN + 1, s)) for s in range(15))
        recs.append(TraceRecord(pc(REC_MAIN + 1, 15), Kind.UNCOND_JUMP, pc(REC_MAIN), True))
    return Trace.from_records(recs)


def oversized_loop(callees: int = 48, blocks_each: int = 16, laps: int = 4) -> Trace:
    """A loop whose body calls enough code to overflow a 512-block L1i."""
    recs: list = []
    head = 0x2800
    for _ in range(laps):
        for i in range(callees):
            site = pc(head + i, 15)
            recs.extend(TraceRecord(pc(head + i, s)) for s in range(15))
            callee = 0x10000 + blocks_each * i
            recs.append(TraceRecord(site, Kind.DIRECT_CALL, pc(callee), True))
            recs.extend(TraceRecord(pc(callee + b, s)) for b in range(blocks_each) for s in range(16))
            recs[-1] = TraceRecord(pc(callee + blocks_each - 1, 15), Kind.RETURN, site + 4, True)
        recs.extend(TraceRecord(pc(head + callees, s)) for s in range(15))
        recs.append(TraceRecord(pc(head + callees, 15), Kind.UNCOND_JUMP, pc(head), True))
    return Trace.from_records(recs)
