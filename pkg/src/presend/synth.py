"""Synthetic call-graph workloads and their correct-path traces.

A program is a set of functions arranged in call levels (main at level 0,
leaves at the deepest level). A function body is a sequence of stages; each
stage is a run of code blocks followed by a dispatch block whose exit
options are calls, a skip to another stage, or a return. The fragment
successor fan-out of the program is the number of exit options (or indirect
call targets) at the stage a fragment ends in.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .trace import Kind, Trace

INSTR_BYTES = 4


class InfeasibleConfig(ValueError):
    pass


@dataclass
class SynthConfig:
    num_functions: int = 300
    fragments_per_function_mean: float = 3.0
    blocks_per_fragment_min: int = 1
    blocks_per_fragment_max: int = 4
    multi_successor_fraction: float = 0.0
    gt2_successor_fraction: float = 0.0
    max_successors: int = 4
    branches_per_fragment_mean: float = 4.5
    cond_taken_entropy: float = 0.3
    loop_probability: float = 0.0
    loop_trip_mean: float = 8.0
    loop_trip_fixed: bool = False
    loop_max_level: int = 99
    recursion_probability: float = 0.0
    max_recursion_depth: int = 16
    indirect_call_fraction: float = 0.0
    optional_block_fraction: float = 0.1
    # stage bodies with 1-2 / 3-4 / 5-16 extra non-contiguous regions
    extra_regions_2: float = 0.2
    extra_regions_4: float = 0.025
    extra_regions_16: float = 0.0005
    footprint_blocks: int = 8192
    levels: int = 6
    base_address: int = 0x400000
    block_size: int = 64
    max_depth: int = 64
    calibrate: bool = True
    seed: int = 1

    def validate(self) -> None:
        for f in fields(self):
            if f.name.endswith(("_fraction", "_probability")) or f.name.startswith("extra_regions"):
                v = getattr(self, f.name)
                if not 0.0 <= v <= 1.0:
                    raise InfeasibleConfig(f"{f.name}={v} outside [0, 1]")
        if not 0.0 <= self.cond_taken_entropy <= 1.0:
            raise InfeasibleConfig("cond_taken_entropy outside [0, 1]")
        if self.num_functions < 1:
            raise InfeasibleConfig("need at least one function")
        if self.footprint_blocks < self.num_functions:
            raise InfeasibleConfig("footprint_blocks < num_functions")
        if self.multi_successor_fraction + self.gt2_successor_fraction > 1.0:
            raise InfeasibleConfig("fan-out fractions sum above 1")
        if self.max_successors < 2:
            raise InfeasibleConfig("max_successors must be >= 2")
        if not 1 <= self.blocks_per_fragment_min <= self.blocks_per_fragment_max:
            raise InfeasibleConfig("bad blocks_per_fragment range")
        if self.block_size != 64:
            raise InfeasibleConfig("generator lays out 16-instruction (64-byte) blocks")


# -- program model -------------------------------------------------------------

SLOTS = 16


@dataclass
class BodyBlock:
    block: int
    length: int = SLOTS
    branch_slots: tuple = ()
    optional: bool = False


@dataclass
class Option:
    kind: str  # "call" | "icall" | "skip" | "return"
    weight: float = 1.0
    callees: list = field(default_factory=list)
    callee_weights: list = field(default_factory=list)
    skip_to: Optional[int] = None
    self_call: bool = False

    @property
    def size(self) -> int:
        return 2 if self.kind in ("call", "icall") else 1

    @property
    def successors(self) -> int:
        return len(self.callees) if self.kind in ("call", "icall") else 1


@dataclass
class Stage:
    body: list
    dispatch: int = 0
    options: list = field(default_factory=list)
    loop_trips: float = 0.0
    loop_fixed: bool = False
    # filled by Stage.layout()
    option_slots: list = field(default_factory=list)

    @property
    def is_loop(self) -> bool:
        return self.loop_trips > 0

    def option_size(self, opt: Option) -> int:
        return opt.size + (1 if self.is_loop and opt.kind in ("call", "icall") else 0)

    def layout(self) -> None:
        k = len(self.options)
        sizes = [self.option_size(o) for o in self.options]
        slots = [0] * k
        pos = k - 1
        slots[k - 1] = pos
        pos += sizes[k - 1]
        for i in range(k - 1):
            slots[i] = pos
            pos += sizes[i]
        if pos > SLOTS:
            raise InfeasibleConfig(f"dispatch needs {pos} slots for {k} options")
        self.option_slots = slots

    @property
    def successors(self) -> int:
        return sum(o.successors for o in self.options)


@dataclass
class Function:
    name: str
    level: int
    stages: list

    @property
    def entry_block(self) -> int:
        return self.stages[0].body[0].block


@dataclass
class SynthProgram:
    functions: list
    block_size: int = 64
    config: Optional[SynthConfig] = None
    main: int = 0
    frequencies: list = field(default_factory=list)

    def __post_init__(self):
        for fn in self.functions:
            for st in fn.stages:
                st.layout()
        self._check()

    def _check(self) -> None:
        n = len(self.functions)
        for fi, fn in enumerate(self.functions):
            if not fn.stages:
                raise InfeasibleConfig(f"{fn.name} has no stages")
            for st in fn.stages:
                if not st.body or not st.options:
                    raise InfeasibleConfig(f"{fn.name}: empty stage")
                for o in st.options:
                    if o.kind in ("call", "icall") and not o.callees:
                        raise InfeasibleConfig(f"{fn.name}: call site without callee")
                    if any(not 0 <= c < n for c in o.callees):
                        raise InfeasibleConfig(f"{fn.name}: callee out of range")
        seen = {self.main}
        todo = [self.main]
        while todo:
            fn = self.functions[todo.pop()]
            for st in fn.stages:
                for o in st.options:
                    for c in o.callees:
                        if c not in seen:
                            seen.add(c)
                            todo.append(c)
        if len(seen) != n:
            raise InfeasibleConfig(f"{n - len(seen)} functions unreachable from main")

    def pc(self, block: int, slot: int = 0) -> int:
        return block * self.block_size + slot * INSTR_BYTES

    def blocks(self) -> set:
        out = set()
        for fn in self.functions:
            for st in fn.stages:
                out.update(b.block for b in st.body)
                out.add(st.dispatch)
        return out

    def fingerprint(self) -> bytes:
        """Canonical serialisation; equal programs give equal bytes."""
        parts = []
        for fn in self.functions:
            parts.append(f"F {fn.name} {fn.level}")
            for st in fn.stages:
                body = ",".join(f"{b.block}:{b.length}:{b.branch_slots}:{int(b.optional)}" for b in st.body)
                opts = ";".join(
                    f"{o.kind}:{o.weight:.6f}:{o.callees}:{[round(w, 6) for w in o.callee_weights]}:"
                    f"{o.skip_to}:{int(o.self_call)}"
                    for o in st.options
                )
                parts.append(f"S {body} D{st.dispatch} L{st.loop_trips}:{int(st.loop_fixed)} {opts}")
        return "\n".join(parts).encode()

    def fanout_fractions(self) -> tuple[float, float]:
        """Expected dynamic share of fragments with two / more than two successors."""
        w = _stage_weights(self)
        total = sum(x for _, x, _ in w)
        if total == 0:
            return 0.0, 0.0
        two = sum(x for _, x, k in w if k == 2)
        more = sum(x for _, x, k in w if k > 2)
        return two / total, more / total

    def static_fanout_fractions(self) -> tuple[float, float, int]:
        classes = [k for _, _, k in _stage_weights(self)]
        n = len(classes)
        return sum(k == 2 for k in classes) / n, sum(k > 2 for k in classes) / n, n


def _stage_weights(prog: SynthProgram):
    """(stage, expected executions per main iteration, successor count)."""
    freq = prog.frequencies or _frequencies(prog)
    out = []
    for fi, fn in enumerate(prog.functions):
        for st in fn.stages:
            trips = st.loop_trips if st.is_loop else 1.0
            out.append((st, freq[fi] * trips, _stage_successors(fn, st)))
    return out


def _stage_successors(fn: Function, st: Stage) -> int:
    k = 0
    for o in st.options:
        if o.kind == "skip":
            k += fn.stages[o.skip_to].successors if o.skip_to is not None else 1
        else:
            k += o.successors
    return k


def _frequencies(prog: SynthProgram) -> list:
    """Expected invocations per main iteration (call levels are acyclic)."""
    n = len(prog.functions)
    freq = [0.0] * n
    freq[prog.main] = 1.0
    order = sorted(range(n), key=lambda i: prog.functions[i].level)
    for fi in order:
        fn = prog.functions[fi]
        for st in fn.stages:
            trips = st.loop_trips if st.is_loop else 1.0
            total_w = sum(o.weight for o in st.options)
            for o in st.options:
                if o.kind not in ("call", "icall") or o.self_call:
                    continue
                share = freq[fi] * trips * o.weight / total_w
                cw = sum(o.callee_weights) or 1.0
                for c, w in zip(o.callees, o.callee_weights or [1.0] * len(o.callees)):
                    freq[c] += share * w / cw
    return freq


# -- construction --------------------------------------------------------------


def _level_sizes(n_rest: int, levels: int) -> list:
    if n_rest <= 0:
        return []
    levels = max(1, min(levels, n_rest))
    g = 1.6
    weights = [g ** i for i in range(levels)]
    total = sum(weights)
    sizes = [max(1, int(round(n_rest * w / total))) for w in weights]
    sizes[-1] += n_rest - sum(sizes)
    while sizes[-1] < 1:
        i = sizes.index(max(sizes))
        sizes[i] -= 1
        sizes[-1] += 1
    return sizes




def _draw_extra_regions(cfg: SynthConfig, rng: random.Random) -> int:
    u = rng.random()
    if u < cfg.extra_regions_16:
        return rng.randint(5, 16)
    u -= cfg.extra_regions_16
    if u < cfg.extra_regions_4:
        return rng.randint(3, 4)
    u -= cfg.extra_regions_4
    if u < cfg.extra_regions_2:
        return rng.randint(1, 2)
    return 0


def _poisson(rng: random.Random, lam: float) -> int:
    if lam <= 0:
        return 0
    limit, k, p = math.exp(-lam), 0, rng.random()
    while p > limit:
        k += 1
        p *= rng.random()
    return k


def _weights(rng: random.Random, k: int) -> list:
    # skewed but never negligible, so every successor shows up dynamically
    raw = [0.5 + rng.random() for _ in range(k)]
    s = sum(raw)
    return [r / s for r in raw]


def _assign_classes_and_callees(cfg, rng, levels, call_stages, p2, p3):
    """Pick per-stage successor classes level by level, tracking the expected
    dynamic fragment weight so the realised fractions follow p2/p3."""
    n = cfg.num_functions
    leaf_level = len(levels) - 1
    freq = [0.0] * n
    freq[0] = 1.0
    w_all = w2 = w3 = 0.0
    specs: dict = {}
    loops: dict = {}
    for li, ids in enumerate(levels):
        callees = levels[li + 1] if li < leaf_level else []
        items = [(f, s) for f in ids for s in range(call_stages[f] + 1)]
        rng.shuffle(items)
        classes = {}
        for f, s in items:
            is_call = s < call_stages[f]
            loop = (is_call and f != 0 and li <= cfg.loop_max_level
                    and rng.random() < cfg.loop_probability)
            loops[(f, s)] = loop
            w = freq[f] * (cfg.loop_trip_mean if loop else 1.0)
            w_all += w
            k = 1
            if is_call and f != 0 and len(callees) >= 2:
                kmax = min(cfg.max_successors, len(callees), 4)
                if kmax >= 3 and w3 + w / 2 < p3 * w_all:
                    k = rng.randint(3, kmax)
                    w3 += w
                elif w2 + w / 2 < p2 * w_all:
                    k = 2
                    w2 += w
            classes[(f, s)] = k
        slots = []
        for f in ids:
            for s in range(call_stages[f]):
                k = classes[(f, s)]
                ws = _weights(rng, k)
                if f != 0 and rng.random() < cfg.indirect_call_fraction:
                    opts = [Option("icall", 1.0, [None] * k, ws)]
                else:
                    opts = [Option("call", w, [None], [1.0]) for w in ws]
                specs[(f, s)] = opts
                slots.extend((f, s, o, i) for o in opts for i in range(len(o.callees)))
        if not callees:
            continue
        # spanning assignment: every callee gets at least one caller
        if li == 0:
            order = list(range(len(slots)))
        else:
            order = rng.sample(range(len(slots)), len(slots))
        perm = list(callees) if li == 0 else rng.sample(callees, len(callees))
        forced = dict(zip(order, perm))
        by_stage: dict = {}
        for j, (f, s, o, i) in enumerate(slots):
            by_stage.setdefault((f, s), []).append((j, o, i))
        for key, members in by_stage.items():
            used = {forced[j] for j, _, _ in members if j in forced}
            for j, o, i in members:
                c = forced.get(j)
                if c is None:
                    pool = [x for x in callees if x not in used] or callees
                    c = rng.choice(pool)
                    used.add(c)
                o.callees[i] = c
            seen = set()
            for j, o, i in members:
                # a forced duplicate inside one stage would collapse successors
                if o.callees[i] in seen:
                    pool = [x for x in callees if x not in seen]
                    if pool:
                        o.callees[i] = rng.choice(pool)
                seen.add(o.callees[i])
        for f in ids:
            for s in range(call_stages[f]):
                trips = cfg.loop_trip_mean if loops[(f, s)] else 1.0
                opts = specs[(f, s)]
                tw = sum(o.weight for o in opts)
                for o in opts:
                    cw = sum(o.callee_weights)
                    for c, w in zip(o.callees, o.callee_weights):
                        freq[c] += freq[f] * trips * (o.weight / tw) * (w / cw)
    return specs, loops, freq


def _levels(cfg, rng):
    n = cfg.num_functions
    sizes = _level_sizes(n - 1, cfg.levels)
    levels = [[0]]
    nxt = 1
    for s in sizes:
        levels.append(list(range(nxt, nxt + s)))
        nxt += s
    leaf_level = len(levels) - 1
    call_stages = [0] * n
    if leaf_level >= 1:
        call_stages[0] = len(levels[1])
    for li in range(1, leaf_level):
        for f in levels[li]:
            call_stages[f] = 1 + _poisson(rng, max(0.0, cfg.fragments_per_function_mean - 2.0))
        need, have = len(levels[li + 1]), sum(call_stages[f] for f in levels[li])
        while have < need:
            call_stages[rng.choice(levels[li])] += 1
            have += 1
    return levels, call_stages


def _build(cfg: SynthConfig, p2: float, p3: float) -> SynthProgram:
    rng = random.Random(cfg.seed)
    levels, call_stages = _levels(cfg, rng)
    specs, loops, freq = _assign_classes_and_callees(cfg, rng, levels, call_stages, p2, p3)
    level_of = {f: li for li, ids in enumerate(levels) for f in ids}
    leaf_level = len(levels) - 1

    base = cfg.base_address // cfg.block_size
    cursor = 0
    pending = []  # (body list, count of extra regions)
    functions = []
    for f in range(cfg.num_functions):
        stages = []
        for s in range(call_stages[f] + 1):
            nb = rng.randint(cfg.blocks_per_fragment_min, cfg.blocks_per_fragment_max)
            body = []
            for i in range(nb):
                opt = i > 0 and rng.random() < cfg.optional_block_fraction
                body.append(BodyBlock(base + cursor + i, SLOTS, (), opt))
            dispatch = base + cursor + nb
            cursor += nb + 1
            if s < call_stages[f]:
                opts = specs[(f, s)]
                trips = cfg.loop_trip_mean if loops[(f, s)] else 0.0
            elif f == 0:
                opts, trips = [Option("skip", 1.0, skip_to=0)], 0.0
            else:
                opts, trips = [Option("return")], 0.0
            st = Stage(body, dispatch, list(opts), trips, cfg.loop_trip_fixed)
            stages.append(st)
            nx = _draw_extra_regions(cfg, rng)
            if nx:
                pending.append((st, nx))
        if f in _recursive(cfg, rng, f, level_of, leaf_level):
            cands = [st for st in stages[:-1] if not st.is_loop and len(st.options) < 5]
            if cands:
                st = rng.choice(cands)
                tw = sum(o.weight for o in st.options)
                st.options.append(Option("call", tw, [f], [1.0], self_call=True))
        functions.append(Function(f"f{f}", level_of[f], stages))
    if cursor > cfg.footprint_blocks:
        raise InfeasibleConfig(
            f"{cursor} primary code blocks exceed footprint_blocks={cfg.footprint_blocks}")

    used = set()
    lo = cursor + 2
    for st, nx in pending:
        extras = []
        for _ in range(nx):
            size = rng.randint(1, 2)
            start = _scatter(rng, used, lo, cfg.footprint_blocks, size)
            if start is None:
                raise InfeasibleConfig("no room for extra regions inside footprint_blocks")
            extras.extend(BodyBlock(base + start + j) for j in range(size))
        st.body.extend(extras)

    for fn in functions:
        for st in fn.stages:
            _fix_lengths(rng, st)
    prog = SynthProgram(functions, cfg.block_size, cfg)
    prog.frequencies = freq
    return prog


def _recursive(cfg, rng, f, level_of, leaf_level):
    if f == 0 or level_of[f] >= leaf_level or cfg.recursion_probability <= 0:
        return ()
    return (f,) if rng.random() < cfg.recursion_probability else ()


def _scatter(rng, used, lo, hi, size):
    for _ in range(200):
        if lo + size + 1 >= hi:
            return None
        start = rng.randrange(lo, hi - size)
        if not any(b in used for b in range(start - 1, start + size + 1)):
            used.update(range(start, start + size))
            return start
    return None


def _successor_blocks(st: Stage) -> list:
    return [b.block for b in st.body[1:]] + [st.dispatch]


def _falls_through(st: Stage, i: int) -> bool:
    b = st.body[i]
    return b.length == SLOTS and _successor_blocks(st)[i] == b.block + 1


def _fix_lengths(rng, st: Stage) -> None:
    for b, nxt in zip(st.body, _successor_blocks(st)):
        b.length = SLOTS if nxt == b.block + 1 else rng.randint(8, SLOTS)


def _assign_branches(prog: SynthProgram, per_block: float, seed: int) -> None:
    rng = random.Random(seed ^ 0x5EED)
    for fn in prog.functions:
        for st in fn.stages:
            after = st.body[1:] + [None]
            for i, b in enumerate(st.body):
                room = b.length if _falls_through(st, i) else b.length - 1
                k = _poisson(rng, per_block)
                if after[i] is not None and after[i].optional:
                    k = max(k, 1)
                b.branch_slots = tuple(sorted(rng.sample(range(room), min(k, room))))


def build_program(cfg: SynthConfig) -> SynthProgram:
    """Deterministic in cfg (including cfg.seed)."""
    cfg.validate()
    p2, p3 = cfg.multi_successor_fraction, cfg.gt2_successor_fraction
    prog = _build(cfg, p2, p3)
    if cfg.calibrate and (p2 > 0 or p3 > 0):
        # leaves and main dilute the fractions; rescale the targets and rebuild
        for _ in range(4):
            g2, g3 = prog.fanout_fractions()
            if abs(g2 - cfg.multi_successor_fraction) < 0.002 and abs(g3 - cfg.gt2_successor_fraction) < 0.002:
                break
            p2 = min(1.0, p2 * (cfg.multi_successor_fraction / g2 if g2 else 2.0))
            p3 = min(1.0, p3 * (cfg.gt2_successor_fraction / g3 if g3 else 2.0))
            prog = _build(cfg, p2, p3)
    per_block = _branches_per_block_guess(prog, cfg)
    _assign_branches(prog, per_block, cfg.seed)
    if cfg.calibrate and cfg.branches_per_fragment_mean > 0:
        for _ in range(3):
            got = measure_branch_density(prog, 60_000, cfg.seed)
            if got <= 0 or abs(got / cfg.branches_per_fragment_mean - 1) < 0.03:
                break
            per_block *= cfg.branches_per_fragment_mean / got
            _assign_branches(prog, per_block, cfg.seed)
    return prog


def _branches_per_block_guess(prog: SynthProgram, cfg: SynthConfig) -> float:
    # dispatch decisions supply some branches; the rest is spread over body blocks
    blocks = [len(st.body) for fn in prog.functions for st in fn.stages]
    mean_blocks = sum(blocks) / len(blocks)
    return max(0.0, (cfg.branches_per_fragment_mean - 0.3) / max(mean_blocks, 1.0))


def measure_branch_density(prog: SynthProgram, n: int, seed: int) -> float:
    """Conditional branches per fragment in an emitted trace."""
    tr = emit_trace(prog, n, seed)
    kinds = tr.kind
    frags = int(np.count_nonzero(kinds >= Kind.DIRECT_CALL))
    branches = int(np.count_nonzero(kinds == Kind.COND_BRANCH))
    return branches / max(frags, 1)


class _StageCode:
    """Per-stage addresses precomputed for the emitter."""

    __slots__ = ("start", "blocks", "succ", "skip", "falls", "dispatch", "slots", "weights")

    def __init__(self, st: Stage, bs: int):
        succ = _successor_blocks(st)
        n = len(st.body)
        self.start = st.body[0].block * bs
        self.blocks = st.body
        self.succ = [b * bs for b in succ]
        self.skip = [
            (self.succ[i + 1] if i + 1 < n and st.body[i + 1].optional else self.succ[i], i + 1 < n and st.body[i + 1].optional)
            for i in range(n)
        ]
        self.falls = [_falls_through(st, i) for i in range(n)]
        self.dispatch = st.dispatch * bs
        self.slots = st.option_slots
        self.weights = [o.weight for o in st.options]


def _trips(rng: random.Random, st: Stage) -> int:
    if st.loop_fixed or st.loop_trips <= 1:
        return max(1, int(round(st.loop_trips)))
    q = 1.0 - 1.0 / st.loop_trips
    return 1 + int(math.log(1.0 - rng.random()) / math.log(q))


def emit_trace(prog: SynthProgram, n_instructions: int, seed: int = 0) -> Trace:
    """Correct-path trace of exactly n_instructions records, deterministic in seed."""
    rng = random.Random(seed)
    cfg = prog.config or SynthConfig()
    stay = 1.0 - cfg.cond_taken_entropy / 2.0
    max_rec = cfg.max_recursion_depth
    max_depth = cfg.max_depth
    bs = prog.block_size
    code = [[_StageCode(st, bs) for st in fn.stages] for fn in prog.functions]
    entry = [c[0].start for c in code]
    last: dict = {}
    zeros = [0] * SLOTS
    pcs: list = []
    kinds: list = []
    tgts: list = []
    tkn: list = []
    push_pc, push_k, push_t, push_x = pcs.append, kinds.append, tgts.append, tkn.append

    def plain(pc0: int, count: int) -> None:
        if count > 0:
            pcs.extend(range(pc0, pc0 + 4 * count, 4))
            kinds.extend(zeros[:count])
            tgts.extend(zeros[:count])
            tkn.extend(zeros[:count])

    def rec(pc: int, kind: int, target: int, taken: int) -> None:
        push_pc(pc)
        push_k(kind)
        push_t(target)
        push_x(taken)

    def outcome(pc: int) -> int:
        prev = last.get(pc)
        if prev is None:
            prev = rng.random() < 0.5
        out = prev if rng.random() < stay else not prev
        last[pc] = out
        return int(out)

    f, s = prog.main, 0
    stack: list = []
    active = [0] * len(prog.functions)
    loop_left = _trips(rng, prog.functions[f].stages[0]) if prog.functions[f].stages[0].is_loop else 0
    while len(pcs) < n_instructions:
        st = prog.functions[f].stages[s]
        sc = code[f][s]
        body = sc.blocks
        i, nb = 0, len(body)
        while i < nb:
            b = body[i]
            base = b.block * bs
            pos = 0
            moved = False
            for slot in b.branch_slots:
                plain(base + 4 * pos, slot - pos)
                tgt, skips = sc.skip[i]
                t = outcome(base + 4 * slot)
                rec(base + 4 * slot, 1, tgt, t)
                if t:
                    i += 2 if skips else 1
                    moved = True
                    break
                pos = slot + 1
            if moved:
                continue
            if sc.falls[i]:
                plain(base + 4 * pos, b.length - pos)
            elif pos < b.length:
                plain(base + 4 * pos, b.length - 1 - pos)
                rec(base + 4 * (b.length - 1), 2, sc.succ[i], 1)
            i += 1

        opts = st.options
        k = len(opts)
        weights = sc.weights
        if any(o.self_call for o in opts) and (active[f] >= max_rec or len(stack) >= max_depth):
            weights = [0.0 if o.self_call else w for o, w in zip(opts, weights)]
        o = rng.choices(range(k), weights)[0] if k > 1 else 0
        d = sc.dispatch
        for j in range(min(o, k - 1)):
            rec(d + 4 * j, 1, d + 4 * sc.slots[j], 0)
        if o < k - 1:
            rec(d + 4 * o, 1, d + 4 * sc.slots[o], 1)
        opt = opts[o]
        at = d + 4 * sc.slots[o]
        if opt.kind in ("call", "icall"):
            if len(opt.callees) > 1:
                c = rng.choices(opt.callees, opt.callee_weights)[0]
            else:
                c = opt.callees[0]
            rec(at, 3 if opt.kind == "call" else 4, entry[c], 1)
            stack.append((f, s, at + 4, loop_left))
            active[c] += 1
            f, s = c, 0
        elif opt.kind == "skip":
            rec(at, 2, code[f][opt.skip_to].start, 1)
            s = opt.skip_to
        else:
            if not stack:
                f, s = prog.main, 0
                rec(at, 2, entry[f], 1)
                continue
            cf, cs, ret_pc, left = stack.pop()
            rec(at, 5, ret_pc, 1)
            active[f] -= 1
            f, s, loop_left = cf, cs, left
            cst = prog.functions[f].stages[s]
            if cst.is_loop:
                loop_left -= 1
                again = int(loop_left > 0)
                rec(ret_pc, 1, code[f][s].start, again)
                if again:
                    continue
                ret_pc += 4
            s += 1
            rec(ret_pc, 2, code[f][s].start, 1)
        nst = prog.functions[f].stages[s]
        loop_left = _trips(rng, nst) if nst.is_loop else 0

    n = n_instructions
    return Trace(
        np.asarray(pcs[:n], dtype=np.uint64),
        np.asarray(kinds[:n], dtype=np.uint8),
        np.asarray(tgts[:n], dtype=np.uint64),
        np.asarray(tkn[:n], dtype=bool),
        block_size=bs,
    )
