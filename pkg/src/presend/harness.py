"""Experiment orchestration: trace sourcing, single runs, sweeps and fragment statistics."""

from __future__ import annotations

import csv
import hashlib
import io
import time
from collections import Counter as Tally
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

from . import __version__
from .config import RunConfig, dump, flatten
from .frontend import Simulator
from .metrics import MetricsReport
from .progmap import RETURN, ROOT, FragmentId, Side, indirect_key
from .synth import SynthConfig, build_program, emit_trace
from .trace import Kind, Trace, TraceError


class RunError(RuntimeError):
    pass


_programs: dict = {}


def _program(synth: SynthConfig):
    # keyed by the full generator configuration
    key = tuple(flatten(synth).items())
    prog = _programs.get(key)
    if prog is None:
        if len(_programs) >= 8:
            _programs.clear()
        prog = _programs[key] = build_program(synth)
    return prog


def load_trace(cfg: RunConfig) -> Trace:
    if cfg.trace.path:
        try:
            return Trace.load(cfg.trace.path)
        except OSError as exc:
            raise RunError(f"{cfg.trace.path}: {exc.strerror}") from None
        except TraceError as exc:
            raise RunError(f"{cfg.trace.path}: {exc}") from None
    prog = _program(cfg.synth)
    return emit_trace(prog, cfg.trace.instructions, cfg.trace.seed)


def run(cfg: RunConfig, trace: Optional[Trace] = None) -> MetricsReport:
    """Simulate one configuration; deterministic for a given config."""
    cfg.validate()
    if trace is None:
        trace = load_trace(cfg)
    sim = Simulator(cfg.sim, trace.block_size)
    report = sim.run(trace)
    report.extra.update(name=cfg.name, preset=cfg.trace.preset if not cfg.trace.path else "",
                        trace=cfg.trace.path, digest=cfg.digest())
    return report


# -- sweeps --------------------------------------------------------------------------

SWEEP_PREFIX = ["name", "digest", "status", "error"]


@dataclass
class SweepRow:
    cfg: RunConfig
    report: Optional[MetricsReport] = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.report is not None


def _run_one(cfg: RunConfig) -> SweepRow:
    try:
        return SweepRow(cfg, run(cfg))
    except Exception as exc:  # isolated per row
        return SweepRow(cfg, None, f"{type(exc).__name__}: {exc}")


def sweep(configs: list, jobs: int = 1) -> list:
    """Run independent configurations; failures are reported on their own row."""
    if not configs:
        raise ValueError("sweep needs at least one configuration")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, configs))
    return [_run_one(c) for c in configs]


def sweep_digest(configs: list) -> str:
    h = hashlib.sha256()
    for c in configs:
        h.update(dump(c).encode())
    return h.hexdigest()[:16]


def sweep_csv(rows: list, timestamp: Optional[str] = None) -> str:
    """CSV with a ``#`` provenance header, then one row per run."""
    configs = [r.cfg for r in rows]
    seeds = sorted({f"{k}={v}" for c in configs for k, v in c.seeds().items()})
    if timestamp is None:
        timestamp = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    buf = io.StringIO()
    buf.write(f"# tool=presend version={__version__}\n")
    buf.write(f"# config_digest={sweep_digest(configs)} runs={len(rows)}\n")
    buf.write(f"# seeds={' '.join(seeds)}\n")
    buf.write(f"# timestamp={timestamp}\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = MetricsReport.csv_columns()
    w.writerow(SWEEP_PREFIX + cols)
    for r in rows:
        head = [r.cfg.name, r.cfg.digest(), "ok" if r.ok else "error", r.error]
        w.writerow(head + (r.report.csv_row() if r.ok else [""] * len(cols)))
    return buf.getvalue()


# -- fragment statistics ---------------------------------------------------------------

@dataclass
class FragmentStats:
    static_fragments: int
    static_fragments_95: int
    dynamic_fragments: int
    two_successor_percent: float
    multi_successor_percent: float
    mean_branches_per_fragment: float
    successors: dict  # static fragment -> set of observed successor targets

    def as_dict(self) -> dict:
        return {
            "static_fragments": self.static_fragments,
            "static_fragments_95": self.static_fragments_95,
            "dynamic_fragments": self.dynamic_fragments,
            "two_successor_percent": self.two_successor_percent,
            "multi_successor_percent": self.multi_successor_percent,
            "mean_branches_per_fragment": self.mean_branches_per_fragment,
        }


def report_fragment_stats(trace: Trace, coverage: float = 0.95) -> FragmentStats:
    """Exact offline fragment census of a trace (no table capacity limits).

    Fragments are delimited by calls and returns. A successor is the next
    fragment's call key, or RETURN for a fragment that ends in a return.
    """
    kinds = trace.kind.tolist()
    pcs = trace.pc.tolist()
    tgts = trace.target.tolist()
    weight: Tally = Tally()
    succ: dict = defaultdict(set)
    order: list = []  # dynamic fragment instances
    branches_total = 0
    stack: list = []
    cur, count, branches = ROOT, 0, 0
    for i, k in enumerate(kinds):
        count += 1
        if k == Kind.COND_BRANCH:
            branches += 1
        if k < Kind.DIRECT_CALL:
            continue
        if k == Kind.RETURN:
            target = RETURN
            nxt = FragmentId(Side.RET, stack.pop()) if stack else ROOT
        else:
            key = pcs[i] if k == Kind.DIRECT_CALL else indirect_key(pcs[i], tgts[i])
            target = key
            stack.append(key)
            nxt = FragmentId(Side.CALL, key)
        weight[cur] += count
        succ[cur].add(target)
        order.append(cur)
        branches_total += branches
        cur, count, branches = nxt, 0, 0
    if count:
        weight[cur] += count
        order.append(cur)
        branches_total += branches
        succ.setdefault(cur, set())
    total = sum(weight.values())
    covered, n95 = 0, 0
    for _, w in sorted(weight.items(), key=lambda kv: (-kv[1], kv[0])):
        if total and covered >= coverage * total:
            break
        covered += w
        n95 += 1
    dyn = len(order)
    two = sum(1 for f in order if len(succ[f]) == 2)
    more = sum(1 for f in order if len(succ[f]) > 2)
    return FragmentStats(
        static_fragments=len(weight),
        static_fragments_95=n95,
        dynamic_fragments=dyn,
        two_successor_percent=100.0 * two / dyn if dyn else 0.0,
        multi_successor_percent=100.0 * more / dyn if dyn else 0.0,
        mean_branches_per_fragment=branches_total / dyn if dyn else 0.0,
        successors=dict(succ),
    )

