"""Command line: ``synth``, ``run``, ``sweep``, ``stats`` and ``--print-default-config``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError
from .harness import RunError, load_trace, report_fragment_stats, run, sweep, sweep_csv
from .synth import InfeasibleConfig
from .trace import Trace, TraceError


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> cfgmod.RunConfig:
    extra = _overrides(args.set)
    if getattr(args, "preset", None):
        extra.setdefault("trace.preset", args.preset)
    if getattr(args, "mode", None):
        extra.setdefault("sim.mode", args.mode)
    if getattr(args, "instructions", None):
        extra.setdefault("trace.instructions", str(args.instructions))
    if getattr(args, "trace", None):
        extra.setdefault("trace.path", args.trace)
    if args.config:
        return cfgmod.load(args.config, extra)
    return cfgmod.build(extra, "<command line>")


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_synth(args) -> int:
    cfg = _config(args)
    tr = load_trace(cfg)
    out = Path(args.output)
    if out.suffix == ".txt":
        out.write_text(tr.to_text())
    else:
        tr.save(out)
    print(json.dumps({"output": str(out), "instructions": len(tr), "digest": cfg.digest()}))
    return 0


def cmd_run(args) -> int:
    report = run(_config(args))
    report.check_algebra()
    _emit(report.to_csv() if args.format == "csv" else report.to_json() + "\n", args.output)
    return 0


def cmd_sweep(args) -> int:
    configs = cfgmod.load_many(args.sweep_file)
    rows = sweep(configs, jobs=args.jobs)
    _emit(sweep_csv(rows), args.output)
    return 0 if all(r.ok for r in rows) else 3


def cmd_stats(args) -> int:
    if args.trace_file:
        tr = Trace.load(args.trace_file)
    else:
        tr = load_trace(_config(args))
    stats = report_fragment_stats(tr)
    print(json.dumps(stats.as_dict(), indent=2, sort_keys=True))
    return 0


def _common(p) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--preset", help="workload preset")


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="presend", description=__doc__)
    ap.add_argument("--print-default-config", action="store_true",
                    help="print every config key with its default and exit")
    sub = ap.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic trace")
    _common(p)
    p.add_argument("--instructions", type=int)
    p.add_argument("-o", "--output", required=True, help="trace file (.trace, .gz or .txt)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="simulate one configuration")
    _common(p)
    p.add_argument("--mode", help="fdip, presend, presend_btb_only or presend_itlb_only")
    p.add_argument("--trace", help="replay this trace file instead of synthesizing")
    p.add_argument("--instructions", type=int)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a list of configurations into one CSV")
    p.add_argument("sweep_file", help="configs separated by lines containing ---")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="offline fragment statistics")
    _common(p)
    p.add_argument("trace_file", nargs="?")
    p.add_argument("--instructions", type=int)
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None) -> int:
    ap = parser()
    args = ap.parse_args(argv)
    if args.print_default_config:
        sys.stdout.write(cfgmod.default_config_text())
        return 0
    if not args.command:
        ap.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, InfeasibleConfig) as exc:
        return _fail("config", exc, 2)
    except (TraceError, RunError, OSError) as exc:
        return _fail("input", exc, 1)
    except ValueError as exc:
        return _fail("value", exc, 1)


def _fail(kind: str, exc: Exception, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code
