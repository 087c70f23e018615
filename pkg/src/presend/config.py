"""Flat ``section.key = value`` configuration over nested dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from .frontend import Mode, SimConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class TraceSource:
    path: str = ""  # trace file to replay; empty means synthesize
    preset: str = "standard"
    machine: str = "ua1"
    instructions: int = 1_000_000
    seed: int = 1  # trace emission seed, independent of the program seed


@dataclass
class RunConfig:
    name: str = ""
    trace: TraceSource = field(default_factory=TraceSource)
    synth: SynthConfig = field(default_factory=SynthConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    def validate(self) -> None:
        self.sim.frontend.validate()
        if not self.trace.path:
            self.synth.validate()
            if self.trace.instructions < 1:
                raise ConfigError("trace.instructions must be >= 1")
        warm = self.sim.warmup_instructions
        if warm is not None and warm < 0:
            raise ConfigError("sim.warmup_instructions must be >= 0")
        if warm is not None and not self.trace.path and not self.sim.warmup_passes \
                and warm >= self.trace.instructions:
            raise ConfigError("warm-up must be shorter than the instruction budget")

    def digest(self) -> str:
        return hashlib.sha256(dump(self).encode()).hexdigest()[:16]

    def seeds(self) -> dict:
        return {k: v for k, v in flatten(self).items() if k.endswith("seed")}


# -- flatten / unflatten -------------------------------------------------------------

def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def flatten(obj, prefix: str = "") -> dict:
    """Dotted-key view of a dataclass tree, in declaration order."""
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _strip_optional(tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def parse_value(text: str, tp) -> Any:
    tp, optional = _strip_optional(tp)
    s = text.strip()
    if optional and s.lower() in ("none", ""):
        return None
    if tp is bool:
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {s!r}")
    if tp is int:
        return int(s, 0)
    if tp is float:
        return float(s)
    if isinstance(tp, type) and issubclass(tp, Enum):
        return tp(s.lower())
    return s


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Enum):
        return str(v.value)
    return str(v)


def set_key(obj, key: str, text: str) -> None:
    parts = key.split(".")
    target = obj
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(target) or not hasattr(target, p):
            raise KeyError(key)
        target = getattr(target, p)
    name = parts[-1]
    if not dataclasses.is_dataclass(target) or name not in {f.name for f in dataclasses.fields(target)}:
        raise KeyError(key)
    current = getattr(target, name)
    if dataclasses.is_dataclass(current):
        raise KeyError(key)
    setattr(target, name, parse_value(text, _hints(type(target))[name]))


# -- presets -------------------------------------------------------------------------

# workload presets: dotted overrides applied on top of the defaults
PRESETS: dict[str, dict[str, str]] = {
    "standard": {
        "synth.multi_successor_fraction": "0.05",
        "synth.gt2_successor_fraction": "0.01",
    },
    "single-successor": {
        "synth.num_functions": "250",
        "synth.multi_successor_fraction": "0",
        "synth.gt2_successor_fraction": "0",
        "synth.cond_taken_entropy": "1.0",
        "synth.seed": "3",
    },
    "fanout": {
        "synth.multi_successor_fraction": "0.076",
        "synth.gt2_successor_fraction": "0.018",
        "synth.cond_taken_entropy": "0.5",
    },
    "cold-footprint": {
        "synth.num_functions": "600",
        "synth.multi_successor_fraction": "0.02",
        "synth.gt2_successor_fraction": "0.005",
        "synth.footprint_blocks": "16384",
    },
    "high-call-fanout": {
        "synth.num_functions": "400",
        "synth.multi_successor_fraction": "0.12",
        "synth.gt2_successor_fraction": "0.06",
        "synth.indirect_call_fraction": "0.05",
        "synth.branches_per_fragment_mean": "6.0",
    },
    "loop": {
        "synth.num_functions": "120",
        "synth.loop_probability": "0.3",
        "synth.loop_trip_mean": "100",
        "synth.loop_trip_fixed": "true",
        "synth.loop_max_level": "1",
        "synth.levels": "3",
    },
}

# machine presets over widths; the backend is abstract, so only widths change
MACHINES: dict[str, dict[str, str]] = {
    "ua1": {"sim.frontend.fetch_width": "6", "sim.frontend.retire_width": "5"},
    "ua2": {"sim.frontend.fetch_width": "8", "sim.frontend.retire_width": "8"},
}


def _apply(cfg: RunConfig, overrides: dict, source: str) -> None:
    for key, text in overrides.items():
        try:
            set_key(cfg, key, text)
        except KeyError:
            raise ConfigError(f"{source}: unknown key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}") from None


def build(overrides: Optional[dict] = None, source: str = "<overrides>") -> RunConfig:
    """Defaults, then the chosen workload and machine presets, then ``overrides``."""
    overrides = dict(overrides or {})
    cfg = RunConfig()
    _apply(cfg, {k: v for k, v in overrides.items() if k.startswith("trace.")}, source)
    preset = cfg.trace.preset
    if preset not in PRESETS:
        raise ConfigError(f"{source}: unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    machine = cfg.trace.machine.lower()
    if machine not in MACHINES:
        raise ConfigError(f"{source}: unknown machine {machine!r} (choose from {', '.join(MACHINES)})")
    _apply(cfg, PRESETS[preset], f"preset {preset}")
    _apply(cfg, MACHINES[machine], f"machine {machine}")
    _apply(cfg, overrides, source)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def parse_text(text: str, source: str = "<text>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            set_key(RunConfig(), key, value)
        except KeyError:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        out[key] = value
    return out


def load(path, extra: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    overrides = parse_text(text, str(path))
    overrides.update(extra or {})
    return build(overrides, str(path))


def load_many(path) -> list:
    """A sweep file holds several configs separated by lines of ``---``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    chunks, cur, first = [], [], 1
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip() == "---":
            chunks.append((first, "\n".join(cur)))
            cur, first = [], lineno + 1
        else:
            cur.append(line)
    chunks.append((first, "\n".join(cur)))
    configs = []
    for first, body in chunks:
        if not any(line.split("#", 1)[0].strip() for line in body.splitlines()):
            continue
        src = f"{path}:{first}"
        # keep line numbers meaningful by padding the chunk
        overrides = parse_text("\n" * (first - 1) + body, str(path))
        configs.append(build(overrides, src))
    return configs


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flatten(cfg).items())


def default_config_text() -> str:
    lines = ["# presend run configuration: every key with its default",
             f"# workload presets (trace.preset): {', '.join(PRESETS)}",
             f"# machine presets (trace.machine): {', '.join(MACHINES)}",
             f"# modes (sim.mode): {', '.join(m.value for m in Mode)}",
             "# sim.warmup_instructions = none means 10% of the measured trace",
             "# sim.hierarchy.btb_entries = 0 means an ideal BTB"]
    return "\n".join(lines) + "\n" + dump(RunConfig())
