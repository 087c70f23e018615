import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from presend import config as C  # noqa: E402
from presend import harness as H  # noqa: E402

CRITERIA: dict = {}


def record(number: int, ok: bool, detail: str) -> bool:
    """Note one part of a criterion; the summary line passes only if every part did."""
    CRITERIA.setdefault(number, []).append((ok, detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        parts = CRITERIA[n]
        ok = all(p[0] for p in parts)
        detail = "; ".join(p[1] for p in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


class Workloads:
    """Synthetic traces and cached runs shared across the acceptance tests."""

    def __init__(self, instructions: int = 300_000):
        self.instructions = instructions
        self._traces: dict = {}
        self._runs: dict = {}

    def base(self, preset: str) -> dict:
        return {"trace.preset": preset, "trace.instructions": str(self.instructions),
                "sim.warmup_passes": "1"}

    def config(self, preset: str, **overrides) -> C.RunConfig:
        o = self.base(preset)
        o.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
        return C.build(o)

    def trace(self, preset: str):
        if preset not in self._traces:
            self._traces[preset] = H.load_trace(self.config(preset))
        return self._traces[preset]

    def run(self, preset: str, **overrides):
        key = (preset, tuple(sorted(overrides.items())))
        if key not in self._runs:
            self._runs[key] = H.run(self.config(preset, **overrides), self.trace(preset))
        return self._runs[key]


@pytest.fixture(scope="session")
def workloads():
    return Workloads()
