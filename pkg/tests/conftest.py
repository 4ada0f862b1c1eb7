from __future__ import annotations

from pathlib import Path

import pytest

from kernelmem.task import CandidateKernel, Task
from kernelmem.verifier.outcome import VerifierOutcome, infeasible

FIXTURES = Path(__file__).parent / "fixtures"

_CRITERIA: dict[int, tuple[str, str]] = {}


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


def make_task(task_id: str = "t1", **kwargs) -> Task:
    kwargs.setdefault("reference_spec", "def forward(x): return x")
    return Task(id=task_id, **kwargs)


def feasible(latency: float) -> VerifierOutcome:
    return VerifierOutcome(True, True, True, latency_ms=latency, latency_samples=(latency,), evaluated=("hack", "comp", "corr"))


def failed_compile() -> VerifierOutcome:
    return infeasible(g_hack=True, error="compile error", evaluated=("hack", "comp"))


def candidate(sections: dict[str, str], cid: str = "c1", iteration: int = 1) -> CandidateKernel:
    return CandidateKernel(id=cid, source_sections=sections, iteration=iteration)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        previous = _CRITERIA.get(number)
        # A criterion split over several tests passes only if every part passes.
        if previous is None or previous[1] == "PASS":
            _CRITERIA[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}")
