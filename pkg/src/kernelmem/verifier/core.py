"""Multi-gate verification: anti-hack -> compile -> correctness, then latency."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

from ..errors import InfraError
from ..task import CandidateKernel, Task
from .backends import BackendRequest, BackendResponse, VerifierBackend
from .outcome import LatencyStats, MismatchKind, MismatchReport, VerifierOutcome, infeasible
from .rules import Auditor, AuditorPolicy, HackRuleSet, check_anti_hack

log = logging.getLogger(__name__)


def aggregate_latency(samples: Sequence[float]) -> LatencyStats:
    """Mean, population std, min and max of per-pass latencies (ms)."""
    if not samples:
        raise ValueError("aggregate_latency needs at least one sample")
    values = tuple(float(s) for s in samples)
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return LatencyStats(mean=mean, std=math.sqrt(var), min=min(values), max=max(values), samples=values)


@dataclass(frozen=True)
class Timeouts:
    correctness_s: float = 60.0
    # Ceiling for one whole verification call (compile + run + profile).
    call_ceiling_s: float = 3900.0


def classify_error(text: str) -> MismatchKind:
    lowered = text.lower()
    if "timed out" in lowered or "timeout" in lowered:
        return MismatchKind.TIMEOUT
    if "shape mismatch" in lowered:
        return MismatchKind.SHAPE
    if lowered.startswith("type(") or "type(output) mismatch" in lowered:
        return MismatchKind.TYPE
    if "len(output) mismatch" in lowered:
        return MismatchKind.LENGTH
    if "mismatch" in lowered:
        return MismatchKind.NUMERIC
    return MismatchKind.RUNTIME


def _correctness_report(response: BackendResponse, timeouts: Timeouts) -> MismatchReport:
    if response.mismatch is not None:
        return response.mismatch
    text = response.error or "[FAIL] correctness check failed"
    kind = classify_error(text)
    if kind is MismatchKind.TIMEOUT:
        text = f"[FAIL] First correctness run timed out after {timeouts.correctness_s:g}s"
    return MismatchReport(kind, text)


def verify(
    task: Task,
    candidate: CandidateKernel,
    backend: VerifierBackend,
    rules: HackRuleSet | None = None,
    timeouts: Timeouts = Timeouts(),
    auditor: Auditor | None = None,
    auditor_policy: AuditorPolicy | str = AuditorPolicy.FAIL_OPEN,
) -> VerifierOutcome:
    """Evaluate the gates in order with short-circuit.

    A failing hack gate means the backend is never invoked. Backend
    :class:`InfraError` propagates so the caller can retry; any other
    backend exception becomes a ``runtime`` failure outcome.
    """
    rules = rules or HackRuleSet()
    screen = check_anti_hack(candidate, rules, auditor=auditor, task=task, policy=auditor_policy)
    if not screen.passed:
        text = "\n".join(v.message for v in screen.violations)
        return infeasible(error=text, evaluated=("hack",), violations=screen.violations)

    request = BackendRequest(
        task_id=task.id,
        sections=dict(candidate.source_sections),
        atol=task.atol,
        rtol=task.rtol,
        timeout_s=timeouts.correctness_s,
    )
    try:
        response = backend.evaluate(request)
    except InfraError:
        raise
    except Exception as exc:
        log.warning("backend crashed on %s: %s", candidate.id, exc)
        report = MismatchReport(MismatchKind.RUNTIME, f"[FAIL] backend crashed: {type(exc).__name__}: {exc}")
        return infeasible(g_hack=True, error=report, evaluated=("hack", "comp"))

    if not response.compiled:
        return infeasible(g_hack=True, error=response.error or "compilation failed", evaluated=("hack", "comp"))
    if not response.correct:
        return infeasible(
            g_hack=True, g_comp=True, error=_correctness_report(response, timeouts), evaluated=("hack", "comp", "corr")
        )
    positive = [s for s in response.latency_samples if s > 0]
    if not positive or len(positive) != len(response.latency_samples):
        report = MismatchReport(MismatchKind.RUNTIME, "[FAIL] backend reported no usable latency samples")
        return infeasible(g_hack=True, g_comp=True, error=report, evaluated=("hack", "comp", "corr"))
    stats = aggregate_latency(response.latency_samples)
    return VerifierOutcome(
        g_hack=True,
        g_comp=True,
        g_corr=True,
        latency_ms=stats.mean,
        latency_samples=stats.samples,
        profiling_digest=response.profiling,
        evaluated=("hack", "comp", "corr"),
    )


class Verifier:
    """Bundles a backend with its rule set and timeouts for the orchestrator."""

    def __init__(
        self,
        backend: VerifierBackend,
        rules: HackRuleSet | None = None,
        timeouts: Timeouts = Timeouts(),
        auditor: Auditor | None = None,
        auditor_policy: AuditorPolicy | str = AuditorPolicy.FAIL_OPEN,
    ) -> None:
        self.backend = backend
        self.rules = rules or HackRuleSet()
        self.timeouts = timeouts
        self.auditor = auditor
        self.auditor_policy = AuditorPolicy(auditor_policy)

    def verify(self, task: Task, candidate: CandidateKernel) -> VerifierOutcome:
        return verify(task, candidate, self.backend, self.rules, self.timeouts, self.auditor, self.auditor_policy)
