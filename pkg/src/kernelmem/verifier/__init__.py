"""Multi-gate candidate verification."""

from .backends import (
    BackendRequest,
    BackendResponse,
    CountingBackend,
    PythonKernelBackend,
    StaticBackend,
    SubprocessBackend,
    VerifierBackend,
)
from .compare import compare_arrays, compare_outputs, merge_trials
from .core import Timeouts, Verifier, aggregate_latency, classify_error, verify
from .outcome import LatencyStats, MismatchKind, MismatchReport, TrialMismatch, VerifierOutcome, infeasible
from .rules import (
    AUDITOR_TEMPLATE,
    AntiHackResult,
    AuditorPolicy,
    ClassContract,
    ForbiddenCalls,
    HackRuleSet,
    Violation,
    ascend_rules,
    check_anti_hack,
    check_rules,
    parse_auditor_reply,
    render_auditor_prompt,
)

__all__ = [
    "AUDITOR_TEMPLATE",
    "AntiHackResult",
    "AuditorPolicy",
    "BackendRequest",
    "BackendResponse",
    "ClassContract",
    "CountingBackend",
    "ForbiddenCalls",
    "HackRuleSet",
    "LatencyStats",
    "MismatchKind",
    "MismatchReport",
    "PythonKernelBackend",
    "StaticBackend",
    "SubprocessBackend",
    "Timeouts",
    "TrialMismatch",
    "Verifier",
    "VerifierBackend",
    "VerifierOutcome",
    "Violation",
    "aggregate_latency",
    "ascend_rules",
    "check_anti_hack",
    "check_rules",
    "classify_error",
    "compare_arrays",
    "compare_outputs",
    "infeasible",
    "merge_trials",
    "parse_auditor_reply",
    "render_auditor_prompt",
    "verify",
]
