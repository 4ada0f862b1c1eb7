"""Structured verifier results."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Sequence


class MismatchKind(str, Enum):
    SHAPE = "shape"
    NUMERIC = "numeric"
    TYPE = "type"
    LENGTH = "length"
    TIMEOUT = "timeout"
    RUNTIME = "runtime"


@dataclass(frozen=True)
class TrialMismatch:
    trial: int
    mismatch_count: int
    total_elements: int
    max_abs: float
    max_rel: float
    # Inclusive (lo, hi) index range per axis of the minimal box covering all bad cells.
    bounding_box: tuple[tuple[int, int], ...] = ()

    def render(self) -> str:
        pct = 100.0 * self.mismatch_count / self.total_elements if self.total_elements else 0.0
        box = ", ".join(f"{lo}:{hi + 1}" for lo, hi in self.bounding_box)
        return (
            f"Trial {self.trial}: {self.mismatch_count}/{self.total_elements} mismatched ({pct:.2f}%), "
            f"max_abs={self.max_abs:.6g}, max_rel={self.max_rel:.6g}, Bounding box: output[{box}]"
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "trial": self.trial,
            "mismatch_count": self.mismatch_count,
            "total_elements": self.total_elements,
            "max_abs": self.max_abs,
            "max_rel": self.max_rel,
            "bounding_box": [list(b) for b in self.bounding_box],
        }


@dataclass(frozen=True)
class MismatchReport:
    kind: MismatchKind
    message: str
    expected: str | None = None
    got: str | None = None
    trials_passed: int = 0
    trials_total: int = 1
    trials: tuple[TrialMismatch, ...] = ()
    atol: float | None = None
    rtol: float | None = None

    def render(self) -> str:
        if self.kind is not MismatchKind.NUMERIC:
            return self.message
        failed = self.trials_total - self.trials_passed
        lines = [
            f"[FAIL] Output mismatch: {self.trials_passed}/{self.trials_total} trials passed, {failed} failed.",
            f"Tolerance atol={self.atol}, rtol={self.rtol}.",
        ]
        lines.extend(t.render() for t in self.trials)
        return "\n".join(lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "message": self.message,
            "expected": self.expected,
            "got": self.got,
            "trials_passed": self.trials_passed,
            "trials_total": self.trials_total,
            "trials": [t.to_dict() for t in self.trials],
        }


@dataclass(frozen=True)
class VerifierOutcome:
    """Gate results for one candidate.

    Gates are evaluated hack -> comp -> corr; a failed gate leaves the later
    ones ``False`` and unevaluated (``evaluated`` lists what actually ran).
    """

    g_hack: bool
    g_comp: bool
    g_corr: bool
    latency_ms: float | None = None
    latency_samples: tuple[float, ...] = ()
    error: MismatchReport | str | None = None
    profiling_digest: Mapping[str, Any] | None = None
    evaluated: tuple[str, ...] = ()
    violations: tuple[Any, ...] = ()

    def __post_init__(self) -> None:
        feasible = self.feasible()
        if feasible and (self.latency_ms is None or self.latency_ms <= 0):
            raise ValueError("feasible outcome requires a positive latency")
        if not feasible and self.latency_ms is not None:
            raise ValueError("infeasible outcome must not carry a latency")

    def feasible(self) -> bool:
        return self.g_hack and self.g_comp and self.g_corr

    @property
    def compiled(self) -> bool:
        return self.g_hack and self.g_comp

    def error_text(self) -> str:
        if self.error is None:
            return ""
        if isinstance(self.error, MismatchReport):
            return self.error.render()
        return str(self.error)

    def digest(self) -> dict[str, Any]:
        """JSON-ready summary used in episode reports and memory snapshots."""
        err: Any = None
        if isinstance(self.error, MismatchReport):
            err = {"kind": self.error.kind.value, "message": self.error.render()}
        elif self.error is not None:
            err = str(self.error)
        return {
            "g_hack": self.g_hack,
            "g_comp": self.g_comp,
            "g_corr": self.g_corr,
            "feasible": self.feasible(),
            "latency_ms": self.latency_ms,
            "error": err,
        }


def infeasible(
    *,
    g_hack: bool = False,
    g_comp: bool = False,
    g_corr: bool = False,
    error: MismatchReport | str | None = None,
    evaluated: Sequence[str] = (),
    violations: Sequence[Any] = (),
) -> VerifierOutcome:
    return VerifierOutcome(
        g_hack=g_hack,
        g_comp=g_comp,
        g_corr=g_corr,
        error=error,
        evaluated=tuple(evaluated),
        violations=tuple(violations),
    )


@dataclass(frozen=True)
class LatencyStats:
    mean: float
    std: float
    min: float
    max: float
    samples: tuple[float, ...] = field(default=())
