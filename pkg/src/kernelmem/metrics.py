"""Suite metrics: cumulative compilation rate / correctness and speedups.

Quartiles use linear interpolation between closest ranks (numpy's default
``linear`` method): for sorted ``x`` of length ``n`` the ``p`` quantile sits
at fractional index ``p * (n - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Protocol, Sequence


class _Episode(Protocol):
    task_id: str

    @property
    def first_compile_iteration(self) -> int | None: ...

    @property
    def first_solve_iteration(self) -> int | None: ...

    @property
    def first_feasible_latency(self) -> float | None: ...

    @property
    def best_latency(self) -> float | None: ...

    reference_latency: float | None


def compute_speedup(l_ref: float, l_opt: float) -> float:
    """``l_ref / l_opt``; both must be positive."""
    if l_ref <= 0 or l_opt <= 0 or math.isnan(l_ref) or math.isnan(l_opt):
        raise ValueError(f"latencies must be positive, got {l_ref!r} and {l_opt!r}")
    return l_ref / l_opt


def quantile(sorted_values: Sequence[float], p: float) -> float:
    if not sorted_values:
        raise ValueError("quantile of empty sequence")
    pos = p * (len(sorted_values) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_values) - 1)
    frac = pos - lo
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * frac


@dataclass(frozen=True)
class Distribution:
    median: float
    q1: float
    q3: float

    @property
    def iqr(self) -> tuple[float, float]:
        return (self.q1, self.q3)

    def to_dict(self) -> dict[str, float]:
        return {"median": self.median, "q1": self.q1, "q3": self.q3}


def summarize_distribution(values: Sequence[float]) -> Distribution | None:
    """Median and the (Q1, Q3) interquartile bounds; ``None`` for empty input."""
    if not values:
        return None
    xs = sorted(float(v) for v in values)
    return Distribution(quantile(xs, 0.5), quantile(xs, 0.25), quantile(xs, 0.75))


@dataclass(frozen=True)
class TaskMetrics:
    task_id: str
    first_compile_iteration: int | None
    first_solve_iteration: int | None
    first_feasible_latency: float | None
    best_latency: float | None
    speedup: float | None
    reference_latency: float | None = None
    ref_speedup: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SuiteMetrics:
    cr_curve: tuple[float, ...] = ()
    acc_curve: tuple[float, ...] = ()
    tasks: tuple[TaskMetrics, ...] = ()
    speedup_summary: Distribution | None = None

    @property
    def final_cr(self) -> float:
        return self.cr_curve[-1] if self.cr_curve else 0.0

    @property
    def final_acc(self) -> float:
        return self.acc_curve[-1] if self.acc_curve else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "cr_curve": list(self.cr_curve),
            "acc_curve": list(self.acc_curve),
            "final_cr": self.final_cr,
            "final_acc": self.final_acc,
            "tasks": [t.to_dict() for t in self.tasks],
            "speedup_summary": None if self.speedup_summary is None else self.speedup_summary.to_dict(),
        }

    def csv_rows(self) -> list[tuple[int, float, float]]:
        return [(t + 1, cr, acc) for t, (cr, acc) in enumerate(zip(self.cr_curve, self.acc_curve))]


SUITE_CSV_HEADER = ("iteration", "cumulative_CR", "cumulative_Acc")


def _cumulative(firsts: Sequence[int | None], budget: int, n: int) -> tuple[float, ...]:
    return tuple(sum(1 for f in firsts if f is not None and f <= t) / n for t in range(1, budget + 1))


def compute_suite_metrics(episodes: Sequence[_Episode], budget_T: int | None = None) -> SuiteMetrics:
    """Cumulative CR/Acc per iteration plus per-task speedups.

    CR at ``t`` is the fraction of tasks with a compiling candidate at or
    before ``t``; Acc uses feasible candidates. Speedup is the first feasible
    latency over the best one.
    """
    if not episodes:
        return SuiteMetrics()
    n = len(episodes)
    budget = budget_T or max((getattr(e, "budget_T", 0) for e in episodes), default=0)
    tasks = []
    speedups = []
    for ep in episodes:
        first, best = ep.first_feasible_latency, ep.best_latency
        speedup = compute_speedup(first, best) if first is not None and best is not None else None
        ref = ep.reference_latency
        ref_speedup = compute_speedup(ref, best) if ref is not None and best is not None else None
        if speedup is not None:
            speedups.append(speedup)
        tasks.append(
            TaskMetrics(
                ep.task_id, ep.first_compile_iteration, ep.first_solve_iteration, first, best, speedup, ref, ref_speedup
            )
        )
    return SuiteMetrics(
        cr_curve=_cumulative([e.first_compile_iteration for e in episodes], budget, n),
        acc_curve=_cumulative([e.first_solve_iteration for e in episodes], budget, n),
        tasks=tuple(tasks),
        speedup_summary=summarize_distribution(speedups),
    )
