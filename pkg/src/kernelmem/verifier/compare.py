"""Output comparison with structured mismatch localization."""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np

from .outcome import MismatchKind, MismatchReport, TrialMismatch

_REL_EPS = 1e-12


def _type_name(value: Any) -> str:
    if isinstance(value, np.ndarray):
        return "Tensor"
    return type(value).__name__


def _is_sequence(value: Any) -> bool:
    return isinstance(value, (list, tuple))


def _array_like(value: Any) -> bool:
    return isinstance(value, np.ndarray) or hasattr(value, "__array__")


def _bounding_box(mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    if mask.ndim == 0:
        return ()
    coords = np.nonzero(mask)
    return tuple((int(c.min()), int(c.max())) for c in coords)


def compare_arrays(
    expected: np.ndarray,
    got: np.ndarray,
    atol: float,
    rtol: float,
    trial: int = 1,
) -> TrialMismatch | None:
    """Element-wise check ``|got - exp| <= atol + rtol * |exp|``; ``None`` when all pass.

    NaN in either operand counts as a mismatch unless both are NaN at the
    same position. ``max_rel`` divides by ``max(|exp|, 1e-12)``.
    """
    exp = np.asarray(expected, dtype=np.float64)
    act = np.asarray(got, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        diff = np.abs(act - exp)
        bad = ~(diff <= atol + rtol * np.abs(exp))
        both_nan = np.isnan(exp) & np.isnan(act)
        bad &= ~both_nan
        count = int(bad.sum())
        if count == 0:
            return None
        finite_diff = np.where(both_nan, 0.0, diff)
        max_abs = float(np.nanmax(np.where(np.isnan(finite_diff), np.inf, finite_diff)))
        rel = finite_diff / np.maximum(np.abs(np.nan_to_num(exp, nan=0.0)), _REL_EPS)
        max_rel = float(np.nanmax(np.where(np.isnan(rel), np.inf, rel)))
    return TrialMismatch(
        trial=trial,
        mismatch_count=count,
        total_elements=int(exp.size),
        max_abs=max_abs,
        max_rel=max_rel,
        bounding_box=_bounding_box(bad),
    )


def compare_outputs(
    expected: Any,
    got: Any,
    atol: float,
    rtol: float,
    trial: int = 1,
    trials: int = 1,
) -> MismatchReport | None:
    """Compare one trial's output to the reference.

    Checks run in order type, length, shape, numeric; the first failing
    check determines the report. Returns ``None`` on a pass.
    """
    if _is_sequence(expected):
        if not _is_sequence(got):
            return MismatchReport(
                MismatchKind.TYPE,
                f"type(output) mismatch: expected {_type_name(expected)}, got {_type_name(got)}",
                expected=_type_name(expected),
                got=_type_name(got),
                trials_total=trials,
            )
        if len(expected) != len(got):
            return MismatchReport(
                MismatchKind.LENGTH,
                f"len(output) mismatch: expected {len(expected)}, got {len(got)}",
                expected=str(len(expected)),
                got=str(len(got)),
                trials_total=trials,
            )
        for idx, (e, g) in enumerate(zip(expected, got)):
            report = compare_outputs(e, g, atol, rtol, trial=trial, trials=trials)
            if report is not None:
                if report.kind is MismatchKind.NUMERIC:
                    return report
                return MismatchReport(
                    report.kind,
                    report.message.replace("output", f"output[{idx}]", 1),
                    expected=report.expected,
                    got=report.got,
                    trials_total=trials,
                )
        return None

    if _array_like(expected) and not _array_like(got):
        return MismatchReport(
            MismatchKind.TYPE,
            f"type(output) mismatch: expected Tensor, got {_type_name(got)}",
            expected="Tensor",
            got=_type_name(got),
            trials_total=trials,
        )
    exp = np.asarray(expected)
    act = np.asarray(got)
    if exp.shape != act.shape:
        return MismatchReport(
            MismatchKind.SHAPE,
            f"output.shape mismatch: expected {tuple(exp.shape)}, got {tuple(act.shape)}",
            expected=str(tuple(exp.shape)),
            got=str(tuple(act.shape)),
            trials_total=trials,
        )
    mismatch = compare_arrays(exp, act, atol, rtol, trial=trial)
    if mismatch is None:
        return None
    return MismatchReport(
        MismatchKind.NUMERIC,
        f"Output mismatch in trial {trial}",
        trials_passed=0,
        trials_total=trials,
        trials=(mismatch,),
        atol=atol,
        rtol=rtol,
    )


def merge_trials(reports: Sequence[MismatchReport | None], atol: float, rtol: float) -> MismatchReport | None:
    """Fold per-trial results into one report.

    A structural failure (type/length/shape/timeout/runtime) in any trial
    wins outright; otherwise numeric trial records are collected.
    """
    total = len(reports)
    failed = [r for r in reports if r is not None]
    if not failed:
        return None
    for r in failed:
        if r.kind is not MismatchKind.NUMERIC:
            return MismatchReport(
                r.kind, r.message, expected=r.expected, got=r.got,
                trials_passed=total - len(failed), trials_total=total,
            )
    trial_records = tuple(t for r in failed for t in r.trials)
    return MismatchReport(
        MismatchKind.NUMERIC,
        f"Output mismatch: {total - len(failed)}/{total} trials passed",
        trials_passed=total - len(failed),
        trials_total=total,
        trials=trial_records,
        atol=atol,
        rtol=rtol,
    )
