"""Compilation/correctness backends behind a small request/response protocol.

Wire format (one JSON object each way)::

    request  {"task_id", "sections": {name: text}, "atol", "rtol", "timeout_s"}
    response {"compiled": bool, "correct": bool, "latency_samples": [number]?,
              "error": string?, "profiling": object?}

A backend raises :class:`~kernelmem.errors.InfraError` for retryable
infrastructure problems; anything it reports through the response is a
verdict on the candidate.
"""

from __future__ import annotations

import json
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from ..errors import InfraError
from .compare import compare_outputs, merge_trials
from .outcome import MismatchKind, MismatchReport

REQUEST_FIELDS = ("task_id", "sections", "atol", "rtol", "timeout_s")
RESPONSE_FIELDS = frozenset({"compiled", "correct", "latency_samples", "error", "profiling"})


@dataclass(frozen=True)
class BackendRequest:
    task_id: str
    sections: Mapping[str, str]
    atol: float
    rtol: float
    timeout_s: float

    def to_wire(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "sections": dict(self.sections),
            "atol": self.atol,
            "rtol": self.rtol,
            "timeout_s": self.timeout_s,
        }


@dataclass(frozen=True)
class BackendResponse:
    compiled: bool
    correct: bool
    latency_samples: tuple[float, ...] = ()
    error: str | None = None
    profiling: Mapping[str, Any] | None = None
    # In-process backends can hand back a structured report instead of text.
    mismatch: MismatchReport | None = None

    @classmethod
    def from_wire(cls, data: Any) -> "BackendResponse":
        if not isinstance(data, dict):
            raise ValueError("response must be a JSON object")
        unknown = set(data) - RESPONSE_FIELDS
        if unknown:
            raise ValueError(f"unknown response fields {sorted(unknown)}")
        if not isinstance(data.get("compiled"), bool) or not isinstance(data.get("correct"), bool):
            raise ValueError("response needs boolean 'compiled' and 'correct'")
        samples = data.get("latency_samples") or []
        if not all(isinstance(s, (int, float)) and not isinstance(s, bool) for s in samples):
            raise ValueError("latency_samples must be numbers")
        error = data.get("error")
        profiling = data.get("profiling")
        if profiling is not None and not isinstance(profiling, dict):
            raise ValueError("profiling must be an object")
        return cls(
            compiled=data["compiled"],
            correct=data["correct"],
            latency_samples=tuple(float(s) for s in samples),
            error=None if error is None else str(error),
            profiling=profiling,
        )

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {"compiled": self.compiled, "correct": self.correct}
        if self.latency_samples:
            out["latency_samples"] = list(self.latency_samples)
        if self.error is not None:
            out["error"] = self.error
        if self.profiling is not None:
            out["profiling"] = dict(self.profiling)
        return out


class VerifierBackend(Protocol):
    def evaluate(self, request: BackendRequest) -> BackendResponse: ...


class SubprocessBackend:
    """Runs ``command`` once per request, speaking JSON over stdin/stdout.

    ``wall_timeout_s`` bounds the whole call; exceeding it, a non-zero exit
    or unparseable output all raise :class:`InfraError` with ``kind`` set to
    ``timeout``, ``exit`` or ``parse``.
    """

    def __init__(self, command: Sequence[str], wall_timeout_s: float = 3900.0, cwd: str | None = None) -> None:
        if not command:
            raise ValueError("backend command must not be empty")
        self.command = list(command)
        self.wall_timeout_s = wall_timeout_s
        self.cwd = cwd
        self.calls = 0

    def evaluate(self, request: BackendRequest) -> BackendResponse:
        self.calls += 1
        payload = json.dumps(request.to_wire())
        try:
            proc = subprocess.run(
                self.command,
                input=payload,
                capture_output=True,
                text=True,
                timeout=self.wall_timeout_s,
                cwd=self.cwd,
            )
        except subprocess.TimeoutExpired as exc:
            stderr = exc.stderr.decode() if isinstance(exc.stderr, bytes) else (exc.stderr or "")
            raise InfraError(f"backend exceeded {self.wall_timeout_s}s wall clock", kind="timeout", stderr=stderr) from exc
        except OSError as exc:
            raise InfraError(f"backend could not start: {exc}", kind="exit") from exc
        if proc.returncode != 0:
            raise InfraError(f"backend exited with status {proc.returncode}", kind="exit", stderr=proc.stderr)
        try:
            return BackendResponse.from_wire(json.loads(proc.stdout))
        except (json.JSONDecodeError, ValueError) as exc:
            raise InfraError(f"malformed backend response: {exc}", kind="parse", stderr=proc.stderr) from exc


class _Timeout(Exception):
    pass


def _call_with_timeout(fn: Callable[[], Any], timeout_s: float) -> Any:
    """Run ``fn`` in a daemon thread; raise :class:`_Timeout` if it overruns.

    The worker cannot be killed, only abandoned, so this suits trusted
    test kernels, not hostile code.
    """
    box: dict[str, Any] = {}

    def target() -> None:
        try:
            box["value"] = fn()
        except BaseException as exc:  # re-raised in the caller thread
            box["error"] = exc

    worker = threading.Thread(target=target, daemon=True)
    worker.start()
    worker.join(timeout_s)
    if worker.is_alive():
        raise _Timeout()
    if "error" in box:
        raise box["error"]
    return box.get("value")


@dataclass
class PythonKernelBackend:
    """In-process backend for candidates whose ``kernel_src`` is Python.

    The section must define ``entry_point``. Each trial draws inputs from
    ``make_inputs(rng, trial)``, runs the candidate first (fail-fast: the
    reference is skipped if the candidate errors or times out) and compares
    against ``reference``. Latency is the wall time of ``profile_passes``
    runs after ``warmup`` discarded runs.
    """

    reference: Callable[..., Any]
    make_inputs: Callable[[np.random.Generator, int], tuple]
    entry_point: str = "kernel"
    section: str = "kernel_src"
    trials: int = 5
    warmup: int = 3
    profile_passes: int = 3
    seed: int = 0
    calls: int = field(default=0, init=False)

    def evaluate(self, request: BackendRequest) -> BackendResponse:
        self.calls += 1
        source = request.sections.get(self.section, "")
        namespace: dict[str, Any] = {"np": np}
        try:
            exec(compile(source, f"<{request.task_id}:{self.section}>", "exec"), namespace)
        except Exception as exc:
            return BackendResponse(False, False, error=f"compile error: {type(exc).__name__}: {exc}")
        fn = namespace.get(self.entry_point)
        if not callable(fn):
            return BackendResponse(False, False, error=f"compile error: {self.entry_point} is not defined")

        rng = np.random.default_rng(self.seed)
        reports: list[MismatchReport | None] = []
        last_inputs: tuple = ()
        for trial in range(1, self.trials + 1):
            inputs = self.make_inputs(rng, trial)
            last_inputs = inputs
            try:
                got = _call_with_timeout(lambda: fn(*inputs), request.timeout_s)
            except _Timeout:
                which = "First" if trial == 1 else f"Trial {trial}"
                report = MismatchReport(
                    MismatchKind.TIMEOUT, f"[FAIL] {which} correctness run timed out after {request.timeout_s:g}s"
                )
                return BackendResponse(True, False, error=report.message, mismatch=report)
            except Exception as exc:
                report = MismatchReport(MismatchKind.RUNTIME, f"[FAIL] {type(exc).__name__}: {exc}")
                return BackendResponse(True, False, error=report.message, mismatch=report)
            expected = self.reference(*inputs)
            reports.append(compare_outputs(expected, got, request.atol, request.rtol, trial=trial, trials=self.trials))
        merged = merge_trials(reports, request.atol, request.rtol)
        if merged is not None:
            return BackendResponse(True, False, error=merged.render(), mismatch=merged)

        for _ in range(self.warmup):
            fn(*last_inputs)
        samples = []
        for _ in range(self.profile_passes):
            start = time.perf_counter()
            fn(*last_inputs)
            # Clamp so a trivially fast kernel still reports a positive latency.
            samples.append(max((time.perf_counter() - start) * 1e3, 1e-6))
        return BackendResponse(True, True, latency_samples=tuple(samples))


class CountingBackend:
    """Wraps a backend and counts invocations (used to observe fail-fast)."""

    def __init__(self, inner: VerifierBackend) -> None:
        self.inner = inner
        self.calls = 0

    def evaluate(self, request: BackendRequest) -> BackendResponse:
        self.calls += 1
        return self.inner.evaluate(request)


class StaticBackend:
    """Returns a fixed response for every request."""

    def __init__(self, response: BackendResponse) -> None:
        self.response = response
        self.calls = 0

    def evaluate(self, request: BackendRequest) -> BackendResponse:
        self.calls += 1
        return self.response
