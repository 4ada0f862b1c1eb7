"""Episode loop: value-driven drafting until feasible, then refinement until the budget runs out."""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Mapping, Protocol, Sequence

from .errors import ConfigError, InfraError
from .generator import (
    ASCEND_SCHEMA,
    DEFAULT_MAX_FEEDBACK_CHARS,
    ContextItem,
    GenerationRequest,
    Generator,
    ParseFailure,
    SectionSchema,
    parse_candidate,
    serialize_candidate,
)
from .memory import (
    EntryKind,
    MemoryBank,
    MemoryEntry,
    OutcomeSnapshot,
    Query,
    RetrievalConfig,
    candidate_pool,
    hybrid_draft_pool,
    rank_entries,
)
from .metrics import SuiteMetrics, compute_suite_metrics
from .task import CandidateKernel, Task
from .valuation import (
    QTable,
    RewardStats,
    Stage,
    ValueConfig,
    by_similarity,
    draft_reward,
    epsilon_at,
    epsilon_greedy_pick,
    make_key,
    refine_reward,
    seeded_rng,
    select_by_value,
)
from .verifier.outcome import MismatchReport, VerifierOutcome, infeasible

log = logging.getLogger(__name__)


class Mode(str, Enum):
    EVOKERNEL = "evokernel"
    PASS_AT_K = "pass_at_k"
    REFINEMENT_BASELINE = "refinement_baseline"
    HEURISTIC_RETRIEVAL = "heuristic_retrieval"


class EpisodeStage(str, Enum):
    DRAFTING = "drafting"
    REFINING = "refining"
    DONE_SUCCESS = "done_success"
    DONE_EXHAUSTED = "done_exhausted"

    @property
    def terminal(self) -> bool:
        return self in (EpisodeStage.DONE_SUCCESS, EpisodeStage.DONE_EXHAUSTED)


@dataclass(frozen=True)
class BottleneckRule:
    """Label a start point when ``profiling[metric] > threshold``."""

    metric: str
    threshold: float
    label: str


DEFAULT_BOTTLENECK_RULES = (
    BottleneckRule("scalar_ratio", 0.5, "scalar_bound"),
    BottleneckRule("mte_ratio", 0.5, "memory_bound"),
    BottleneckRule("vector_ratio", 0.5, "vector_bound"),
)


def bottleneck_label(profiling: Mapping[str, Any] | None, rules: Sequence[BottleneckRule]) -> str | None:
    """First rule, in order, whose metric exceeds its threshold."""
    if not profiling:
        return None
    for rule in rules:
        value = profiling.get(rule.metric)
        if isinstance(value, (int, float)) and not isinstance(value, bool) and value > rule.threshold:
            return rule.label
    return None


@dataclass(frozen=True)
class OrchestratorConfig:
    budget_T: int = 30
    parallelism: int = 1
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    value: ValueConfig = field(default_factory=ValueConfig)
    mode: Mode = Mode.EVOKERNEL
    infra_retries: int = 3
    backoff_base_s: float = 0.5
    bottleneck_rules: tuple[BottleneckRule, ...] = DEFAULT_BOTTLENECK_RULES
    schema: SectionSchema = ASCEND_SCHEMA
    max_feedback_chars: int = DEFAULT_MAX_FEEDBACK_CHARS
    pass_k: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))

    def validate(self) -> None:
        bad = []
        if self.budget_T < 1:
            bad.append("budget_T")
        if self.parallelism < 1:
            bad.append("parallelism")
        if self.infra_retries < 0:
            bad.append("infra_retries")
        if self.pass_k is not None and self.pass_k < 1:
            bad.append("pass_k")
        if bad:
            raise ConfigError(f"invalid orchestrator config fields: {bad}", bad)
        self.retrieval.validate()
        self.value.validate()


class Verifier(Protocol):
    def verify(self, task: Task, candidate: CandidateKernel) -> VerifierOutcome: ...


class SharedState:
    """Structures shared live by every episode of a run: bank, Q-table, reward stats, step counter."""

    def __init__(self, bank: MemoryBank, value: ValueConfig = ValueConfig()) -> None:
        self.bank = bank
        self.value = value
        self.qtable = QTable(step_mode=value.step_mode, alpha=value.alpha, q_init=value.q_init)
        self._stats: dict[str | None, RewardStats] = {}
        self._lock = threading.Lock()
        self._step = 0

    def stats_for(self, task_id: str) -> RewardStats:
        key = task_id if self.value.per_task_stats else None
        with self._lock:
            if key not in self._stats:
                self._stats[key] = RewardStats(sigma_min=self.value.sigma_min, clip_B=self.value.clip_B)
            return self._stats[key]

    @property
    def global_stats(self) -> RewardStats:
        return self.stats_for("")

    def next_step(self) -> int:
        """Return the current global step and advance it."""
        with self._lock:
            step = self._step
            self._step += 1
            return step


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StartPoint:
    id: str
    latency_ms: float
    created: int
    parent: str | None = None
    source: str = ""
    profiling: Mapping[str, Any] | None = None


@dataclass(frozen=True)
class EpisodeState:
    task: Task
    stage: EpisodeStage = EpisodeStage.DRAFTING
    iteration_t: int = 0
    best_latency_b: float | None = None
    start_points: tuple[StartPoint, ...] = ()
    last_outcome: VerifierOutcome | None = None
    # parent start-point id -> summaries of variants derived from it
    children: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def start_point(self, sp_id: str) -> StartPoint:
        for sp in self.start_points:
            if sp.id == sp_id:
                return sp
        raise KeyError(sp_id)


def advance_state(
    state: EpisodeState,
    candidate_id: str,
    outcome: VerifierOutcome | None,
    *,
    budget_T: int,
    parent: str | None = None,
    source: str = "",
    summary: str | None = None,
) -> EpisodeState:
    """Apply one iteration's result: bump ``t``, update ``b`` and the start set, move the stage.

    ``outcome=None`` marks an infrastructure-failed iteration, which only
    consumes budget.
    """
    if state.stage.terminal:
        raise ValueError("cannot advance a terminal episode")
    t = state.iteration_t + 1
    best = state.best_latency_b
    points = state.start_points
    children = dict(state.children)
    stage = state.stage
    if outcome is not None and parent is not None and summary is not None:
        children[parent] = children.get(parent, ()) + (summary,)
    if outcome is not None and outcome.feasible():
        latency = outcome.latency_ms
        assert latency is not None
        if best is None or latency < best:
            best = latency
        points = points + (
            StartPoint(candidate_id, latency, created=t, parent=parent, source=source, profiling=outcome.profiling_digest),
        )
        if stage is EpisodeStage.DRAFTING:
            stage = EpisodeStage.REFINING
    if t >= budget_T:
        stage = EpisodeStage.DONE_SUCCESS if best is not None else EpisodeStage.DONE_EXHAUSTED
    return replace(
        state,
        stage=stage,
        iteration_t=t,
        best_latency_b=best,
        start_points=points,
        last_outcome=outcome if outcome is not None else state.last_outcome,
        children=children,
    )


def select_start_point(
    state: EpisodeState,
    qtable: QTable,
    epsilon: float,
    rng,
    bucket: str | None = None,
) -> StartPoint:
    """Epsilon-greedy over refine-stage Q; ties by lower latency, then earlier creation."""
    if not state.start_points:
        raise ValueError("start-point set is empty")
    values = qtable.view()

    def order(sp: StartPoint):
        q = values.get(make_key(Stage.REFINE, sp.id, bucket), qtable.q_init)
        return (-q, sp.latency_ms, sp.created)

    return epsilon_greedy_pick(state.start_points, 1, epsilon, rng, sort_key=order)[0]


def best_start_point(state: EpisodeState) -> StartPoint:
    """Heuristic choice: lowest historical latency, then earliest."""
    if not state.start_points:
        raise ValueError("start-point set is empty")
    return min(state.start_points, key=lambda sp: (sp.latency_ms, sp.created))


@dataclass(frozen=True)
class Context:
    items: tuple[MemoryEntry, ...]
    start_point: StartPoint | None = None
    child_summaries: tuple[str, ...] = ()
    bottleneck: str | None = None

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.items)

    def render_items(self) -> tuple[ContextItem, ...]:
        return tuple(ContextItem(e.id, e.kind.value, e.content) for e in self.items)


def task_query(task: Task) -> Query:
    """Retrieval query for a task: ``metadata['query']`` when present, else the reference text."""
    text = str(task.metadata.get("query", f"{task.category} {task.reference_spec}"))
    emb = task.metadata.get("embedding")
    return Query(text=text, tags=frozenset({task.category, task.level}), embedding=None if emb is None else tuple(emb))


def refine_pool(
    bank,
    query: Query,
    cfg: RetrievalConfig,
    label: str | None,
    exclude: Sequence[str] = (),
) -> list[tuple[MemoryEntry, float]]:
    """Similarity pool of size K, label-tagged entries first, backfilled by the rest."""
    if label is None:
        return candidate_pool(bank, query, cfg, exclude=exclude)
    cfg.validate()
    snap = bank.snapshot()
    k = cfg.pool_size
    tagged = rank_entries(snap, query, cfg, require_tag=label, exclude=exclude)[:k]
    taken = set(exclude) | {e.id for e, _ in tagged}
    rest = rank_entries(snap, query, cfg, exclude=taken)
    return (tagged + rest)[:k]


def build_refine_context(
    state: EpisodeState,
    bank,
    qtable: QTable,
    cfg: RetrievalConfig,
    start_point: StartPoint,
    *,
    bottleneck: str | None = None,
    epsilon: float = 0.0,
    rng=None,
    heuristic: bool = False,
    bucket: str | None = None,
) -> Context:
    pool = refine_pool(bank, task_query(state.task), cfg, bottleneck, exclude=(start_point.id,))
    if heuristic:
        chosen = by_similarity(pool, cfg.final_count_N)
    else:
        chosen = select_by_value(pool, qtable, Stage.REFINE, cfg.final_count_N, epsilon, rng or seeded_rng(0), bucket)
    return Context(
        items=tuple(e for e, _ in chosen),
        start_point=start_point,
        child_summaries=tuple(state.children.get(start_point.id, ())),
        bottleneck=bottleneck,
    )


def build_draft_context(
    task: Task,
    bank,
    qtable: QTable,
    cfg: RetrievalConfig,
    *,
    epsilon: float = 0.0,
    rng=None,
    heuristic: bool = False,
    bucket: str | None = None,
) -> Context:
    """API entries from the hybrid pool are kept; the rest of the N slots are filtered by value."""
    names = task.metadata.get("api_names", ())
    pool = hybrid_draft_pool(bank, task_query(task), cfg, referenced_names=names)
    n = cfg.final_count_N
    forced = [pair for pair in pool if pair[0].kind is EntryKind.API_TEMPLATE][:n]
    rest = [pair for pair in pool if pair[0].kind is not EntryKind.API_TEMPLATE]
    slots = n - len(forced)
    if heuristic:
        chosen = by_similarity(rest, slots)
    else:
        chosen = select_by_value(rest, qtable, Stage.DRAFT, slots, epsilon, rng or seeded_rng(0), bucket)
    return Context(items=tuple(e for e, _ in forced) + tuple(e for e, _ in chosen))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    t: int
    stage: str
    context_ids: tuple[str, ...]
    start_point: str | None
    outcome_digest: Mapping[str, Any] | None
    reward: float | None
    normalized_reward: float | None
    candidate_id: str | None = None
    infra_error: Mapping[str, str] | None = None

    @property
    def compiled(self) -> bool:
        return bool(self.outcome_digest and self.outcome_digest["g_comp"])

    @property
    def feasible(self) -> bool:
        return bool(self.outcome_digest and self.outcome_digest["feasible"])

    @property
    def latency_ms(self) -> float | None:
        return self.outcome_digest["latency_ms"] if self.outcome_digest else None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "t": self.t,
            "stage": self.stage,
            "context_ids": list(self.context_ids),
            "outcome_digest": None if self.outcome_digest is None else dict(self.outcome_digest),
            "reward": self.reward,
            "normalized_reward": self.normalized_reward,
            "candidate_id": self.candidate_id,
        }
        if self.start_point is not None:
            out["start_point"] = self.start_point
        if self.infra_error is not None:
            out["infra_error"] = dict(self.infra_error)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "IterationRecord":
        return cls(
            t=int(data["t"]),
            stage=str(data["stage"]),
            context_ids=tuple(data.get("context_ids", ())),
            start_point=data.get("start_point"),
            outcome_digest=data.get("outcome_digest"),
            reward=data.get("reward"),
            normalized_reward=data.get("normalized_reward"),
            candidate_id=data.get("candidate_id"),
            infra_error=data.get("infra_error"),
        )


@dataclass(frozen=True)
class EpisodeReport:
    task_id: str
    mode: str
    records: tuple[IterationRecord, ...]
    final_status: str
    budget_T: int
    reference_latency: float | None = None

    @property
    def first_compile_iteration(self) -> int | None:
        return next((r.t for r in self.records if r.compiled), None)

    @property
    def first_solve_iteration(self) -> int | None:
        return next((r.t for r in self.records if r.feasible), None)

    @property
    def first_feasible_latency(self) -> float | None:
        return next((r.latency_ms for r in self.records if r.feasible), None)

    @property
    def best_latency_curve(self) -> list[float | None]:
        best: float | None = None
        curve = []
        for r in self.records:
            if r.feasible and (best is None or r.latency_ms < best):
                best = r.latency_ms
            curve.append(best)
        return curve

    @property
    def best_latency(self) -> float | None:
        curve = self.best_latency_curve
        return curve[-1] if curve else None

    @property
    def solved(self) -> bool:
        return self.first_solve_iteration is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "mode": self.mode,
            "budget_T": self.budget_T,
            "final_status": self.final_status,
            "first_compile_iteration": self.first_compile_iteration,
            "first_solve_iteration": self.first_solve_iteration,
            "first_feasible_latency": self.first_feasible_latency,
            "best_latency": self.best_latency,
            "reference_latency": self.reference_latency,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EpisodeReport":
        return cls(
            task_id=str(data["task_id"]),
            mode=str(data["mode"]),
            records=tuple(IterationRecord.from_dict(r) for r in data["records"]),
            final_status=str(data["final_status"]),
            budget_T=int(data["budget_T"]),
            reference_latency=data.get("reference_latency"),
        )


# ---------------------------------------------------------------------------
# Memory accrual
# ---------------------------------------------------------------------------


def _unique_id(bank: MemoryBank, base: str) -> str:
    if base not in bank:
        return base
    n = 2
    while f"{base}~{n}" in bank:
        n += 1
    return f"{base}~{n}"


def _outcome_label(outcome: VerifierOutcome) -> str:
    if outcome.feasible():
        return f"feasible at {outcome.latency_ms:.4g} ms"
    if isinstance(outcome.error, MismatchReport):
        return f"failed ({outcome.error.kind.value})"
    if not outcome.g_hack and "hack" in outcome.evaluated:
        return "rejected by anti-hack screening"
    if not outcome.g_comp and "comp" in outcome.evaluated:
        return "failed to compile"
    return "failed"


def record_memory(
    bank: MemoryBank,
    task: Task,
    t: int,
    stage: Stage,
    content: str,
    outcome: VerifierOutcome,
    context_ids: Sequence[str],
    *,
    parent: str | None = None,
    bottleneck: str | None = None,
) -> tuple[MemoryEntry, MemoryEntry]:
    """Append the iteration's trace and a short experience summary; return both."""
    label = _outcome_label(outcome)
    tags = {task.category, task.level, stage.value, "feasible" if outcome.feasible() else "infeasible"}
    if bottleneck:
        tags.add(bottleneck)
    trace_id = _unique_id(bank, f"{task.id}.t{t}")
    trace = MemoryEntry(
        id=trace_id,
        kind=EntryKind.TRACE,
        content=content,
        summary=f"{task.id} {stage.value} attempt {t} {label}",
        tags=frozenset(tags),
        origin_task=task.id,
        origin_iteration=t,
        outcome_snapshot=OutcomeSnapshot(outcome.feasible(), outcome.latency_ms, outcome.compiled),
    )
    bank.append(trace)
    lesson = outcome.error_text() or f"latency {outcome.latency_ms:.4g} ms"
    if parent:
        lesson = f"derived from {parent}: {lesson}"
    experience = MemoryEntry(
        id=_unique_id(bank, f"{trace_id}.exp"),
        kind=EntryKind.EXPERIENCE,
        content=f"Context {', '.join(context_ids) or 'none'} -> {label}. {lesson}",
        summary=f"{task.id} lesson {t} {label}",
        tags=frozenset(tags),
        origin_task=task.id,
        origin_iteration=t,
    )
    bank.append(experience)
    return trace, experience


# ---------------------------------------------------------------------------
# Retry helpers
# ---------------------------------------------------------------------------


def _with_retries(fn: Callable[[], Any], retries: int, backoff_base_s: float, sleep: Callable[[float], None]):
    """Call ``fn`` up to ``1 + retries`` times on InfraError; re-raise the last one."""
    attempt = 0
    while True:
        try:
            return fn()
        except InfraError as exc:
            if attempt >= retries:
                raise
            delay = backoff_base_s * (2**attempt)
            log.warning("infra failure (%s), retry %d/%d in %.2fs", exc.kind, attempt + 1, retries, delay)
            if delay > 0:
                sleep(delay)
            attempt += 1


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


def run_episode(
    task: Task,
    shared: SharedState,
    generator: Generator,
    verifier: Verifier,
    cfg: OrchestratorConfig = OrchestratorConfig(),
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> EpisodeReport:
    """One task, ``budget_T`` iterations: drafting until feasible, then refining.

    Heuristic mode selects context by similarity alone, picks the
    lowest-latency start point and leaves the Q-table untouched.
    """
    cfg.validate()
    heuristic = cfg.mode is Mode.HEURISTIC_RETRIEVAL
    bank = shared.bank
    rng = seeded_rng(cfg.value.rng_seed, task.id, "select", cfg.mode.value)
    bucket = task.category if cfg.value.bucket_by_category else None
    state = EpisodeState(task=task)
    records: list[IterationRecord] = []
    draft_history: tuple[str, str] | None = None  # (last code, feedback)
    refine_history: dict[str, tuple[str, str]] = {}  # start point -> (last code, feedback)

    while not state.stage.terminal:
        t = state.iteration_t + 1
        eps = epsilon_at(cfg.value, shared.next_step())
        drafting = state.stage is EpisodeStage.DRAFTING
        stage = Stage.DRAFT if drafting else Stage.REFINE
        if drafting:
            context = build_draft_context(
                task, bank, shared.qtable, cfg.retrieval, epsilon=eps, rng=rng, heuristic=heuristic, bucket=bucket
            )
            last = draft_history
            request = GenerationRequest(
                task, stage, context.render_items(),
                feedback=None if last is None else last[1],
                last_code=None if last is None else last[0],
            )
        else:
            sp = best_start_point(state) if heuristic else select_start_point(state, shared.qtable, eps, rng, bucket)
            label = bottleneck_label(sp.profiling, cfg.bottleneck_rules)
            context = build_refine_context(
                state, bank, shared.qtable, cfg.retrieval, sp,
                bottleneck=label, epsilon=eps, rng=rng, heuristic=heuristic, bucket=bucket,
            )
            last = refine_history.get(sp.id)
            request = GenerationRequest(
                task, stage, context.render_items(),
                start_point_source=sp.source,
                baseline_latency=sp.latency_ms,
                feedback=None if last is None else last[1],
                last_code=None if last is None else last[0],
                child_summaries=context.child_summaries,
            )
        parent = context.start_point.id if context.start_point else None

        try:
            raw = _with_retries(lambda: generator.generate(request), cfg.infra_retries, cfg.backoff_base_s, sleep)
            parsed = parse_candidate(
                raw, cfg.schema, candidate_id=f"{task.id}.t{t}", iteration=t,
                parent_start_point=parent, context_used=context.ids,
            )
            if isinstance(parsed, ParseFailure):
                outcome = infeasible(error=parsed.feedback())
                content = raw
            else:
                outcome = _with_retries(
                    lambda: verifier.verify(task, parsed), cfg.infra_retries, cfg.backoff_base_s, sleep
                )
                content = serialize_candidate(parsed.source_sections)
        except InfraError as exc:
            log.error("task %s iteration %d infra-failed: %s", task.id, t, exc)
            records.append(
                IterationRecord(t, stage.value, context.ids, parent, None, None, None, infra_error=exc.to_dict())
            )
            state = advance_state(state, f"{task.id}.t{t}", None, budget_T=cfg.budget_T)
            continue

        if drafting:
            reward = draft_reward(outcome)
            normalized = reward
        else:
            reward = refine_reward(state.best_latency_b, outcome)
            normalized = shared.stats_for(task.id).normalize_then_update(reward)
        if not heuristic:
            for item_id in context.ids:
                shared.qtable.update(make_key(stage, item_id, bucket), normalized)
            if parent is not None:
                shared.qtable.update(make_key(Stage.REFINE, parent, bucket), normalized)

        trace, _ = record_memory(
            bank, task, t, stage, content, outcome, context.ids, parent=parent, bottleneck=context.bottleneck
        )
        feedback = outcome.error_text() if not outcome.feasible() else f"Performance: {outcome.latency_ms:.2f} ms"
        if drafting:
            draft_history = (content, feedback)
        else:
            refine_history[parent] = (content, feedback)
        records.append(
            IterationRecord(t, stage.value, context.ids, parent, outcome.digest(), reward, normalized, trace.id)
        )
        state = advance_state(
            state, trace.id, outcome, budget_T=cfg.budget_T, parent=parent, source=content, summary=trace.summary
        )

    return EpisodeReport(
        task_id=task.id,
        mode=cfg.mode.value,
        records=tuple(records),
        final_status=state.stage.value,
        budget_T=cfg.budget_T,
        reference_latency=task.metadata.get("reference_latency"),
    )


def run_pass_at_k(
    task: Task,
    generator: Generator,
    verifier: Verifier,
    k: int,
    cfg: OrchestratorConfig = OrchestratorConfig(),
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> EpisodeReport:
    """``k`` independent generations from the bare task prompt; no memory, no values."""
    if k < 1:
        raise ConfigError("k must be >= 1", ["pass_k"])
    records = []
    best: float | None = None
    for t in range(1, k + 1):
        request = GenerationRequest(task, Stage.DRAFT)
        try:
            raw = _with_retries(lambda: generator.generate(request), cfg.infra_retries, cfg.backoff_base_s, sleep)
            parsed = parse_candidate(raw, cfg.schema, candidate_id=f"{task.id}.k{t}", iteration=t)
            if isinstance(parsed, ParseFailure):
                outcome = infeasible(error=parsed.feedback())
            else:
                outcome = _with_retries(
                    lambda: verifier.verify(task, parsed), cfg.infra_retries, cfg.backoff_base_s, sleep
                )
        except InfraError as exc:
            records.append(IterationRecord(t, Stage.DRAFT.value, (), None, None, None, None, infra_error=exc.to_dict()))
            continue
        reward = draft_reward(outcome)
        if outcome.feasible() and (best is None or outcome.latency_ms < best):
            best = outcome.latency_ms
        records.append(
            IterationRecord(t, Stage.DRAFT.value, (), None, outcome.digest(), reward, reward, f"{task.id}.k{t}")
        )
    status = EpisodeStage.DONE_SUCCESS if best is not None else EpisodeStage.DONE_EXHAUSTED
    return EpisodeReport(
        task.id, Mode.PASS_AT_K.value, tuple(records), status.value, k, task.metadata.get("reference_latency")
    )


def run_refinement_baseline(
    task: Task,
    bank: MemoryBank,
    generator: Generator,
    verifier: Verifier,
    cfg: OrchestratorConfig = OrchestratorConfig(),
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> EpisodeReport:
    """The two-stage loop with only within-task history.

    Runs :func:`run_episode` over a copy of ``bank`` restricted to the
    task's own entries, with fresh values and statistics.
    """
    restricted = SharedState(bank.restricted_to_task(task.id), cfg.value)
    report = run_episode(task, restricted, generator, verifier, replace(cfg, mode=Mode.EVOKERNEL), sleep=sleep)
    return replace(report, mode=Mode.REFINEMENT_BASELINE.value)


def run_task(
    task: Task,
    shared: SharedState,
    generator: Generator,
    verifier: Verifier,
    cfg: OrchestratorConfig,
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> EpisodeReport:
    if cfg.mode is Mode.PASS_AT_K:
        return run_pass_at_k(task, generator, verifier, cfg.pass_k or cfg.budget_T, cfg, sleep=sleep)
    if cfg.mode is Mode.REFINEMENT_BASELINE:
        return run_refinement_baseline(task, shared.bank, generator, verifier, cfg, sleep=sleep)
    return run_episode(task, shared, generator, verifier, cfg, sleep=sleep)


LEVEL_ORDER = {"L1": 1, "easy": 1, "L2": 2, "hard": 2, "L3": 3}


@dataclass(frozen=True)
class SuiteReport:
    episodes: tuple[EpisodeReport, ...]
    metrics: SuiteMetrics
    mode: str

    def episode(self, task_id: str) -> EpisodeReport:
        return next(e for e in self.episodes if e.task_id == task_id)

    def to_dict(self) -> dict[str, Any]:
        return {"mode": self.mode, "metrics": self.metrics.to_dict(), "tasks": [e.task_id for e in self.episodes]}


def run_suite(
    tasks: Sequence[Task],
    shared: SharedState,
    generator: Generator,
    verifier: Verifier,
    cfg: OrchestratorConfig = OrchestratorConfig(),
    *,
    order_by_level: bool = False,
    sleep: Callable[[float], None] = time.sleep,
) -> SuiteReport:
    """Run every task against one shared bank and Q-table.

    With ``order_by_level`` tasks run level by level (easy first); within a
    level the given order is kept. Episodes are merged by task id.
    """
    if not tasks:
        raise ValueError("run_suite needs at least one task")
    cfg.validate()
    ordered = list(tasks)
    if order_by_level:
        ordered.sort(key=lambda task: LEVEL_ORDER.get(task.level, 99))
    if cfg.parallelism == 1:
        episodes = [run_task(task, shared, generator, verifier, cfg, sleep=sleep) for task in ordered]
    else:
        episodes = []
        groups = [ordered]
        if order_by_level:
            levels = sorted({LEVEL_ORDER.get(task.level, 99) for task in ordered})
            groups = [[task for task in ordered if LEVEL_ORDER.get(task.level, 99) == lvl] for lvl in levels]
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            for group in groups:
                futures = [pool.submit(run_task, task, shared, generator, verifier, cfg, sleep=sleep) for task in group]
                episodes.extend(f.result() for f in futures)
    episodes.sort(key=lambda e: e.task_id)
    budget = max(e.budget_T for e in episodes)
    return SuiteReport(tuple(episodes), compute_suite_metrics(episodes, budget), cfg.mode.value)
