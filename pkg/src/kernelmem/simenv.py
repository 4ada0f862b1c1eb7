"""Synthetic kernel-synthesis environment with hidden knowledge dependencies.

Each task needs a set ``R(x)`` of knowledge entries in its context (or in the
start point it refines) to be solved with probability ``p_hit``; otherwise it
only succeeds with ``p_miss``. Hint entries shrink latency multiplicatively
by ``(1 - gamma)`` per hint. Distractor entries look very similar to the task
query but have no effect, which separates value-driven retrieval from
similarity-only retrieval.

All randomness is drawn from streams keyed by ``(seed, task id, iteration)``
so outcomes do not depend on episode interleaving or on anything in the
context besides knowledge and hint ids.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
import statistics
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

from .errors import ConfigError
from .generator import GenerationRequest, SectionSchema
from .memory import EntryKind, MemoryBank, MemoryEntry, RetrievalConfig
from .orchestrator import Mode, OrchestratorConfig, SharedState, SuiteReport, run_suite
from .task import CandidateKernel, Task
from .valuation import ValueConfig, seeded_rng
from .verifier.outcome import MismatchKind, MismatchReport, VerifierOutcome, infeasible

SIM_SCHEMA = SectionSchema(("kernel_src",))
SIM_SECTION = "kernel_src"
HINT_TAG = "memory_bound"


@dataclass(frozen=True)
class WorldSpec:
    categories: int = 3
    easy_per_category: int = 2
    hard_per_category: int = 2
    knowledge_per_category: int = 3
    hints_per_category: int = 3
    distractors_per_category: int = 5
    required_easy: int = 1
    required_hard: int = 2
    overlap_fraction: float = 1.0
    p_hit: float = 0.9
    p_miss: float = 0.05
    p_compile: float = 0.5
    latency_base_range: tuple[float, float] = (50.0, 150.0)
    floor_fraction: float = 0.2
    hint_gain: float = 0.3
    noise_sigma: float = 0.05
    latency_samples: int = 3

    def validate(self) -> None:
        bad = []
        for name in (
            "categories", "knowledge_per_category", "latency_samples",
        ):
            if getattr(self, name) <= 0:
                bad.append(name)
        for name in (
            "easy_per_category", "hard_per_category", "hints_per_category", "distractors_per_category",
            "required_easy", "required_hard",
        ):
            if getattr(self, name) < 0:
                bad.append(name)
        if not 0 <= self.overlap_fraction <= 1:
            bad.append("overlap_fraction")
        if not (0 <= self.p_miss <= 1 and 0 <= self.p_hit <= 1):
            bad.append("p_hit")
        if not 0 < self.hint_gain < 1:
            bad.append("hint_gain")
        if not 0 < self.floor_fraction < 1:
            bad.append("floor_fraction")
        if self.required_easy > self.knowledge_per_category or self.required_hard > self.knowledge_per_category:
            bad.append("required_hard" if self.required_hard > self.knowledge_per_category else "required_easy")
        lo, hi = self.latency_base_range
        if not 0 < lo <= hi:
            bad.append("latency_base_range")
        if bad:
            raise ConfigError(f"invalid world spec fields: {sorted(set(bad))}", sorted(set(bad)))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WorldSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown world keys: {unknown}", unknown)
        values = dict(data)
        if "latency_base_range" in values:
            values["latency_base_range"] = tuple(float(v) for v in values["latency_base_range"])
        spec = cls(**values)
        spec.validate()
        return spec

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["latency_base_range"] = list(self.latency_base_range)
        return out


def ablation_spec() -> WorldSpec:
    """Distractor-heavy world used for the value-vs-similarity comparison."""
    return WorldSpec(p_miss=0.05, distractors_per_category=5)


def transfer_spec() -> WorldSpec:
    """Hard tasks need exactly the knowledge their category's easy tasks use."""
    return WorldSpec(overlap_fraction=1.0, required_easy=2, required_hard=2)


@dataclass(frozen=True)
class SyntheticTask:
    id: str
    category: str
    level: str
    required_knowledge: frozenset[str]
    p_hit: float
    p_miss: float
    latency_base: float
    latency_floor: float
    hint_gain: float

    def __post_init__(self) -> None:
        # Equality is allowed for the null world where context carries no signal.
        if self.p_hit < self.p_miss:
            raise ValueError(f"{self.id}: p_hit must not be below p_miss")
        if not self.latency_floor < self.latency_base:
            raise ValueError(f"{self.id}: latency_floor must be below latency_base")

    def query_text(self) -> str:
        c = self.category
        return f"{c} {c}_kernel {c}_operator implementation"

    def to_task(self) -> Task:
        return Task(
            id=self.id,
            reference_spec=f"synthetic {self.level} operator in {self.category}",
            category=self.category,
            level=self.level,
            metadata={"query": self.query_text()},
        )


@dataclass(frozen=True)
class SyntheticWorld:
    spec: WorldSpec
    seed: int
    knowledge: frozenset[str]
    hints: frozenset[str]
    distractors: frozenset[str]
    tasks: tuple[SyntheticTask, ...]
    entries: tuple[MemoryEntry, ...] = field(repr=False, default=())

    def task(self, task_id: str) -> SyntheticTask:
        for st in self.tasks:
            if st.id == task_id:
                return st
        raise KeyError(task_id)

    def hints_in(self, category: str) -> int:
        return sum(1 for h in self.hints if h.startswith(f"h_{category}_"))

    def bank(self, *, include_distractors: bool = True) -> MemoryBank:
        return MemoryBank(e for e in self.entries if include_distractors or e.id not in self.distractors)

    def task_list(self, level: str | None = None) -> list[Task]:
        return [st.to_task() for st in self.tasks if level is None or st.level == level]


def build_world(spec: WorldSpec = WorldSpec(), seed: int = 0) -> SyntheticWorld:
    """A pure function of ``(spec, seed)``."""
    spec.validate()
    rng = seeded_rng(seed, "world")
    entries: list[MemoryEntry] = []
    knowledge: set[str] = set()
    hints: set[str] = set()
    distractors: set[str] = set()
    tasks: list[SyntheticTask] = []
    for c in range(spec.categories):
        cat = f"cat{c}"
        k_ids = [f"k_{cat}_{i}" for i in range(spec.knowledge_per_category)]
        for i, kid in enumerate(k_ids):
            entries.append(
                MemoryEntry(kid, EntryKind.EXPERIENCE, f"Technique {i} needed for {cat} operators.",
                            f"{cat} {cat}_pattern_{i} technique", frozenset({cat, "knowledge"}))
            )
        knowledge.update(k_ids)
        for i in range(spec.hints_per_category):
            hid = f"h_{cat}_{i}"
            entries.append(
                MemoryEntry(hid, EntryKind.BEST_PRACTICE, f"Tuning hint {i} for {cat}.",
                            f"{cat} tuning hint {cat}_hint_{i}", frozenset({cat, HINT_TAG}))
            )
            hints.add(hid)
        for i in range(spec.distractors_per_category):
            did = f"d_{cat}_{i}"
            entries.append(
                MemoryEntry(did, EntryKind.EXPERIENCE, f"General notes on {cat} kernels ({i}).",
                            f"{cat} {cat}_kernel {cat}_operator implementation overview", frozenset({cat, "overview"}))
            )
            distractors.add(did)

        easy_union: set[str] = set()
        for j in range(spec.easy_per_category):
            req = frozenset(rng.sample(k_ids, spec.required_easy))
            easy_union |= req
            tasks.append(_make_task(f"easy_{cat}_{j}", cat, "easy", req, spec, rng))
        for j in range(spec.hard_per_category):
            n_shared = min(round(spec.overlap_fraction * spec.required_hard), len(easy_union))
            shared = rng.sample(sorted(easy_union), n_shared)
            others = [k for k in k_ids if k not in easy_union]
            if len(others) < spec.required_hard - n_shared:
                others = [k for k in k_ids if k not in shared]
            fresh = rng.sample(others, spec.required_hard - n_shared)
            tasks.append(_make_task(f"hard_{cat}_{j}", cat, "hard", frozenset(shared) | frozenset(fresh), spec, rng))
    return SyntheticWorld(
        spec=spec, seed=seed,
        knowledge=frozenset(knowledge), hints=frozenset(hints), distractors=frozenset(distractors),
        tasks=tuple(tasks), entries=tuple(entries),
    )


def _make_task(task_id: str, cat: str, level: str, req: frozenset[str], spec: WorldSpec, rng) -> SyntheticTask:
    lo, hi = spec.latency_base_range
    base = round(rng.uniform(lo, hi), 3)
    return SyntheticTask(
        id=task_id, category=cat, level=level, required_knowledge=req,
        p_hit=spec.p_hit, p_miss=spec.p_miss,
        latency_base=base, latency_floor=base * spec.floor_fraction, hint_gain=spec.hint_gain,
    )


# ---------------------------------------------------------------------------
# Generator / verifier pair
# ---------------------------------------------------------------------------

_LINE_RE = re.compile(r"^(knowledge|hints):\s*(.*)$", re.MULTILINE)


def decode_candidate(text: str) -> tuple[frozenset[str], frozenset[str]]:
    """Knowledge and hint ids encoded in a synthetic candidate section."""
    found = {"knowledge": frozenset(), "hints": frozenset()}
    for key, value in _LINE_RE.findall(text):
        found[key] = frozenset(v for v in value.split(",") if v)
    return found["knowledge"], found["hints"]


class SyntheticGenerator:
    """Emits a candidate listing the knowledge and hint ids it was shown.

    In refining, ids carried by the start point's source are inherited.
    """

    def __init__(self, world: SyntheticWorld) -> None:
        self.world = world
        self.calls = 0

    def generate(self, request: GenerationRequest) -> str:
        self.calls += 1
        ids = set(request.context_ids)
        knowledge = ids & self.world.knowledge
        hints = ids & self.world.hints
        if request.start_point_source:
            k, h = decode_candidate(request.start_point_source)
            knowledge |= k
            hints |= h
        body = f"task: {request.task.id}\nknowledge: {','.join(sorted(knowledge))}\nhints: {','.join(sorted(hints))}"
        return f"{SIM_SECTION} = r'''\n{body}\n'''\n"


class SyntheticVerifier:
    """Draws feasibility and latency from per-(task, iteration) streams."""

    def __init__(self, world: SyntheticWorld, seed: int = 0) -> None:
        self.world = world
        self.seed = seed
        self.calls = 0

    def outcome_for(self, task_id: str, iteration: int, knowledge: frozenset[str], hints: frozenset[str]) -> VerifierOutcome:
        st = self.world.task(task_id)
        spec = self.world.spec
        knowledge = knowledge & self.world.knowledge
        hints = hints & self.world.hints
        rng = seeded_rng(self.seed, task_id, "verify", iteration)
        p = st.p_hit if st.required_knowledge <= knowledge else st.p_miss
        u_feasible = rng.random()
        u_compile = rng.random()
        noise = [rng.gauss(0.0, 1.0) for _ in range(spec.latency_samples)]
        if u_feasible >= p:
            if u_compile < spec.p_compile:
                report = MismatchReport(MismatchKind.NUMERIC, "synthetic output mismatch", trials_total=5)
                return infeasible(g_hack=True, g_comp=True, error=report, evaluated=("hack", "comp", "corr"))
            return infeasible(g_hack=True, error="synthetic compile error", evaluated=("hack", "comp"))
        nominal = max(st.latency_floor, st.latency_base * (1.0 - st.hint_gain) ** len(hints))
        samples = tuple(max(st.latency_floor, nominal * math.exp(spec.noise_sigma * z)) for z in noise)
        total = self.world.hints_in(st.category)
        profiling = {"mte_ratio": 1.0 - len(hints) / total if total else 0.0}
        return VerifierOutcome(
            g_hack=True, g_comp=True, g_corr=True,
            latency_ms=math.fsum(samples) / len(samples), latency_samples=samples,
            profiling_digest=profiling, evaluated=("hack", "comp", "corr"),
        )

    def verify(self, task: Task, candidate: CandidateKernel) -> VerifierOutcome:
        self.calls += 1
        knowledge, hints = decode_candidate(candidate.section(SIM_SECTION))
        return self.outcome_for(task.id, candidate.iteration, knowledge, hints)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def sim_config(budget_T: int = 10, seed: int = 0, mode: Mode | str = Mode.EVOKERNEL, **overrides: Any) -> OrchestratorConfig:
    return OrchestratorConfig(
        budget_T=budget_T,
        mode=Mode(mode),
        schema=SIM_SCHEMA,
        backoff_base_s=0.0,
        retrieval=overrides.pop("retrieval", RetrievalConfig()),
        value=overrides.pop("value", ValueConfig(rng_seed=seed)),
        **overrides,
    )


def simulate(
    world: SyntheticWorld,
    cfg: OrchestratorConfig,
    *,
    tasks: Sequence[Task] | None = None,
    shared: SharedState | None = None,
    order_by_level: bool = True,
) -> tuple[SuiteReport, SharedState]:
    shared = shared or SharedState(world.bank(), cfg.value)
    report = run_suite(
        list(tasks) if tasks is not None else world.task_list(),
        shared, SyntheticGenerator(world), SyntheticVerifier(world, cfg.value.rng_seed), cfg,
        order_by_level=order_by_level,
    )
    return report, shared


ABLATION_MODES = {"value_driven": Mode.EVOKERNEL, "heuristic": Mode.HEURISTIC_RETRIEVAL}


@dataclass(frozen=True)
class TrialResult:
    trial: int
    seed: int
    curves: Mapping[str, tuple[float, ...]]

    def final(self, mode: str) -> float:
        curve = self.curves[mode]
        return curve[-1] if curve else 0.0


@dataclass(frozen=True)
class AblationReport:
    modes: tuple[str, ...]
    trials: tuple[TrialResult, ...]
    budget_T: int

    def wins(self, a: str = "value_driven", b: str = "heuristic") -> int:
        """Trials where ``a``'s final correctness is at least ``b``'s."""
        return sum(1 for t in self.trials if t.final(a) >= t.final(b))

    def mean_delta(self, a: str = "value_driven", b: str = "heuristic") -> float:
        return statistics.fmean(t.final(a) - t.final(b) for t in self.trials) if self.trials else 0.0

    def summary(self) -> dict[str, Any]:
        return {
            "budget_T": self.budget_T,
            "trials": len(self.trials),
            "modes": list(self.modes),
            "mean_final": {m: statistics.fmean(t.final(m) for t in self.trials) for m in self.modes},
            "value_ge_heuristic": self.wins() if set(self.modes) >= {"value_driven", "heuristic"} else None,
            "mean_delta": self.mean_delta() if set(self.modes) >= {"value_driven", "heuristic"} else None,
            "per_trial": [
                {"trial": t.trial, "seed": t.seed, "curves": {m: list(t.curves[m]) for m in self.modes}}
                for t in self.trials
            ],
        }

    @classmethod
    def from_summary(cls, data: Mapping[str, Any]) -> "AblationReport":
        trials = tuple(
            TrialResult(int(t["trial"]), int(t["seed"]), {m: tuple(v) for m, v in t["curves"].items()})
            for t in data["per_trial"]
        )
        return cls(tuple(data["modes"]), trials, int(data["budget_T"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ABLATION_CSV_HEADER)
        for t in self.trials:
            for mode in self.modes:
                for i, value in enumerate(t.curves[mode], start=1):
                    writer.writerow([t.trial, mode, i, f"{value:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


ABLATION_CSV_HEADER = ("trial", "mode", "iteration", "cum_correct")


def trial_seed(seed: int, trial: int) -> int:
    return seeded_rng(seed, "trial", trial).getrandbits(31)


def run_ablation(
    spec: WorldSpec = ablation_spec(),
    modes: Sequence[str] = ("value_driven", "heuristic"),
    trials: int = 20,
    seed: int = 0,
    budget_T: int = 10,
) -> AblationReport:
    """Paired trials: each trial builds one world and runs every mode on it with the same seed."""
    results = []
    for trial in range(trials):
        s = trial_seed(seed, trial)
        world = build_world(spec, s)
        curves = {}
        for name in modes:
            report, _ = simulate(world, sim_config(budget_T, s, ABLATION_MODES[name]))
            curves[name] = report.metrics.acc_curve
        results.append(TrialResult(trial, s, curves))
    return AblationReport(tuple(modes), tuple(results), budget_T)


@dataclass(frozen=True)
class TransferTrial:
    trial: int
    seed: int
    warm: float
    scratch: float


@dataclass(frozen=True)
class TransferReport:
    trials: tuple[TransferTrial, ...]
    budget_T: int

    def earlier_or_equal(self) -> int:
        return sum(1 for t in self.trials if t.warm <= t.scratch)

    def mean_warm(self) -> float:
        return statistics.fmean(t.warm for t in self.trials)

    def mean_scratch(self) -> float:
        return statistics.fmean(t.scratch for t in self.trials)

    def summary(self) -> dict[str, Any]:
        return {
            "budget_T": self.budget_T,
            "trials": [asdict(t) for t in self.trials],
            "warm_earlier_or_equal": self.earlier_or_equal(),
            "mean_first_solve_warm": self.mean_warm(),
            "mean_first_solve_scratch": self.mean_scratch(),
        }


def mean_first_solve(report: SuiteReport, task_ids: Sequence[str], budget_T: int) -> float:
    """Mean first-solve iteration over ``task_ids``; unsolved tasks count as ``T + 1``."""
    values = []
    for tid in task_ids:
        first = report.episode(tid).first_solve_iteration
        values.append(budget_T + 1 if first is None else first)
    return statistics.fmean(values)


def run_transfer(spec: WorldSpec = transfer_spec(), trials: int = 20, seed: int = 0, budget_T: int = 10) -> TransferReport:
    """Easy-then-hard on one shared memory versus hard tasks on a fresh memory."""
    results = []
    for trial in range(trials):
        s = trial_seed(seed, trial)
        world = build_world(spec, s)
        hard = world.task_list("hard")
        hard_ids = [t.id for t in hard]
        cfg = sim_config(budget_T, s)
        warm, _ = simulate(world, cfg)
        scratch, _ = simulate(world, cfg, tasks=hard)
        results.append(
            TransferTrial(trial, s, mean_first_solve(warm, hard_ids, budget_T), mean_first_solve(scratch, hard_ids, budget_T))
        )
    return TransferReport(tuple(results), budget_T)
