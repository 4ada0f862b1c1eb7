"""Append-only memory bank with lexical / embedding similarity retrieval.

Entries are never mutated or removed while episodes run. Retrieval always
works against a :class:`BankSnapshot`, so a query started before an append
never observes the new entry.

Lexical similarity is TF-IDF cosine over entry summaries. Tokens are
lowercase ``[a-z0-9_]+`` runs, term frequency is the raw count and the
inverse document frequency is the smoothed ``ln((1 + n) / (1 + df)) + 1``
computed over the snapshot being queried.
"""

from __future__ import annotations

import json
import math
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import ConfigError, DuplicateEntryError, MemoryFormatError

_TOKEN_RE = re.compile(r"[a-z0-9_]+")

ENTRY_FIELDS = frozenset(
    {"id", "kind", "content", "summary", "embedding", "tags", "origin_task", "origin_iteration", "outcome"}
)
REQUIRED_ENTRY_FIELDS = frozenset({"id", "kind", "content", "summary", "tags", "origin_iteration"})


class EntryKind(str, Enum):
    API_TEMPLATE = "api_template"
    EXPERIENCE = "experience"
    TRACE = "trace"
    BEST_PRACTICE = "best_practice"


EXPERIENTIAL_KINDS = frozenset({EntryKind.EXPERIENCE, EntryKind.TRACE, EntryKind.BEST_PRACTICE})


class SimilarityMode(str, Enum):
    LEXICAL = "lexical"
    EMBEDDING = "embedding"
    HYBRID = "hybrid"


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class OutcomeSnapshot:
    """Digest of a verifier outcome stored alongside trace entries."""

    feasible: bool
    latency_ms: float | None = None
    compiled: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {"feasible": self.feasible, "latency_ms": self.latency_ms, "compiled": self.compiled}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "OutcomeSnapshot":
        lat = data.get("latency_ms")
        return cls(
            feasible=bool(data["feasible"]),
            latency_ms=None if lat is None else float(lat),
            compiled=bool(data.get("compiled", data["feasible"])),
        )


@dataclass(frozen=True)
class MemoryEntry:
    id: str
    kind: EntryKind
    content: str
    summary: str
    tags: frozenset[str] = frozenset()
    embedding: tuple[float, ...] | None = None
    origin_task: str | None = None
    origin_iteration: int = 0
    outcome_snapshot: OutcomeSnapshot | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EntryKind(self.kind))
        object.__setattr__(self, "tags", frozenset(self.tags))
        if self.embedding is not None:
            emb = tuple(float(v) for v in self.embedding)
            norm = math.sqrt(sum(v * v for v in emb))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"entry {self.id}: embedding must be unit-normalized (norm={norm:.8f})")
            object.__setattr__(self, "embedding", emb)
        if self.origin_iteration < 0:
            raise ValueError(f"entry {self.id}: origin_iteration must be non-negative")
        if self.kind is EntryKind.TRACE and self.outcome_snapshot is None:
            raise ValueError(f"trace entry {self.id} requires an outcome snapshot")
        if self.kind is EntryKind.API_TEMPLATE and self.origin_task is not None:
            raise ValueError(f"api_template entry {self.id} must not carry an origin task")

    def to_dict(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "id": self.id,
            "kind": self.kind.value,
            "content": self.content,
            "summary": self.summary,
            "tags": sorted(self.tags),
            "origin_iteration": self.origin_iteration,
        }
        if self.embedding is not None:
            record["embedding"] = list(self.embedding)
        if self.origin_task is not None:
            record["origin_task"] = self.origin_task
        if self.outcome_snapshot is not None:
            record["outcome"] = self.outcome_snapshot.to_dict()
        return record

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MemoryEntry":
        unknown = set(data) - ENTRY_FIELDS
        if unknown:
            raise ValueError(f"unknown fields {sorted(unknown)}")
        missing = REQUIRED_ENTRY_FIELDS - set(data)
        if missing:
            raise ValueError(f"missing fields {sorted(missing)}")
        outcome = data.get("outcome")
        emb = data.get("embedding")
        return cls(
            id=str(data["id"]),
            kind=EntryKind(data["kind"]),
            content=str(data["content"]),
            summary=str(data["summary"]),
            tags=frozenset(data["tags"]),
            embedding=None if emb is None else tuple(emb),
            origin_task=data.get("origin_task"),
            origin_iteration=int(data["origin_iteration"]),
            outcome_snapshot=None if outcome is None else OutcomeSnapshot.from_dict(outcome),
        )


@dataclass(frozen=True)
class Query:
    """What a task asks the bank for: free text, tags and an optional embedding."""

    text: str
    tags: frozenset[str] = frozenset()
    embedding: tuple[float, ...] | None = None


@dataclass(frozen=True)
class RetrievalConfig:
    final_count_N: int = 4
    over_retrieval_lambda: float = 2.0
    similarity_mode: SimilarityMode = SimilarityMode.LEXICAL
    kind_quotas: Mapping[str, int] = field(default_factory=dict)
    infra_tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "similarity_mode", SimilarityMode(self.similarity_mode))
        object.__setattr__(self, "infra_tags", frozenset(self.infra_tags))
        object.__setattr__(self, "kind_quotas", {EntryKind(k).value: int(v) for k, v in dict(self.kind_quotas).items()})

    def validate(self) -> None:
        if self.final_count_N <= 0:
            raise ConfigError(f"final_count_N must be positive, got {self.final_count_N}", ["final_count_N"])
        if self.over_retrieval_lambda < 1:
            raise ConfigError(
                f"over_retrieval_lambda must be >= 1, got {self.over_retrieval_lambda}", ["over_retrieval_lambda"]
            )
        bad = [k for k, v in self.kind_quotas.items() if v < 0]
        if bad:
            raise ConfigError(f"kind quotas must be non-negative: {bad}", ["kind_quotas"])

    @property
    def pool_size(self) -> int:
        """Candidate pool size ``K = ceil(lambda * N)``."""
        # The rounding guard keeps e.g. 2.0000000001 * 4 from becoming 9.
        return max(self.final_count_N, math.ceil(round(self.over_retrieval_lambda * self.final_count_N, 9)))


class BankSnapshot:
    """Immutable point-in-time view of a bank, used for all retrieval."""

    def __init__(
        self,
        entries: tuple[MemoryEntry, ...],
        term_counts: Mapping[str, Counter],
        doc_freq: Mapping[str, int],
        generation: int,
    ) -> None:
        self._entries = entries
        self._index = {e.id: e for e in entries}
        self._term_counts = term_counts
        self._doc_freq = doc_freq
        self.generation = generation

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._index

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        return self._entries

    def get(self, entry_id: str) -> MemoryEntry:
        return self._index[entry_id]

    def snapshot(self) -> "BankSnapshot":
        return self

    def idf(self, token: str) -> float:
        n = len(self._entries)
        return math.log((1 + n) / (1 + self._doc_freq.get(token, 0))) + 1.0

    def lexical_scores(self, query_text: str) -> dict[str, float]:
        """TF-IDF cosine between the query and every entry summary sharing a token."""
        q_counts = Counter(tokenize(query_text))
        if not q_counts:
            return {}
        idf = {tok: self.idf(tok) for tok in q_counts}
        q_vec = {tok: c * idf[tok] for tok, c in q_counts.items()}
        q_norm = math.sqrt(sum(v * v for v in q_vec.values()))
        scores: dict[str, float] = {}
        for entry in self._entries:
            counts = self._term_counts[entry.id]
            if not any(tok in counts for tok in q_vec):
                continue
            dot = 0.0
            norm_sq = 0.0
            for tok, c in counts.items():
                w = c * (idf[tok] if tok in idf else self.idf(tok))
                norm_sq += w * w
                if tok in q_vec:
                    dot += w * q_vec[tok]
            if norm_sq > 0:
                scores[entry.id] = min(1.0, dot / (q_norm * math.sqrt(norm_sq)))
        return scores


class MemoryBank:
    """Thread-safe, append-only collection of :class:`MemoryEntry` keyed by id."""

    def __init__(self, entries: Iterable[MemoryEntry] = ()) -> None:
        self._lock = threading.RLock()
        self._entries: list[MemoryEntry] = []
        self._ids: set[str] = set()
        self._term_counts: dict[str, Counter] = {}
        self._doc_freq: Counter = Counter()
        self.generation = 0
        self._cached: BankSnapshot | None = None
        for entry in entries:
            self.append(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._ids

    def __iter__(self):
        return iter(self.snapshot())

    def append(self, entry: MemoryEntry) -> "MemoryBank":
        with self._lock:
            if entry.id in self._ids:
                raise DuplicateEntryError(f"entry id {entry.id!r} already present")
            counts = Counter(tokenize(entry.summary))
            self._entries.append(entry)
            self._ids.add(entry.id)
            self._term_counts[entry.id] = counts
            self._doc_freq.update(counts.keys())
            self.generation += 1
            self._cached = None
        return self

    def get(self, entry_id: str) -> MemoryEntry:
        return self.snapshot().get(entry_id)

    def snapshot(self) -> BankSnapshot:
        with self._lock:
            if self._cached is None:
                self._cached = BankSnapshot(
                    tuple(self._entries), self._term_counts, dict(self._doc_freq), self.generation
                )
            return self._cached

    def restricted_to_task(self, task_id: str) -> "MemoryBank":
        """A fresh bank holding only the entries that originated from ``task_id``."""
        return MemoryBank(e for e in self.snapshot() if e.origin_task == task_id)


def _as_snapshot(bank: MemoryBank | BankSnapshot) -> BankSnapshot:
    return bank.snapshot()


def _cosine(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


def similarity_scores(snap: BankSnapshot, query: Query, mode: SimilarityMode) -> dict[str, float]:
    """Similarity of every entry in ``snap`` to ``query``; absent ids score 0."""
    mode = SimilarityMode(mode)
    lexical: dict[str, float] = {}
    dense: dict[str, float] = {}
    if mode in (SimilarityMode.LEXICAL, SimilarityMode.HYBRID):
        lexical = snap.lexical_scores(query.text)
    if mode in (SimilarityMode.EMBEDDING, SimilarityMode.HYBRID) and query.embedding is not None:
        for entry in snap:
            if entry.embedding is not None:
                dense[entry.id] = _cosine(query.embedding, entry.embedding)
    if mode is SimilarityMode.LEXICAL:
        return lexical
    if mode is SimilarityMode.EMBEDDING:
        return dense
    return {eid: 0.5 * lexical.get(eid, 0.0) + 0.5 * dense.get(eid, 0.0) for eid in set(lexical) | set(dense)}


def rank_entries(
    snap: BankSnapshot,
    query: Query,
    cfg: RetrievalConfig,
    *,
    kinds: Iterable[EntryKind] | None = None,
    require_tag: str | None = None,
    exclude: Iterable[str] = (),
) -> list[tuple[MemoryEntry, float]]:
    """All matching entries sorted by descending similarity, ties by ascending id."""
    scores = similarity_scores(snap, query, cfg.similarity_mode)
    kind_set = None if kinds is None else {EntryKind(k) for k in kinds}
    skip = set(exclude)
    ranked = [
        (e, scores.get(e.id, 0.0))
        for e in snap
        if e.id not in skip
        and (kind_set is None or e.kind in kind_set)
        and (require_tag is None or require_tag in e.tags)
    ]
    ranked.sort(key=lambda pair: (-pair[1], pair[0].id))
    return ranked


def candidate_pool(
    bank: MemoryBank | BankSnapshot,
    task_query: Query,
    cfg: RetrievalConfig,
    *,
    kinds: Iterable[EntryKind] | None = None,
    require_tag: str | None = None,
    exclude: Iterable[str] = (),
) -> list[tuple[MemoryEntry, float]]:
    """Top-``K`` entries by similarity, ``K = ceil(lambda * N)``, capped by bank size."""
    cfg.validate()
    snap = _as_snapshot(bank)
    if len(snap) == 0:
        return []
    ranked = rank_entries(snap, task_query, cfg, kinds=kinds, require_tag=require_tag, exclude=exclude)
    return ranked[: cfg.pool_size]


def hybrid_draft_pool(
    bank: MemoryBank | BankSnapshot,
    task_query: Query,
    cfg: RetrievalConfig,
    referenced_names: Iterable[str] = (),
) -> list[tuple[MemoryEntry, float]]:
    """Drafting pool mixing API coverage with semantically ranked experience.

    Fill order, each step skipping ids already taken and stopping at ``K``:

    1. api_template entries tagged with any of ``cfg.infra_tags`` (by id);
    2. api_template entries whose summary is exactly one of ``referenced_names``;
    3. per-kind quota top-ups from ``cfg.kind_quotas``, taking the most similar
       entries of that kind until its minimum count is met;
    4. the remaining capacity from experience/trace/best_practice entries in
       similarity order.
    """
    cfg.validate()
    snap = _as_snapshot(bank)
    if len(snap) == 0:
        return []
    k = cfg.pool_size
    scores = similarity_scores(snap, task_query, cfg.similarity_mode)
    names = set(referenced_names)
    chosen: list[tuple[MemoryEntry, float]] = []
    taken: set[str] = set()

    def take(entries: Iterable[MemoryEntry]) -> None:
        for e in entries:
            if len(chosen) >= k:
                return
            if e.id not in taken:
                taken.add(e.id)
                chosen.append((e, scores.get(e.id, 0.0)))

    apis = sorted((e for e in snap if e.kind is EntryKind.API_TEMPLATE), key=lambda e: e.id)
    if cfg.infra_tags:
        take(e for e in apis if e.tags & cfg.infra_tags)
    if names:
        take(e for e in apis if e.summary in names)
    for kind_name in sorted(cfg.kind_quotas):
        need = cfg.kind_quotas[kind_name] - sum(1 for e, _ in chosen if e.kind.value == kind_name)
        if need <= 0:
            continue
        ranked = rank_entries(snap, task_query, cfg, kinds=[EntryKind(kind_name)], exclude=taken)
        take(e for e, _ in ranked[:need])
    ranked = rank_entries(snap, task_query, cfg, kinds=EXPERIENTIAL_KINDS, exclude=taken)
    take(e for e, _ in ranked)
    return chosen


def persist(bank: MemoryBank | BankSnapshot, path: str | Path) -> None:
    """Write one JSON object per entry, UTF-8, newline-terminated."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(e.to_dict(), sort_keys=True, ensure_ascii=False) for e in _as_snapshot(bank)]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    tmp.replace(path)


def load(path: str | Path) -> MemoryBank:
    """Read a bank written by :func:`persist`.

    Raises :class:`MemoryFormatError` naming the 1-based line of the first
    malformed record. A missing trailing newline is reported against the
    last line, since it indicates a truncated write.
    """
    text = Path(path).read_text(encoding="utf-8")
    bank = MemoryBank()
    if not text:
        return bank
    lines = text.split("\n")
    if lines[-1] != "":
        raise MemoryFormatError("missing trailing newline (truncated file?)", len(lines))
    for lineno, line in enumerate(lines[:-1], start=1):
        if not line.strip():
            raise MemoryFormatError("blank line", lineno)
        try:
            entry = MemoryEntry.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise MemoryFormatError(str(exc), lineno) from exc
        try:
            bank.append(entry)
        except DuplicateEntryError as exc:
            raise MemoryFormatError(str(exc), lineno) from exc
    return bank
