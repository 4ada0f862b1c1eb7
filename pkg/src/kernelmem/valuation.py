"""Rewards, streaming reward normalization, Monte-Carlo Q updates and epsilon-greedy selection.

Q updates always move the estimate toward the (already bounded) reward:
``q <- q + a * (r - q)``. There is deliberately no clipped-error variant;
boundedness comes from clipping rewards, never from clipping the delta.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Hashable, Mapping, Sequence, TypeVar

from .errors import ConfigError


class Stage(str, Enum):
    DRAFT = "draft"
    REFINE = "refine"


class StepMode(str, Enum):
    CONSTANT = "constant"
    HARMONIC = "harmonic"


_BELOW_ONE = math.nextafter(1.0, 0.0)


def draft_reward(outcome) -> float:
    """+1 when the feasibility gate passes, else -1."""
    return 1.0 if outcome.feasible() else -1.0


def refine_reward(best_so_far_b: float, outcome) -> float:
    """``tanh(ln b - ln latency)`` for feasible outcomes, -1 otherwise."""
    if not outcome.feasible():
        return -1.0
    latency = outcome.latency_ms
    if latency is None or latency <= 0:
        raise ValueError(f"feasible outcome needs a positive latency, got {latency!r}")
    if best_so_far_b <= 0:
        raise ValueError(f"best-so-far latency must be positive, got {best_so_far_b!r}")
    value = math.tanh(math.log(best_so_far_b) - math.log(latency))
    # tanh rounds to exactly +-1 once |log ratio| exceeds ~19; keep the raw
    # reward strictly inside (-1, 1) so it never collides with the infeasible value.
    if abs(value) == 1.0:
        value = math.copysign(_BELOW_ONE, value)
    return value


# ---------------------------------------------------------------------------
# Streaming statistics
# ---------------------------------------------------------------------------


@dataclass
class RewardStats:
    """Running mean / population variance (Welford) with a sigma floor and output clip."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    sigma_min: float = 0.01
    clip_B: float = 5.0

    def __post_init__(self) -> None:
        if self.sigma_min <= 0 or self.clip_B <= 0:
            raise ConfigError("sigma_min and clip_B must be positive", ["sigma_min", "clip_B"])
        self._lock = threading.Lock()

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count else 0.0

    @property
    def sigma(self) -> float:
        return max(math.sqrt(self.variance), self.sigma_min)

    def update(self, raw: float) -> "RewardStats":
        if not math.isfinite(raw):
            raise ValueError(f"reward must be finite, got {raw!r}")
        with self._lock:
            self.count += 1
            delta = raw - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (raw - self.mean)
        return self

    def normalize(self, raw: float) -> float:
        with self._lock:
            if self.count == 0:
                z = raw
            else:
                z = (raw - self.mean) / self.sigma
        return min(self.clip_B, max(-self.clip_B, z))

    def normalize_then_update(self, raw: float) -> float:
        """Normalize against the statistics seen so far, then fold ``raw`` in."""
        with self._lock:
            if self.count == 0:
                z = raw
            else:
                z = (raw - self.mean) / max(math.sqrt(self.m2 / self.count), self.sigma_min)
            self.count += 1
            delta = raw - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (raw - self.mean)
        return min(self.clip_B, max(-self.clip_B, z))

    def to_dict(self) -> dict[str, float]:
        return {"count": self.count, "mean": self.mean, "m2": self.m2, "sigma_min": self.sigma_min, "clip_B": self.clip_B}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RewardStats":
        return cls(
            count=int(data["count"]),
            mean=float(data["mean"]),
            m2=float(data["m2"]),
            sigma_min=float(data["sigma_min"]),
            clip_B=float(data["clip_B"]),
        )


def stats_update(stats: RewardStats, raw: float) -> RewardStats:
    return stats.update(raw)


def normalize(stats: RewardStats, raw: float) -> float:
    return stats.normalize(raw)


# ---------------------------------------------------------------------------
# Q table
# ---------------------------------------------------------------------------

QKey = tuple[str, str, "str | None"]


def make_key(stage: Stage | str, item_id: str, bucket: str | None = None) -> QKey:
    return (Stage(stage).value, item_id, bucket)


def key_to_str(key: QKey) -> str:
    stage, item_id, bucket = key
    return f"{stage}/{item_id}" if bucket is None else f"{stage}/{item_id}/{bucket}"


def key_from_str(text: str) -> QKey:
    # Item ids may themselves contain "/" only when a bucket is absent.
    stage, _, rest = text.partition("/")
    if not rest:
        raise ValueError(f"malformed q-table key {text!r}")
    item_id, sep, bucket = rest.rpartition("/")
    if not sep:
        return (Stage(stage).value, rest, None)
    return (Stage(stage).value, item_id, bucket)


def mc_step(q, reward, alpha: float, visits: int, step_mode: StepMode = StepMode.CONSTANT):
    """One step of ``q + a * (r - q)``; works elementwise on numpy arrays too.

    ``a`` is ``alpha`` in constant mode and ``1 / visits`` in harmonic mode,
    where ``visits`` already counts this update. In harmonic mode dividing
    by the integer count keeps exact arithmetic exact (e.g. Fraction rewards).
    """
    if step_mode is StepMode.CONSTANT:
        return q + alpha * (reward - q)
    return q + (reward - q) / visits


@dataclass
class QEntry:
    q: float
    visits: int = 0


class QTable:
    """Stage-keyed value estimates shared across tasks and episodes.

    Keys are ``(stage, item_id, bucket)``; unseen keys read as ``q_init``.
    """

    def __init__(
        self,
        step_mode: StepMode | str = StepMode.CONSTANT,
        alpha: float = 0.1,
        q_init: float = 0.0,
    ) -> None:
        if not 0 < alpha <= 1:
            raise ConfigError(f"alpha must be in (0, 1], got {alpha}", ["alpha"])
        self.step_mode = StepMode(step_mode)
        self.alpha = alpha
        self.q_init = q_init
        self._values: dict[QKey, QEntry] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, key: object) -> bool:
        return key in self._values

    def q(self, key: QKey) -> float:
        entry = self._values.get(key)
        return self.q_init if entry is None else entry.q

    def visits(self, key: QKey) -> int:
        entry = self._values.get(key)
        return 0 if entry is None else entry.visits

    def update(self, key: QKey, reward: float) -> float:
        """Apply one Monte-Carlo step toward ``reward`` and return the new value."""
        with self._lock:
            entry = self._values.get(key)
            if entry is None:
                entry = self._values[key] = QEntry(self.q_init, 0)
            entry.visits += 1
            entry.q = mc_step(entry.q, reward, self.alpha, entry.visits, self.step_mode)
            return entry.q

    def view(self) -> dict[QKey, float]:
        """Point-in-time copy of all stored values."""
        with self._lock:
            return {k: e.q for k, e in self._values.items()}

    def items(self) -> list[tuple[QKey, QEntry]]:
        with self._lock:
            return [(k, QEntry(e.q, e.visits)) for k, e in self._values.items()]

    def to_dict(self) -> dict[str, dict[str, float]]:
        return {key_to_str(k): {"q": e.q, "visits": e.visits} for k, e in sorted(self.items(), key=lambda kv: key_to_str(kv[0]))}

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, Any]], **kwargs: Any) -> "QTable":
        table = cls(**kwargs)
        for text, rec in data.items():
            table._values[key_from_str(text)] = QEntry(float(rec["q"]), int(rec["visits"]))
        return table

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, **kwargs: Any) -> "QTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), **kwargs)


def update_q(table: QTable, key: QKey, reward: float) -> QTable:
    table.update(key, reward)
    return table


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueConfig:
    epsilon_start: float = 0.3
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 200
    rng_seed: int = 0
    alpha: float = 0.1
    step_mode: StepMode = StepMode.CONSTANT
    q_init: float = 0.0
    sigma_min: float = 0.01
    clip_B: float = 5.0
    per_task_stats: bool = False
    bucket_by_category: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "step_mode", StepMode(self.step_mode))

    def validate(self) -> None:
        bad = []
        for name in ("epsilon_start", "epsilon_end"):
            if not 0 <= getattr(self, name) <= 1:
                bad.append(name)
        if self.epsilon_end > self.epsilon_start:
            bad.append("epsilon_end")
        if self.epsilon_decay_steps <= 0:
            bad.append("epsilon_decay_steps")
        if not 0 < self.alpha <= 1:
            bad.append("alpha")
        if bad:
            raise ConfigError(f"invalid value config fields: {sorted(set(bad))}", sorted(set(bad)))


def epsilon_at(cfg: ValueConfig, global_step: int) -> float:
    """Linear decay from ``epsilon_start`` to ``epsilon_end``, constant afterwards."""
    if global_step >= cfg.epsilon_decay_steps:
        return cfg.epsilon_end
    frac = max(global_step, 0) / cfg.epsilon_decay_steps
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


T = TypeVar("T")


def epsilon_greedy_pick(
    items: Sequence[T],
    n: int,
    epsilon: float,
    rng: random.Random,
    sort_key,
) -> list[T]:
    """Pick ``n`` items without replacement, one epsilon-greedy draw per slot.

    ``sort_key`` orders items best-first for the greedy branch. Every slot
    consumes exactly one ``rng.random()`` and, when exploring, one
    ``rng.randrange``.
    """
    remaining = sorted(items, key=sort_key)
    picked: list[T] = []
    for _ in range(min(n, len(remaining))):
        if rng.random() < epsilon:
            idx = rng.randrange(len(remaining))
        else:
            idx = 0
        picked.append(remaining.pop(idx))
    return picked


def select_by_value(
    pool: Sequence[tuple[Any, float]],
    table: QTable,
    stage: Stage | str,
    n: int,
    epsilon: float,
    rng: random.Random,
    bucket: str | None = None,
) -> list[tuple[Any, float]]:
    """Filter a similarity-ranked pool down to ``n`` entries by Q value.

    Greedy ties break by higher similarity, then ascending entry id.
    """
    if not pool:
        return []
    values = table.view()
    stage = Stage(stage)

    def q_of(entry) -> float:
        return values.get(make_key(stage, entry.id, bucket), table.q_init)

    return epsilon_greedy_pick(pool, n, epsilon, rng, sort_key=lambda pair: (-q_of(pair[0]), -pair[1], pair[0].id))


def by_similarity(pool: Sequence[tuple[Any, float]], n: int) -> list[tuple[Any, float]]:
    """Heuristic selection: the ``n`` most similar entries, ignoring values."""
    return sorted(pool, key=lambda pair: (-pair[1], pair[0].id))[:n]


def seeded_rng(*parts: Hashable) -> random.Random:
    """A Random stream derived deterministically from ``parts`` (not from ``hash()``)."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))
