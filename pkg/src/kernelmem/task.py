"""Task and candidate records passed between the orchestrator, generator and verifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping


@dataclass(frozen=True)
class Task:
    """One synthesis target: a reference implementation plus metadata.

    ``eval_tolerance`` is ``(atol, rtol)``; both default to 1e-2.
    """

    id: str
    reference_spec: str
    category: str = "default"
    level: str = "L1"
    eval_tolerance: tuple[float, float] = (1e-2, 1e-2)
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        atol, rtol = self.eval_tolerance
        if atol <= 0 or rtol <= 0:
            raise ValueError(f"task {self.id}: tolerances must be positive, got {self.eval_tolerance}")

    @property
    def atol(self) -> float:
        return self.eval_tolerance[0]

    @property
    def rtol(self) -> float:
        return self.eval_tolerance[1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "reference_spec": self.reference_spec,
            "category": self.category,
            "level": self.level,
            "eval_tolerance": list(self.eval_tolerance),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Task":
        tol = data.get("eval_tolerance", (1e-2, 1e-2))
        return cls(
            id=str(data["id"]),
            reference_spec=str(data.get("reference_spec", "")),
            category=str(data.get("category", "default")),
            level=str(data.get("level", "L1")),
            eval_tolerance=(float(tol[0]), float(tol[1])),
            metadata=dict(data.get("metadata", {})),
        )


@dataclass(frozen=True)
class CandidateKernel:
    """A parsed generation: named source sections plus provenance."""

    id: str
    source_sections: Mapping[str, str]
    iteration: int
    parent_start_point: str | None = None
    context_used: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.source_sections or not any(s.strip() for s in self.source_sections.values()):
            raise ValueError(f"candidate {self.id} has no source")

    def section(self, name: str) -> str:
        return self.source_sections.get(name, "")
