"""Value-driven memory retrieval engine for iterative kernel synthesis."""

from .errors import ConfigError, DuplicateEntryError, InfraError, KernelMemError, MemoryFormatError, TemplateError
from .memory import EntryKind, MemoryBank, MemoryEntry, Query, RetrievalConfig, candidate_pool, hybrid_draft_pool
from .orchestrator import Mode, OrchestratorConfig, SharedState, run_episode, run_suite
from .task import CandidateKernel, Task
from .valuation import QTable, RewardStats, Stage, ValueConfig, draft_reward, refine_reward
from .verifier import Verifier, VerifierOutcome, verify

__version__ = "0.1.0"

__all__ = [
    "CandidateKernel",
    "ConfigError",
    "DuplicateEntryError",
    "EntryKind",
    "InfraError",
    "KernelMemError",
    "MemoryBank",
    "MemoryEntry",
    "MemoryFormatError",
    "Mode",
    "OrchestratorConfig",
    "QTable",
    "Query",
    "RetrievalConfig",
    "RewardStats",
    "SharedState",
    "Stage",
    "Task",
    "TemplateError",
    "ValueConfig",
    "Verifier",
    "VerifierOutcome",
    "candidate_pool",
    "draft_reward",
    "hybrid_draft_pool",
    "refine_reward",
    "run_episode",
    "run_suite",
    "verify",
]
