"""Run configuration: one JSON document, strictly validated.

Top-level keys::

    mode, budget_T, parallelism, seed, pass_k, infra_retries, backoff_base_s,
    retrieval {...}, value {...}, verifier {...}, generator {...},
    paths {...}, world {...}, experiment {...}

Every section rejects unknown keys; the error lists all offending dotted keys.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .memory import RetrievalConfig
from .orchestrator import Mode, OrchestratorConfig
from .simenv import WorldSpec, sim_config
from .valuation import ValueConfig


@dataclass(frozen=True)
class VerifierSettings:
    command: tuple[str, ...] = ()
    wall_timeout_s: float = 3900.0
    correctness_timeout_s: float = 60.0
    rules: str = "ascend"
    auditor_policy: str = "fail_open"


@dataclass(frozen=True)
class GeneratorSettings:
    kind: str = "remote_chat"
    model: str = "default"
    endpoint_env: str = "KERNELMEM_GENERATOR_URL"
    api_key_env: str = "KERNELMEM_GENERATOR_KEY"
    temperature: float | None = None
    seed: int | None = None
    timeout_s: float = 600.0
    script: str | None = None
    default: str = ""
    templates_dir: str | None = None
    max_feedback_chars: int = 4000
    char_budget: int | None = None


@dataclass(frozen=True)
class PathSettings:
    bank: str | None = None
    qtable: str | None = None
    tasks: str | None = None
    report_dir: str = "reports"


@dataclass(frozen=True)
class ExperimentSettings:
    trials: int = 20
    order_by_level: bool = True


@dataclass(frozen=True)
class RunConfig:
    mode: str = "evokernel"
    budget_T: int = 30
    parallelism: int = 1
    seed: int = 0
    pass_k: int | None = None
    infra_retries: int = 3
    backoff_base_s: float = 0.5
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    value: ValueConfig = field(default_factory=ValueConfig)
    verifier: VerifierSettings = field(default_factory=VerifierSettings)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    world: WorldSpec = field(default_factory=WorldSpec)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def orchestrator(self) -> OrchestratorConfig:
        return OrchestratorConfig(
            budget_T=self.budget_T,
            parallelism=self.parallelism,
            retrieval=self.retrieval,
            value=replace(self.value, rng_seed=self.seed),
            mode=Mode(self.mode),
            infra_retries=self.infra_retries,
            backoff_base_s=self.backoff_base_s,
            max_feedback_chars=self.generator.max_feedback_chars,
            pass_k=self.pass_k,
        )

    def sim_orchestrator(self) -> OrchestratorConfig:
        return sim_config(
            self.budget_T,
            self.seed,
            Mode(self.mode),
            parallelism=self.parallelism,
            retrieval=self.retrieval,
            value=replace(self.value, rng_seed=self.seed),
        )

    def to_dict(self) -> dict[str, Any]:
        """The effective configuration; feeding it back to :func:`parse_config` is idempotent."""
        out = asdict(self)
        out["retrieval"]["similarity_mode"] = self.retrieval.similarity_mode.value
        out["retrieval"]["infra_tags"] = sorted(self.retrieval.infra_tags)
        out["retrieval"]["kind_quotas"] = dict(sorted(self.retrieval.kind_quotas.items()))
        out["value"]["step_mode"] = self.value.step_mode.value
        out["verifier"]["command"] = list(self.verifier.command)
        out["world"] = self.world.to_dict()
        return out


_SECTIONS = {
    "retrieval": RetrievalConfig,
    "value": ValueConfig,
    "verifier": VerifierSettings,
    "generator": GeneratorSettings,
    "paths": PathSettings,
    "experiment": ExperimentSettings,
}


def _build(cls, data: Mapping[str, Any], prefix: str, errors: list[str]):
    if not isinstance(data, Mapping):
        errors.append(prefix)
        return cls()
    names = {f.name for f in fields(cls)}
    errors.extend(f"{prefix}.{k}" for k in sorted(set(data) - names))
    values = {k: v for k, v in data.items() if k in names}
    if cls is VerifierSettings and "command" in values:
        values["command"] = tuple(values["command"])
    if cls is RetrievalConfig and "infra_tags" in values:
        values["infra_tags"] = frozenset(values["infra_tags"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}", [prefix]) from exc


def parse_config(data: Mapping[str, Any]) -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    errors = sorted(set(data) - top)
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in top:
            continue
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key, errors)
        elif key == "world":
            if isinstance(value, Mapping):
                unknown = sorted(set(value) - set(WorldSpec.__dataclass_fields__))
                errors.extend(f"world.{k}" for k in unknown)
                if not unknown:
                    kwargs[key] = WorldSpec.from_dict(value)
            else:
                errors.append("world")
        else:
            kwargs[key] = value
    if errors:
        raise ConfigError(f"unknown or malformed config keys: {errors}", errors)
    cfg = RunConfig(**kwargs)
    try:
        Mode(cfg.mode)
    except ValueError:
        raise ConfigError(f"unknown mode {cfg.mode!r}", ["mode"]) from None
    if cfg.generator.kind not in ("remote_chat", "scripted"):
        raise ConfigError(f"unknown generator kind {cfg.generator.kind!r}", ["generator.kind"])
    if cfg.verifier.rules not in ("ascend", "none"):
        raise ConfigError(f"unknown rule set {cfg.verifier.rules!r}", ["verifier.rules"])
    cfg.orchestrator().validate()
    cfg.world.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", ["<file>"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", ["<file>"]) from None
    return parse_config(data)


def check_paths(cfg: RunConfig, *, need_tasks: bool) -> None:
    """Input files named in ``paths`` must exist before a run starts."""
    missing = []
    if need_tasks and not cfg.paths.tasks:
        missing.append("paths.tasks")
    # A missing bank or Q-table file just means starting empty.
    if cfg.paths.tasks and not Path(cfg.paths.tasks).exists():
        missing.append("paths.tasks")
    if cfg.generator.kind == "scripted" and cfg.generator.script and not Path(cfg.generator.script).exists():
        missing.append("generator.script")
    if cfg.generator.templates_dir and not Path(cfg.generator.templates_dir).is_dir():
        missing.append("generator.templates_dir")
    if missing:
        raise ConfigError(f"unresolvable paths: {missing}", missing)
