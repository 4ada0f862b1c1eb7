"""Prompt rendering, generator backends and candidate parsing.

The engine only needs ``generate(request) -> str``; everything that turns
retrieved memory into prompt text lives here so that templates stay
configuration rather than logic.
"""

from __future__ import annotations

import json
import logging
import os
import re
import string
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

from .errors import InfraError, TemplateError
from .task import CandidateKernel, Task
from .valuation import Stage

log = logging.getLogger(__name__)

TRUNCATION_MARKER = "\n...[feedback truncated]"
DEFAULT_MAX_FEEDBACK_CHARS = 4000

ASCEND_SECTIONS = (
    "project_json_src",
    "host_tiling_src",
    "host_operator_src",
    "kernel_src",
    "python_bind_src",
    "model_src",
)


# ---------------------------------------------------------------------------
# Requests and templates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextItem:
    """One retrieved entry as it will be shown to the generator."""

    entry_id: str
    kind: str
    text: str


@dataclass(frozen=True)
class GenerationRequest:
    task: Task
    stage: Stage
    context: tuple[ContextItem, ...] = ()
    start_point_source: str | None = None
    feedback: str | None = None
    baseline_latency: float | None = None
    last_code: str | None = None
    child_summaries: tuple[str, ...] = ()
    prompt_template_id: str = "default"

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage", Stage(self.stage))

    @property
    def context_ids(self) -> tuple[str, ...]:
        return tuple(item.entry_id for item in self.context)


@dataclass(frozen=True)
class PromptTemplates:
    """Template text with ``{placeholder}`` fields.

    ``base`` receives ``task_id``, ``category``, ``level``, ``reference_spec``
    and ``context``; ``performance`` receives ``latency``; ``context_item``
    receives ``kind``, ``entry_id`` and ``text``.
    """

    system: str = "You write high-performance accelerator kernels."
    base: str = (
        "Task {task_id} ({category}, {level}).\n"
        "Reference implementation:\n{reference_spec}\n"
        "{context}"
        "Return every source section as NAME = r'''...''' blocks."
    )
    context_item: str = "### [{kind}] {entry_id}\n{text}\n"
    context_header: str = "Retrieved memory, most useful first:\n"
    children_header: str = "Variants already derived from the baseline:\n"
    optimize: str = "This version passes all checks. Produce a faster version that stays correct."
    performance: str = "Performance: {latency:.2f} ms"

    @classmethod
    def from_dir(cls, path: str | Path) -> "PromptTemplates":
        """Override any field with ``<field>.txt`` found in ``path``."""
        path = Path(path)
        overrides = {}
        for name in cls.__dataclass_fields__:
            candidate = path / f"{name}.txt"
            if candidate.exists():
                overrides[name] = candidate.read_text(encoding="utf-8")
        return cls(**overrides)


def fill_template(template: str, values: Mapping[str, Any]) -> str:
    """Strict ``str.format`` substitution; unknown or missing fields raise TemplateError."""
    fields = {fname for _, fname, _, _ in string.Formatter().parse(template) if fname is not None}
    missing = sorted(f for f in fields if f.split(".")[0].split("[")[0] not in values)
    if missing:
        raise TemplateError(f"unresolved placeholders: {missing}")
    try:
        return template.format(**values)
    except (KeyError, IndexError, ValueError) as exc:
        raise TemplateError(f"template substitution failed: {exc}") from exc


def truncate_feedback(text: str, limit: int = DEFAULT_MAX_FEEDBACK_CHARS) -> str:
    """Keep the first ``limit`` characters, appending a marker when cut."""
    if len(text) <= limit:
        return text
    return text[:limit] + TRUNCATION_MARKER


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _render_context(items: Sequence[ContextItem], children: Sequence[str], templates: PromptTemplates) -> str:
    parts: list[str] = []
    if items:
        parts.append(templates.context_header)
        for item in items:
            parts.append(fill_template(templates.context_item, {"kind": item.kind, "entry_id": item.entry_id, "text": item.text}))
    if children:
        parts.append(templates.children_header)
        parts.extend(f"- {c}\n" for c in children)
    return "".join(parts)


def render_messages(
    request: GenerationRequest,
    templates: PromptTemplates = PromptTemplates(),
    *,
    max_feedback_chars: int = DEFAULT_MAX_FEEDBACK_CHARS,
    char_budget: int | None = None,
) -> list[dict[str, str]]:
    """Chat-shaped history for one generation call.

    Drafting: system, base prompt, then the previous attempt and its
    feedback when present. Refining: system, base prompt, the baseline
    code, an optimize turn carrying the baseline latency, then the latest
    attempt and its feedback.

    When ``char_budget`` is set and exceeded, feedback is dropped first
    and then trailing context items, lowest-ranked first.
    """
    feedback = truncate_feedback(request.feedback, max_feedback_chars) if request.feedback else None
    context = list(request.context)

    def build() -> list[dict[str, str]]:
        base = fill_template(
            templates.base,
            {
                "task_id": request.task.id,
                "category": request.task.category,
                "level": request.task.level,
                "reference_spec": request.task.reference_spec,
                "context": _render_context(context, request.child_summaries, templates),
            },
        )
        messages = [{"role": "system", "content": templates.system}, {"role": "user", "content": base}]
        if request.stage is Stage.REFINE and request.start_point_source is not None:
            messages.append({"role": "assistant", "content": request.start_point_source})
            turn = templates.optimize
            if request.baseline_latency is not None:
                turn = fill_template(templates.performance, {"latency": request.baseline_latency}) + "\n" + turn
            messages.append({"role": "user", "content": turn})
        if request.last_code is not None:
            messages.append({"role": "assistant", "content": request.last_code})
            if feedback:
                messages.append({"role": "user", "content": feedback})
        return messages

    messages = build()
    if char_budget is not None:
        while _size(messages) > char_budget and (feedback or context):
            if feedback:
                feedback = None
            else:
                context.pop()
            messages = build()
    return messages


def _size(messages: Sequence[Mapping[str, str]]) -> int:
    return sum(len(m["content"]) for m in messages)


def render_prompt(
    request: GenerationRequest,
    templates: PromptTemplates = PromptTemplates(),
    **kwargs: Any,
) -> str:
    """The message history flattened into ``[Role]: text`` blocks."""
    return "\n".join(f"[{m['role'].capitalize()}]: {m['content']}" for m in render_messages(request, templates, **kwargs))


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class Generator(Protocol):
    def generate(self, request: GenerationRequest) -> str: ...


def request_key(request: GenerationRequest) -> tuple[str, str, tuple[str, ...]]:
    """Lookup key used by :class:`ScriptedGenerator`."""
    return (request.task.id, request.stage.value, tuple(sorted(request.context_ids)))


class ScriptedGenerator:
    """Table-driven generator: ``(task_id, stage, sorted context ids) -> text``.

    Keys may give the context ids as any iterable; they are normalized to a
    sorted tuple. Misses return ``default``.
    """

    def __init__(self, table: Mapping[tuple[str, str, Any], str] | None = None, default: str = "") -> None:
        normalized = {}
        for (task_id, stage, ids), text in (table or {}).items():
            normalized[(task_id, Stage(stage).value, tuple(sorted(ids)))] = text
        self._table = normalized
        self.default = default
        self.calls = 0

    def generate(self, request: GenerationRequest) -> str:
        self.calls += 1
        return self._table.get(request_key(request), self.default)


class ConstantGenerator:
    """Always returns the same text (useful for baselines and smoke tests)."""

    def __init__(self, text: str) -> None:
        self.text = text
        self.calls = 0

    def generate(self, request: GenerationRequest) -> str:
        self.calls += 1
        return self.text


def redact(text: str, secrets: Sequence[str]) -> str:
    for secret in secrets:
        if secret:
            text = text.replace(secret, "[REDACTED]")
    return text


@dataclass
class RemoteChatGenerator:
    """Chat-completion client over plain HTTP.

    The endpoint and key are read from the environment variables named by
    ``endpoint_env`` and ``api_key_env`` unless given directly. The JSON
    body is ``{"model", "messages", ...extra}``; the reply text is found by
    walking ``response_path``. Any network or HTTP error raises
    :class:`InfraError` so the orchestrator can retry it.
    """

    model: str = "default"
    endpoint: str | None = None
    api_key: str | None = None
    endpoint_env: str = "KERNELMEM_GENERATOR_URL"
    api_key_env: str = "KERNELMEM_GENERATOR_KEY"
    temperature: float | None = None
    seed: int | None = None
    timeout_s: float = 600.0
    response_path: tuple[str | int, ...] = ("choices", 0, "message", "content")
    extra_body: Mapping[str, Any] = field(default_factory=dict)
    templates: PromptTemplates = field(default_factory=PromptTemplates)
    max_feedback_chars: int = DEFAULT_MAX_FEEDBACK_CHARS
    char_budget: int | None = None

    def _resolve(self) -> tuple[str, str | None]:
        url = self.endpoint or os.environ.get(self.endpoint_env)
        if not url:
            raise InfraError(f"no generator endpoint configured (set {self.endpoint_env})", kind="config")
        return url, self.api_key or os.environ.get(self.api_key_env)

    def body(self, request: GenerationRequest) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "model": self.model,
            "messages": render_messages(
                request, self.templates, max_feedback_chars=self.max_feedback_chars, char_budget=self.char_budget
            ),
        }
        if self.temperature is not None:
            payload["temperature"] = self.temperature
        if self.seed is not None:
            payload["seed"] = self.seed
        payload.update(self.extra_body)
        return payload

    def generate(self, request: GenerationRequest) -> str:
        url, key = self._resolve()
        secrets = [key] if key else []
        data = json.dumps(self.body(request)).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        http_request = urllib.request.Request(url, data=data, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout_s) as resp:
                raw = resp.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            raise InfraError(redact(f"generator HTTP {exc.code}: {exc.reason}", secrets), kind="http") from None
        except (urllib.error.URLError, OSError) as exc:
            raise InfraError(redact(f"generator unreachable: {exc}", secrets), kind="network") from None
        try:
            node: Any = json.loads(raw)
            for step in self.response_path:
                node = node[step]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise InfraError(f"unexpected generator response shape: {exc}", kind="parse") from None
        return redact(str(node), secrets)


# ---------------------------------------------------------------------------
# Candidate parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SectionSchema:
    required: tuple[str, ...]
    optional: tuple[str, ...] = ()


ASCEND_SCHEMA = SectionSchema(ASCEND_SECTIONS)

_OPEN_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)[ \t]*=[ \t]*[rR]?('''|\"\"\")(.*)$")


@dataclass(frozen=True)
class ParseFailure:
    missing: tuple[str, ...]
    message: str

    def feedback(self) -> str:
        return f"[FAIL] Could not parse the answer: missing sections {', '.join(self.missing)}."


def parse_sections(raw: str) -> dict[str, str]:
    """Extract every ``NAME = r'''...'''`` (or triple double quote) block.

    A block opens at a line starting with the marker and closes at the first
    later line consisting solely of the same delimiter, so the other quote
    style (or the same style mid-line) may appear inside the body.
    Unterminated blocks are ignored.
    """
    lines = raw.splitlines()
    sections: dict[str, str] = {}
    i = 0
    while i < len(lines):
        match = _OPEN_RE.match(lines[i])
        if not match:
            i += 1
            continue
        name, delim, rest = match.groups()
        if rest.rstrip().endswith(delim) and rest.strip() != "":
            # Single-line block: NAME = r'''text'''
            sections[name] = rest.rstrip()[: -len(delim)]
            i += 1
            continue
        body: list[str] = [rest] if rest.strip() else []
        j = i + 1
        while j < len(lines) and lines[j].strip() != delim:
            body.append(lines[j])
            j += 1
        if j >= len(lines):
            break
        sections[name] = "\n".join(body)
        i = j + 1
    return sections


def parse_candidate(
    raw: str,
    schema: SectionSchema,
    *,
    candidate_id: str,
    iteration: int,
    parent_start_point: str | None = None,
    context_used: Sequence[str] = (),
) -> CandidateKernel | ParseFailure:
    found = parse_sections(raw)
    missing = tuple(name for name in schema.required if not found.get(name, "").strip())
    if missing:
        return ParseFailure(missing, f"missing required sections: {list(missing)}")
    keep = set(schema.required) | set(schema.optional)
    sections = {k: v for k, v in found.items() if k in keep} if keep else found
    return CandidateKernel(
        id=candidate_id,
        source_sections=sections,
        iteration=iteration,
        parent_start_point=parent_start_point,
        context_used=tuple(context_used),
    )


def serialize_candidate(sections: Mapping[str, str]) -> str:
    """Inverse of :func:`parse_sections` for section bodies without a bare delimiter line."""
    blocks = []
    for name, body in sections.items():
        bare = {line.strip() for line in body.splitlines()}
        delim = '"""' if "'''" in bare else "'''"
        if delim in bare:
            raise ValueError(f"section {name} contains bare lines of both delimiters")
        blocks.append(f"{name} = r{delim}\n{body}\n{delim}\n")
    return "\n".join(blocks)
