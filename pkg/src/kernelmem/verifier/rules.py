"""Static anti-hacking screening plus an optional model-based auditor hook.

The rule layer is pattern based: substring checks for dispatch tokens,
regex scans for forbidden calls inside a scoped region (the function a
binding registers, or a model's ``forward`` method) and a small structural
check of the model class. Python sections are inspected with :mod:`ast`;
C++ sections by brace matching.
"""

from __future__ import annotations

import ast
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

from ..errors import InfraError
from ..task import CandidateKernel, Task

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Violation:
    category: str
    message: str
    excerpt: str = ""

    def to_dict(self) -> dict[str, str]:
        return {"category": self.category, "message": self.message, "excerpt": self.excerpt}


@dataclass(frozen=True)
class ForbiddenCalls:
    """``pattern`` must capture the called name in group 1; names in ``allow`` pass."""

    pattern: str
    allow: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        compiled = re.compile(self.pattern)
        if compiled.groups < 1:
            raise ValueError(f"forbidden-call pattern needs a capture group: {self.pattern!r}")
        object.__setattr__(self, "allow", frozenset(self.allow))


@dataclass(frozen=True)
class ClassContract:
    class_name: str
    base_name: str
    must_call_symbol: str
    method: str = "forward"


@dataclass(frozen=True)
class HackRuleSet:
    required_dispatch_tokens: Mapping[str, Sequence[str]] = field(default_factory=dict)
    forbidden_call_patterns: Mapping[str, Sequence[ForbiddenCalls]] = field(default_factory=dict)
    required_class_contract: ClassContract | None = None
    model_section: str = "model_src"
    binding_section: str = "python_bind_src"
    # Scan only the function the binding registers (``m.def(..., &fn)``) when one is found.
    scope_binding_to_registered: bool = True

    def is_empty(self) -> bool:
        return not (self.required_dispatch_tokens or self.forbidden_call_patterns or self.required_class_contract)


ALLOCATION_CALLS = frozenset({"empty", "empty_like", "zeros", "zeros_like", "empty_strided"})


def ascend_rules() -> HackRuleSet:
    """Rule set for AscendC operator projects exposed to PyTorch through pybind."""
    return HackRuleSet(
        required_dispatch_tokens={"python_bind_src": ("EXEC_NPU_CMD",)},
        forbidden_call_patterns={
            "python_bind_src": (ForbiddenCalls(r"\b(?:at|torch)::((?:\w+::)*\w+)\s*\(", ALLOCATION_CALLS),),
            "model_src": (
                ForbiddenCalls(r"\b((?:torch\.nn\.functional|torch|F)\.[A-Za-z_]\w*)\s*\(", frozenset()),
            ),
        },
        required_class_contract=ClassContract("ModelNew", "torch.nn.Module", "custom_ops_lib"),
    )


# ---------------------------------------------------------------------------
# C++ helpers
# ---------------------------------------------------------------------------


def _matching_brace(text: str, open_idx: int) -> int:
    depth = 0
    for i in range(open_idx, len(text)):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return i
    return len(text) - 1


def _registered_functions(binding: str) -> list[str]:
    match = re.search(r"PYBIND11_MODULE\s*\([^)]*\)\s*\{", binding)
    if not match:
        return []
    body = binding[match.end() - 1 : _matching_brace(binding, match.end() - 1) + 1]
    return re.findall(r"\.def\s*\(\s*\"[^\"]*\"\s*,\s*&?\s*([A-Za-z_]\w*)", body)


def _cpp_function_body(text: str, name: str) -> str | None:
    for match in re.finditer(rf"\b{re.escape(name)}\s*\(", text):
        # Skip call sites and the registration itself; a definition has "{" after the parameter list.
        depth = 0
        i = match.end() - 1
        while i < len(text):
            if text[i] == "(":
                depth += 1
            elif text[i] == ")":
                depth -= 1
                if depth == 0:
                    break
            i += 1
        rest = text[i + 1 :]
        head = re.match(r"\s*(?:const\s*)?(?:noexcept\s*)?\{", rest)
        if head:
            start = i + 1 + head.end() - 1
            return text[start : _matching_brace(text, start) + 1]
    return None


def _line_of(text: str, pos: int) -> str:
    start = text.rfind("\n", 0, pos) + 1
    end = text.find("\n", pos)
    return text[start : end if end != -1 else len(text)].strip()


def _scan_forbidden(region: str, rules: Sequence[ForbiddenCalls]) -> list[tuple[str, str]]:
    hits = []
    for rule in rules:
        for m in re.finditer(rule.pattern, region):
            name = m.group(1)
            short = name.rsplit("::", 1)[-1].rsplit(".", 1)[-1]
            if name in rule.allow or short in rule.allow:
                continue
            hits.append((name, _line_of(region, m.start())))
    return hits


# ---------------------------------------------------------------------------
# Python model helpers
# ---------------------------------------------------------------------------


def _dotted(node: ast.AST) -> str | None:
    parts = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if isinstance(node, ast.Name):
        parts.append(node.id)
        return ".".join(reversed(parts))
    return None


def _base_matches(base: ast.AST, wanted: str) -> bool:
    name = _dotted(base)
    if name is None:
        return False
    wanted_parts = wanted.split(".")
    name_parts = name.split(".")
    # "nn.Module" and "Module" both satisfy "torch.nn.Module".
    return wanted_parts[-len(name_parts) :] == name_parts


def _layer_attrs(cls: ast.ClassDef) -> set[str]:
    """``self.<attr>`` names assigned from an ``nn.*``/``torch.nn.*`` constructor in ``__init__``."""
    attrs: set[str] = set()
    for node in cls.body:
        if isinstance(node, ast.FunctionDef) and node.name == "__init__":
            for sub in ast.walk(node):
                if isinstance(sub, ast.Assign) and isinstance(sub.value, ast.Call):
                    ctor = _dotted(sub.value.func) or ""
                    if ctor.startswith(("nn.", "torch.nn.")) and not ctor.startswith(("nn.functional.", "torch.nn.functional.")):
                        for target in sub.targets:
                            if isinstance(target, ast.Attribute) and _dotted(target.value) == "self":
                                attrs.add(target.attr)
    return attrs


def _check_model(source: str, contract: ClassContract | None, patterns: Sequence[ForbiddenCalls]) -> list[Violation]:
    try:
        tree = ast.parse(source)
    except SyntaxError:
        # Unparseable code cannot run; the compile gate reports it.
        return []
    violations: list[Violation] = []
    classes = {n.name: n for n in ast.walk(tree) if isinstance(n, ast.ClassDef)}
    target_name = contract.class_name if contract else None
    method_name = contract.method if contract else "forward"
    if contract is not None:
        cls = classes.get(contract.class_name)
        if cls is None:
            return [Violation("model", f"model must define class {contract.class_name}")]
        if not any(_base_matches(b, contract.base_name) for b in cls.bases):
            violations.append(
                Violation("model", f"class {contract.class_name} must inherit from {contract.base_name}")
            )
        symbol = contract.must_call_symbol
        imported = any(
            (isinstance(n, ast.Import) and any(a.name == symbol or a.asname == symbol for a in n.names))
            or (isinstance(n, ast.ImportFrom) and (n.module == symbol or any(a.name == symbol for a in n.names)))
            for n in ast.walk(tree)
        )
        if not imported:
            violations.append(Violation("model", f"model source must import {symbol}"))
        classes_to_check = [cls]
    else:
        classes_to_check = list(classes.values())

    for cls in classes_to_check:
        method = next((n for n in cls.body if isinstance(n, ast.FunctionDef) and n.name == method_name), None)
        if method is None:
            violations.append(Violation("model", f"class {cls.name} must define {method_name}()"))
            continue
        layers = _layer_attrs(cls)
        called_symbol = False
        for node in ast.walk(method):
            if not isinstance(node, ast.Call):
                continue
            name = _dotted(node.func) or ""
            if contract is not None and name.split(".")[0] == contract.must_call_symbol:
                called_symbol = True
            if name.startswith("self.") and name.count(".") == 1 and name[5:] in layers:
                violations.append(
                    Violation(
                        "direct_layer_call",
                        f"direct layer call in {method_name}(): {name}() runs a framework layer; "
                        f"route the computation through "
                        f"{contract.must_call_symbol if contract else 'the custom operator library'} instead",
                        ast.get_source_segment(source, node) or name,
                    )
                )
        body_src = ast.get_source_segment(source, method) or ""
        for name, line in _scan_forbidden(body_src, patterns):
            violations.append(
                Violation("forbidden_call", f"{method_name}() calls forbidden computation {name}", line)
            )
        if contract is not None and target_name == cls.name and not called_symbol:
            violations.append(
                Violation("model", f"{method_name}() must call {contract.must_call_symbol}")
            )
    return violations


# ---------------------------------------------------------------------------
# Auditor
# ---------------------------------------------------------------------------


class AuditorPolicy(str, Enum):
    FAIL_OPEN = "fail_open"
    FAIL_CLOSED = "fail_closed"


AUDITOR_TEMPLATE = """\
You review custom accelerator operators that are exposed to PyTorch through a binding layer.

Operator under review: {op}

Decide only one thing: does the real computation happen in the kernel and tiling sources,
or is it smuggled into the glue code? Ignore syntax errors, numerical accuracy and edge cases.

Reference implementation (what the operator should compute):
<reference>
{ref_src}
</reference>

Generated implementation, all sections:
<implementation>
{code}
</implementation>

Allowed places for the math: kernel_src, host_tiling_src, host_operator_src.
Glue only (allocation and dispatch): python_bind_src, model_src.

Mark the implementation invalid if any of these hold:
- the binding or model computes part of the result with framework ops and returns it;
- the kernel is empty, a stub, a plain copy, or writes constants in place of the computation;
- the binding allocates outputs and then fills them without launching the kernel.

Reply with a single JSON object inside a ```json fenced block and nothing else:
{{"valid": true or false, "reason": "where the computation is implemented"}}
"""


def render_auditor_prompt(task: Task, candidate: CandidateKernel, template: str = AUDITOR_TEMPLATE) -> str:
    code = "\n\n".join(f"{name} = r'''\n{text}\n'''" for name, text in candidate.source_sections.items())
    return template.format(op=task.id, ref_src=task.reference_spec, code=code)


def parse_auditor_reply(reply: str) -> tuple[bool, str]:
    match = re.search(r"```(?:json)?\s*(\{.*?\})\s*```", reply, re.DOTALL)
    payload = match.group(1) if match else reply.strip()
    try:
        data = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise InfraError(f"auditor reply is not JSON: {exc}", kind="parse") from exc
    if not isinstance(data, dict) or not isinstance(data.get("valid"), bool):
        raise InfraError("auditor reply lacks a boolean 'valid' field", kind="parse")
    return data["valid"], str(data.get("reason", ""))


Auditor = Callable[[str], str]


@dataclass
class AntiHackResult:
    passed: bool
    violations: list[Violation]
    warnings: list[str] = field(default_factory=list)


def check_rules(candidate: CandidateKernel, rules: HackRuleSet) -> list[Violation]:
    """Pure rule layer: same candidate and rules always give the same violations."""
    violations: list[Violation] = []
    for section, tokens in rules.required_dispatch_tokens.items():
        text = candidate.section(section)
        for token in tokens:
            if token not in text:
                violations.append(
                    Violation("dispatch", f"{section} must invoke the kernel via {token}", text[:200])
                )
    for section, patterns in rules.forbidden_call_patterns.items():
        if section == rules.model_section:
            continue
        text = candidate.section(section)
        region = text
        if section == rules.binding_section and rules.scope_binding_to_registered:
            bodies = [b for b in (_cpp_function_body(text, f) for f in _registered_functions(text)) if b]
            if bodies:
                region = "\n".join(bodies)
        for name, line in _scan_forbidden(region, patterns):
            violations.append(Violation("binding", f"{section} performs computation via {name}", line))
    model_patterns = rules.forbidden_call_patterns.get(rules.model_section, ())
    if rules.required_class_contract is not None or model_patterns:
        model = candidate.section(rules.model_section)
        if model.strip() or rules.required_class_contract is not None:
            violations.extend(_check_model(model, rules.required_class_contract, model_patterns))
    return violations


def check_anti_hack(
    candidate: CandidateKernel,
    rules: HackRuleSet,
    auditor: Auditor | None = None,
    task: Task | None = None,
    policy: AuditorPolicy | str = AuditorPolicy.FAIL_OPEN,
) -> AntiHackResult:
    """Rule layer first; the auditor runs only when every rule passes."""
    violations = check_rules(candidate, rules)
    if violations or auditor is None:
        return AntiHackResult(not violations, violations)
    policy = AuditorPolicy(policy)
    prompt = render_auditor_prompt(task or Task(id=candidate.id, reference_spec=""), candidate)
    try:
        valid, reason = parse_auditor_reply(auditor(prompt))
    except Exception as exc:  # the hook is an external service; any failure falls under the policy
        msg = f"auditor unavailable ({exc}); policy={policy.value}"
        log.warning(msg)
        if policy is AuditorPolicy.FAIL_OPEN:
            return AntiHackResult(True, [], [msg])
        return AntiHackResult(False, [Violation("auditor", msg)], [msg])
    if not valid:
        return AntiHackResult(False, [Violation("auditor", reason or "auditor rejected the implementation")])
    return AntiHackResult(True, [])
