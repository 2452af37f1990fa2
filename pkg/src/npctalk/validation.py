"""Three-layer dataset validation (structure, schema, semantics) plus the
flow-correspondence check between an original conversation and its augmented
counterpart. Issues are data, not exceptions: the quality gate fails a
dataset iff any error-severity issue exists.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from .model import (
    AssistantText,
    AssistantToolCalls,
    Message,
    ToolResponse,
    UserText,
    speaker_of,
)
from .tools import ToolSchema, validate_arguments

_UNICODE_REMNANT_RE = re.compile(r"\\u[0-9a-fA-F]{4}")
_TAG_RE = re.compile(r"</?(?:tool_call|tool_response|think)>")
_BLOCK_BODY_RES = {
    "tool_call": re.compile(r"<tool_call>\n(.*?)\n</tool_call>", re.DOTALL),
    "tool_response": re.compile(r"<tool_response>\n(.*?)\n</tool_response>", re.DOTALL),
}

CATEGORIES = ("structural", "schema", "semantic", "flow")


@dataclass(frozen=True)
class ValidationIssue:
    severity: str  # error | warning
    category: str  # structural | schema | semantic | flow
    location: str
    message: str

    def __post_init__(self) -> None:
        if self.severity not in ("error", "warning"):
            raise ValueError(f"bad severity: {self.severity!r}")
        if self.category not in CATEGORIES:
            raise ValueError(f"bad category: {self.category!r}")


def _err(category: str, location: str, message: str) -> ValidationIssue:
    return ValidationIssue("error", category, location, message)


def _warn(category: str, location: str, message: str) -> ValidationIssue:
    return ValidationIssue("warning", category, location, message)


def _message_texts(message: Message) -> list[str]:
    """Fully decoded plain-text fields of a message (for the unicode check)."""
    texts: list[str] = []
    if isinstance(message, UserText):
        texts.append(message.text)
    elif isinstance(message, AssistantText):
        texts.append(message.text)
        if message.think_text is not None:
            texts.append(message.think_text)
    elif isinstance(message, AssistantToolCalls):
        for call in message.calls:
            texts.extend(_string_leaves(call.arguments))
    elif isinstance(message, ToolResponse):
        for result in message.results:
            texts.extend(_string_leaves(result.arguments))
            texts.extend(_string_leaves(result.return_value))
    return texts


def _string_leaves(value: Any) -> list[str]:
    if isinstance(value, str):
        return [value]
    if isinstance(value, Mapping):
        return [s for v in value.values() for s in _string_leaves(v)]
    if isinstance(value, (list, tuple)):
        return [s for v in value for s in _string_leaves(v)]
    return []


def _raw_texts(conversation: Sequence[Message]) -> list[tuple[int, str]]:
    """(message index, raw text) pairs carrying block markup."""
    out = []
    for i, message in enumerate(conversation):
        raw = getattr(message, "raw_text", None)
        if raw is not None:
            out.append((i, raw))
        elif isinstance(message, (UserText, AssistantText)):
            out.append((i, message.text))
    return out


def _scan_tags(text: str) -> list[str]:
    """Report improperly nested or unclosed control tags in one text."""
    problems: list[str] = []
    stack: list[str] = []
    for m in _TAG_RE.finditer(text):
        tag = m.group(0)
        name = tag.strip("</>")
        if tag.startswith("</"):
            if not stack:
                problems.append(f"closing {tag} without opener")
            elif stack[-1] != name:
                problems.append(f"improperly nested {tag} inside <{stack[-1]}>")
                stack.pop()
            else:
                stack.pop()
        else:
            stack.append(name)
    for name in stack:
        problems.append(f"unclosed <{name}> tag")
    return problems


def normalized_conversation_hash(conversation: Sequence[Message]) -> str:
    """Duplicate-detection hash: lowercased, whitespace-collapsed text."""
    parts = []
    for message in conversation:
        raw = getattr(message, "raw_text", None)
        text = raw if raw is not None else " ".join(_message_texts(message))
        parts.append(f"{speaker_of(message)}:{text}")
    normalized = re.sub(r"\s+", " ", " ".join(parts).lower()).strip()
    return hashlib.sha256(normalized.encode("utf-8")).hexdigest()


def validate_structure(
    conversation: Sequence[Message],
    raw_texts: Sequence[str] | None = None,
    record_id: str = "",
    seen_hashes: set[str] | None = None,
) -> list[ValidationIssue]:
    """Structural rules: speaker alternation, tag nesting/closure, exact
    duplicates (when a shared hash set is threaded in), unicode remnants."""
    issues: list[ValidationIssue] = []
    loc = lambda i: f"{record_id}#msg{i}"  # noqa: E731

    previous = None
    for i, message in enumerate(conversation):
        current = speaker_of(message)
        if current == previous:
            issues.append(_err("structural", loc(i), f"consecutive {current} messages"))
        previous = current

    scan_targets: Iterable[tuple[Any, str]]
    if raw_texts is not None:
        scan_targets = enumerate(raw_texts)
    else:
        scan_targets = _raw_texts(conversation)
    for i, text in scan_targets:
        for problem in _scan_tags(text):
            issues.append(_err("structural", loc(i), problem))

    if seen_hashes is not None:
        digest = normalized_conversation_hash(conversation)
        if digest in seen_hashes:
            issues.append(_err("structural", record_id or "#", "exact duplicate conversation"))
        else:
            seen_hashes.add(digest)

    # literal \uXXXX in decoded text means the source was double-escaped;
    # raw block bodies are excluded because inner JSON may escape legitimately
    for i, message in enumerate(conversation):
        for text in _message_texts(message):
            if _UNICODE_REMNANT_RE.search(text):
                issues.append(_err("structural", loc(i), "unicode escape remnant in text"))
                break
    return issues


def _declared_names(tools: Sequence[ToolSchema | Mapping[str, Any]],
                    issues: list[ValidationIssue], record_id: str) -> set[str]:
    names: set[str] = set()
    for idx, tool in enumerate(tools):
        if isinstance(tool, ToolSchema):
            names.add(tool.name)
            continue
        missing = [key for key in ("name", "description", "parameters") if key not in tool]
        if missing:
            issues.append(
                _err("schema", f"{record_id}#tool{idx}",
                     "declared schema missing " + ", ".join(missing))
            )
        if "name" in tool:
            names.add(tool["name"])
    return names


def validate_schema(
    conversation: Sequence[Message],
    tools: Sequence[ToolSchema | Mapping[str, Any]],
    record_id: str = "",
) -> list[ValidationIssue]:
    """Schema compliance: complete declarations, parseable block JSON, and
    calls that reference declared functions only."""
    issues: list[ValidationIssue] = []
    declared = _declared_names(tools, issues, record_id)

    for i, message in enumerate(conversation):
        raw = getattr(message, "raw_text", None)
        if raw is not None:
            for kind, regex in _BLOCK_BODY_RES.items():
                for m in regex.finditer(raw):
                    try:
                        json.loads(m.group(1))
                    except json.JSONDecodeError as exc:
                        issues.append(
                            _err("schema", f"{record_id}#msg{i}",
                                 f"unparseable JSON in {kind} block: {exc.msg}")
                        )
        if isinstance(message, AssistantToolCalls):
            for call in message.calls:
                if call.name not in declared:
                    issues.append(
                        _err("schema", f"{record_id}#msg{i}",
                             f"call to undeclared function {call.name!r}")
                    )
    return issues


def validate_semantics(
    conversation: Sequence[Message],
    tools: Sequence[ToolSchema],
    record_id: str = "",
) -> list[ValidationIssue]:
    """Semantic integrity: argument presence/type per schema, and tool
    responses that answer a call actually made in the same block."""
    issues: list[ValidationIssue] = []
    schemas = {t.name: t for t in tools if isinstance(t, ToolSchema)}

    for i, message in enumerate(conversation):
        if isinstance(message, AssistantToolCalls):
            for call in message.calls:
                schema = schemas.get(call.name)
                if schema is None:
                    continue  # undeclared call is a schema-layer finding
                for issue in validate_arguments(call, schema):
                    issues.append(
                        _err("semantic", f"{record_id}#msg{i}",
                             f"argument {issue.argument_name!r} on {issue.call_name}: "
                             f"{issue.kind} ({issue.detail})")
                    )
        elif isinstance(message, ToolResponse):
            preceding = conversation[i - 1] if i > 0 else None
            called = (
                {c.name for c in preceding.calls}
                if isinstance(preceding, AssistantToolCalls)
                else set()
            )
            for result in message.results:
                if result.name not in called:
                    issues.append(
                        _err("semantic", f"{record_id}#msg{i}",
                             f"tool response for {result.name!r} without a preceding call")
                    )
    return issues


def validate_conversation(
    conversation: Sequence[Message],
    tools: Sequence[ToolSchema],
    record_id: str = "",
    seen_hashes: set[str] | None = None,
) -> list[ValidationIssue]:
    """All three layers over one conversation."""
    return (
        validate_structure(conversation, record_id=record_id, seen_hashes=seen_hashes)
        + validate_schema(conversation, tools, record_id=record_id)
        + validate_semantics(conversation, tools, record_id=record_id)
    )


def check_flow_correspondence(
    original: Sequence[Message],
    augmented: Sequence[Message],
) -> list[ValidationIssue]:
    """Strict 1:1 structure check between an original conversation and its
    augmentation: same length, same role sequence, tool blocks at the same
    positions with the same call counts."""
    issues: list[ValidationIssue] = []
    if len(original) != len(augmented):
        issues.append(
            _err("flow", "#", f"message count differs: {len(original)} vs {len(augmented)}")
        )
    for i in range(min(len(original), len(augmented))):
        orig, aug = original[i], augmented[i]
        if speaker_of(orig) != speaker_of(aug):
            issues.append(
                _err("flow", f"#msg{i}",
                     f"role mismatch: {speaker_of(orig)} vs {speaker_of(aug)}")
            )
            continue
        if isinstance(orig, AssistantToolCalls) != isinstance(aug, AssistantToolCalls):
            issues.append(
                _err("flow", f"#msg{i}", "tool block present in only one conversation")
            )
            continue
        if isinstance(orig, AssistantToolCalls):
            if len(orig.calls) != len(aug.calls):
                issues.append(
                    _err("flow", f"#msg{i}",
                         f"tool call count differs: {len(orig.calls)} vs {len(aug.calls)}")
                )
            else:
                for j, (a, b) in enumerate(zip(orig.calls, aug.calls)):
                    if len(a.arguments) != len(b.arguments):
                        issues.append(
                            _warn("flow", f"#msg{i}",
                                  f"argument count differs on call #{j}: "
                                  f"{len(a.arguments)} vs {len(b.arguments)}")
                        )
    return issues


def summarize(issues: Sequence[ValidationIssue], records_checked: int) -> dict[str, int]:
    return {
        "errors": sum(1 for i in issues if i.severity == "error"),
        "warnings": sum(1 for i in issues if i.severity == "warning"),
        "records_checked": records_checked,
    }


def report_jsonl(issues: Sequence[ValidationIssue], records_checked: int) -> bytes:
    """Issue-per-line JSONL followed by a summary record (quality-gate report)."""
    lines = [
        json.dumps(
            {"severity": i.severity, "category": i.category,
             "location": i.location, "message": i.message},
            ensure_ascii=False,
        )
        for i in issues
    ]
    lines.append(json.dumps({"summary": summarize(issues, records_checked)}))
    return ("\n".join(lines) + "\n").encode("utf-8")
