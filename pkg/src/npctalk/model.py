"""Conversation data model and the canonical text format.

Messages are immutable values; rendering and parsing are pure functions, so
everything here is safe to share across threads. The canonical format uses
``<|role|>`` line markers for segments and XML-ish delimiters for tool-call,
tool-response, and think blocks:

    <|system|>
    ...context...
    <|user|>
    How much is for the Double-Handed sword?
    <|assistant|>
    <tool_call>
    {"name": "check_price", "arguments": {"item_name": "Double-Handed sword"}}
    </tool_call>
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence, Union

SYSTEM_MARKER = "<|system|>"
USER_MARKER = "<|user|>"
ASSISTANT_MARKER = "<|assistant|>"
TOOL_MARKER = "<|tool|>"

TOOLS_OPEN = "<tools>"
TOOLS_CLOSE = "</tools>"
TOOL_CALL_OPEN = "<tool_call>"
TOOL_CALL_CLOSE = "</tool_call>"
TOOL_RESPONSE_OPEN = "<tool_response>"
TOOL_RESPONSE_CLOSE = "</tool_response>"
THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"

_THINK_RE = re.compile(r"\A\s*<think>\n(.*?)\n</think>", re.DOTALL)
_TOOL_RESPONSE_RE = re.compile(r"<tool_response>\n(.*?)\n</tool_response>", re.DOTALL)


class InvalidHistory(ValueError):
    """History passed to render_prompt violates alternation rules."""


class EmptyResults(ValueError):
    """serialize_tool_response was called with no results."""


@dataclass(frozen=True)
class ToolCall:
    """A parsed tool invocation: a function name plus an argument map."""

    name: str
    arguments: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.name or any(ch.isspace() for ch in self.name):
            raise ValueError(f"tool call name must be non-empty without whitespace: {self.name!r}")


@dataclass(frozen=True)
class ToolResult:
    """Execution output for one tool call: name, echoed arguments, return value."""

    name: str
    arguments: dict[str, Any]
    return_value: Any


@dataclass(frozen=True)
class UserText:
    text: str


@dataclass(frozen=True)
class AssistantText:
    text: str
    think_text: str | None = None


@dataclass(frozen=True)
class AssistantToolCalls:
    """Assistant turn consisting of one or more tool calls.

    ``raw_text`` preserves the original block text when the message came from
    model output or a dataset; when present it should re-parse to ``calls``
    (the qa_validator checks this, construction does not enforce it so that
    validators can be handed faulty data).
    """

    calls: tuple[ToolCall, ...]
    raw_text: str | None = None

    def __post_init__(self) -> None:
        if not self.calls:
            raise ValueError("AssistantToolCalls requires at least one call")


@dataclass(frozen=True)
class ToolResponse:
    results: tuple[ToolResult, ...]
    raw_text: str | None = None

    def __post_init__(self) -> None:
        if not self.results:
            raise ValueError("ToolResponse requires at least one result")


Message = Union[UserText, AssistantText, AssistantToolCalls, ToolResponse]


def speaker_of(message: Message) -> str:
    """Speaker class used by alternation rules: user / assistant / tool."""
    if isinstance(message, UserText):
        return "user"
    if isinstance(message, (AssistantText, AssistantToolCalls)):
        return "assistant"
    if isinstance(message, ToolResponse):
        return "tool"
    raise TypeError(f"not a Message: {message!r}")


@dataclass(frozen=True)
class ScenarioContext:
    """Scenario grounding for one conversation: worldview, personas, state, knowledge."""

    data_id: str
    worldview: str = ""
    player_persona: Mapping[str, str] = field(default_factory=dict)
    npc_role: str = ""
    npc_persona: Mapping[str, str] = field(default_factory=dict)
    state: Mapping[str, str] = field(default_factory=dict)
    knowledge_items: tuple[Mapping[str, Any], ...] = ()
    general_info: str = ""

    def __post_init__(self) -> None:
        if not self.data_id:
            raise ValueError("data_id must be non-empty")


@dataclass(frozen=True)
class MalformedToolCall:
    """Per-block parse failure report; parsing continues past it."""

    index: int
    reason: str


@dataclass(frozen=True)
class ParsedOutput:
    """Structured view of raw expert output."""

    think_text: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()
    reply_text: str | None = None
    malformed: tuple[MalformedToolCall, ...] = ()

    @property
    def mixed_content(self) -> bool:
        """Tool calls and reply text in one output; accepted but worth a warning."""
        return bool(self.tool_calls) and self.reply_text is not None


def _dump(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False)


def render_tool_call_block(call: ToolCall) -> str:
    body: dict[str, Any] = {"name": call.name}
    if call.arguments:
        body["arguments"] = call.arguments
    return f"{TOOL_CALL_OPEN}\n{_dump(body)}\n{TOOL_CALL_CLOSE}"


def render_tool_response_block(result: ToolResult) -> str:
    body = {"name": result.name, "arguments": result.arguments, "return_value": result.return_value}
    return f"{TOOL_RESPONSE_OPEN}\n{_dump(body)}\n{TOOL_RESPONSE_CLOSE}"


def render_think_block(text: str) -> str:
    return f"{THINK_OPEN}\n{text}\n{THINK_CLOSE}"


def render_assistant_output(parsed: ParsedOutput) -> str:
    """Inverse of parse_assistant_output for structurally valid values."""
    parts: list[str] = []
    if parsed.think_text is not None:
        parts.append(render_think_block(parsed.think_text))
    parts.extend(render_tool_call_block(c) for c in parsed.tool_calls)
    if parsed.reply_text is not None:
        parts.append(parsed.reply_text)
    return "\n".join(parts)


def serialize_tool_response(results: Sequence[ToolResult]) -> str:
    """One tool_response block per result, in input order."""
    if not results:
        raise EmptyResults("cannot serialize an empty result list")
    return "\n".join(render_tool_response_block(r) for r in results)


def parse_assistant_output(text: str) -> ParsedOutput:
    """Extract an optional leading think block, every tool_call block, and reply text.

    Malformed blocks (bad JSON body, missing name, unterminated) are reported
    per block in ``malformed`` and do not stop extraction of later blocks.
    """
    think_text: str | None = None
    m = _THINK_RE.match(text)
    working = text
    if m:
        think_text = m.group(1)
        working = text[m.end():]

    calls: list[ToolCall] = []
    malformed: list[MalformedToolCall] = []
    gaps: list[str] = []
    pos = 0
    opening_index = 0
    while True:
        start = working.find(TOOL_CALL_OPEN, pos)
        if start == -1:
            gaps.append(working[pos:])
            break
        gaps.append(working[pos:start])
        body_at = start + len(TOOL_CALL_OPEN)
        close = working.find(TOOL_CALL_CLOSE, body_at)
        next_open = working.find(TOOL_CALL_OPEN, body_at)
        # a block must close before another one opens, so an unclosed opening
        # cannot swallow the blocks after it
        if close == -1 or (next_open != -1 and next_open < close):
            malformed.append(MalformedToolCall(opening_index, "unterminated block"))
            pos = body_at
        elif not (working.startswith("\n", body_at) and working[close - 1] == "\n"
                  and close - 1 > body_at):
            malformed.append(MalformedToolCall(opening_index, "malformed block delimiters"))
            pos = close + len(TOOL_CALL_CLOSE)
        else:
            call, reason = _parse_call_body(working[body_at + 1:close - 1])
            if call is None:
                malformed.append(MalformedToolCall(opening_index, reason))
            else:
                calls.append(call)
            pos = close + len(TOOL_CALL_CLOSE)
        opening_index += 1

    reply = "".join(gaps).strip()
    return ParsedOutput(
        think_text=think_text,
        tool_calls=tuple(calls),
        reply_text=reply if reply else None,
        malformed=tuple(malformed),
    )


def _parse_call_body(body: str) -> tuple[ToolCall | None, str]:
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        return None, f"invalid JSON: {exc.msg}"
    if not isinstance(obj, dict):
        return None, "body is not a JSON object"
    if "name" not in obj:
        return None, "missing name"
    name = obj["name"]
    if not isinstance(name, str) or not name or any(ch.isspace() for ch in name):
        return None, f"invalid name: {name!r}"
    arguments = obj.get("arguments", {})
    if not isinstance(arguments, dict):
        return None, "arguments is not an object"
    return ToolCall(name, arguments), ""


def parse_tool_response(text: str) -> tuple[ToolResult, ...]:
    """Parse tool_response blocks back into ToolResult values (round-trip check)."""
    results = []
    for m in _TOOL_RESPONSE_RE.finditer(text):
        obj = json.loads(m.group(1))
        if not isinstance(obj, dict) or "name" not in obj:
            raise ValueError(f"malformed tool_response body: {m.group(1)!r}")
        results.append(ToolResult(obj["name"], obj.get("arguments", {}), obj.get("return_value")))
    return tuple(results)


def check_alternation(history: Sequence[Message]) -> None:
    """Raise InvalidHistory on consecutive same-speaker messages."""
    previous: str | None = None
    for i, message in enumerate(history):
        current = speaker_of(message)
        if current == previous:
            raise InvalidHistory(f"consecutive {current} messages at position {i}")
        previous = current


def _persona_lines(persona: Mapping[str, str]) -> str:
    return "\n".join(f"{key}: {value}" for key, value in persona.items())


def _knowledge_line(item: Mapping[str, Any]) -> str:
    name = item.get("name", "item")
    attrs = "; ".join(f"{k}={v}" for k, v in item.items() if k != "name")
    return f"- {name}: {attrs}" if attrs else f"- {name}"


def render_system_content(context: ScenarioContext, tools_json: Sequence[str] | None) -> str:
    """Fixed system layout: worldview, npc role, npc persona, state, knowledge, general info, tools."""
    sections: list[str] = []
    if context.worldview:
        sections.append(context.worldview)
    if context.npc_role:
        sections.append(context.npc_role)
    if context.npc_persona:
        sections.append(_persona_lines(context.npc_persona))
    if context.state:
        ordered = [k for k in ("datetime", "weather", "place") if k in context.state]
        ordered += [k for k in context.state if k not in ("datetime", "weather", "place")]
        sections.append("\n".join(f"{k}: {context.state[k]}" for k in ordered))
    if context.knowledge_items:
        sections.append("\n".join(_knowledge_line(item) for item in context.knowledge_items))
    if context.general_info:
        sections.append(context.general_info)
    if tools_json:
        sections.append(f"{TOOLS_OPEN}\n" + "\n".join(tools_json) + f"\n{TOOLS_CLOSE}")
    return "\n\n".join(sections)


def render_message(message: Message) -> str:
    """Canonical segment for one history message."""
    if isinstance(message, UserText):
        return f"{USER_MARKER}\n{message.text}\n"
    if isinstance(message, AssistantText):
        content = message.text
        if message.think_text is not None:
            content = f"{render_think_block(message.think_text)}\n{content}"
        return f"{ASSISTANT_MARKER}\n{content}\n"
    if isinstance(message, AssistantToolCalls):
        blocks = "\n".join(render_tool_call_block(c) for c in message.calls)
        return f"{ASSISTANT_MARKER}\n{blocks}\n"
    if isinstance(message, ToolResponse):
        return f"{TOOL_MARKER}\n{serialize_tool_response(message.results)}\n"
    raise TypeError(f"not a Message: {message!r}")


def render_prompt(
    context: ScenarioContext,
    history: Sequence[Message],
    tools: Sequence[Any] | None = None,
    think_prefix: str | None = None,
) -> str:
    """Canonical prompt text for a scenario plus history.

    ``tools`` is a sequence of objects exposing ``to_manifest()`` (ToolSchema)
    or plain dicts; a ``<tools>`` block appears iff it is non-empty. When
    ``think_prefix`` is given the output ends with an opened assistant segment
    whose forced think block is already closed, ready for continuation.
    """
    check_alternation(history)
    tools_json: list[str] | None = None
    if tools:
        tools_json = [
            json.dumps(
                t.to_manifest() if hasattr(t, "to_manifest") else t,
                ensure_ascii=False,
                separators=(",", ":"),
            )
            for t in tools
        ]
    parts = [f"{SYSTEM_MARKER}\n{render_system_content(context, tools_json)}\n"]
    parts.extend(render_message(m) for m in history)
    if think_prefix is not None:
        parts.append(f"{ASSISTANT_MARKER}\n{render_think_block(think_prefix)}\n")
    return "".join(parts)
