"""Competition record parsing, conversation restructuring, and training-split
generation with the history-pruning rule.

Input records are JSON arrays in the original challenge shape (data_id,
total_turn, worldview, npc/player personas, state, knowledge, turn_0..turn_n);
tools are resolved from a declarative manifest keyed by function_list_id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .backends import ExpertId
from .model import (
    ASSISTANT_MARKER,
    AssistantText,
    AssistantToolCalls,
    Message,
    ParsedOutput,
    ScenarioContext,
    ToolCall,
    ToolResponse,
    ToolResult,
    UserText,
    parse_assistant_output,
    render_assistant_output,
    render_prompt,
    render_tool_call_block,
    serialize_tool_response,
)
from .router import prune_history
from .tools import REPLY_TOOL_NAME, ToolSchema, inject_reply_tool

_CONTEXT_KEYS = (
    "data_id", "total_turn", "worldview", "player", "npc",
    "function_list_id", "state", "knowledge",
)


class DatasetError(Exception):
    pass


class ParseError(DatasetError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class MissingTurn(DatasetError):
    def __init__(self, index: int):
        super().__init__(f"turn_{index} is missing")
        self.index = index


class UnknownFunctionList(DatasetError):
    def __init__(self, list_id: str):
        super().__init__(f"function list not in manifest: {list_id!r}")
        self.list_id = list_id


class GoldFunctionUnknown(DatasetError):
    def __init__(self, name: str):
        super().__init__(f"gold function not in manifest: {name!r}")
        self.name = name


@dataclass(frozen=True)
class DialogueLine:
    speaker: str  # player | npc
    text: str
    target_item: tuple[str, ...] = ()


@dataclass(frozen=True)
class GoldFunction:
    name: str
    parameters: dict[str, Any] = field(default_factory=dict)
    return_value: Any = None


@dataclass(frozen=True)
class Turn:
    dialogue: tuple[DialogueLine, ...]
    gold_response: str
    gold_functions: tuple[GoldFunction, ...] = ()

    def __post_init__(self) -> None:
        if not self.dialogue:
            raise ValueError("turn dialogue must be non-empty")
        for line in self.dialogue:
            if line.speaker not in ("player", "npc"):
                raise ValueError(f"bad speaker: {line.speaker!r}")


@dataclass(frozen=True)
class ConversationRecord:
    data_id: str
    total_turn: int
    context: ScenarioContext
    function_list_id: str
    turns: tuple[Turn, ...]
    extras: dict[str, Any] = field(default_factory=dict)  # unknown fields, preserved

    def __post_init__(self) -> None:
        if len(self.turns) != self.total_turn:
            raise ValueError(f"{self.data_id}: {len(self.turns)} turns but total_turn={self.total_turn}")


def _require(obj: Mapping[str, Any], key: str, path: str) -> Any:
    if key not in obj:
        raise ParseError(f"{path}/{key}", "missing field")
    return obj[key]


def _parse_turn(obj: Any, path: str) -> Turn:
    if not isinstance(obj, Mapping):
        raise ParseError(path, "turn must be an object")
    raw_dialogue = _require(obj, "dialogue", path)
    if not isinstance(raw_dialogue, list) or not raw_dialogue:
        raise ParseError(f"{path}/dialogue", "must be a non-empty array")
    dialogue = []
    for i, line in enumerate(raw_dialogue):
        speaker = _require(line, "speaker", f"{path}/dialogue/{i}")
        if speaker not in ("player", "npc"):
            raise ParseError(f"{path}/dialogue/{i}/speaker", f"bad speaker {speaker!r}")
        dialogue.append(
            DialogueLine(speaker, _require(line, "text", f"{path}/dialogue/{i}"),
                         tuple(line.get("target_item", ())))
        )
    functions = []
    for i, fn in enumerate(obj.get("gold_functions", ())):
        functions.append(
            GoldFunction(
                name=_require(fn, "name", f"{path}/gold_functions/{i}"),
                parameters=dict(fn.get("parameters", {})),
                return_value=fn.get("return"),
            )
        )
    return Turn(tuple(dialogue), obj.get("gold_response", ""), tuple(functions))


def _parse_record(obj: Any, path: str) -> ConversationRecord:
    if not isinstance(obj, Mapping):
        raise ParseError(path, "record must be an object")
    data_id = _require(obj, "data_id", path)
    total_turn = _require(obj, "total_turn", path)
    if not isinstance(total_turn, int) or total_turn < 0:
        raise ParseError(f"{path}/total_turn", f"bad turn count {total_turn!r}")

    knowledge = obj.get("knowledge", {})
    context = ScenarioContext(
        data_id=data_id,
        worldview=obj.get("worldview", ""),
        player_persona=dict(obj.get("player", {}).get("persona", {})),
        npc_role=obj.get("npc", {}).get("role", ""),
        npc_persona=dict(obj.get("npc", {}).get("persona", {})),
        state=dict(obj.get("state", {})),
        knowledge_items=tuple(knowledge.get("knowledge_info", ())),
        general_info=knowledge.get("general_info", ""),
    )

    turns = []
    for k in range(total_turn):
        key = f"turn_{k}"
        if key not in obj:
            raise MissingTurn(k)
        turns.append(_parse_turn(obj[key], f"{path}/{key}"))

    extras = {
        k: v for k, v in obj.items()
        if k not in _CONTEXT_KEYS and not k.startswith("turn_")
    }
    return ConversationRecord(
        data_id=data_id,
        total_turn=total_turn,
        context=context,
        function_list_id=obj.get("function_list_id", ""),
        turns=tuple(turns),
        extras=extras,
    )


def load_records(document: bytes | str) -> list[ConversationRecord]:
    """Parse a competition JSON document into records."""
    try:
        data = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ParseError("/", f"invalid JSON: {exc.msg}") from exc
    if not isinstance(data, list):
        raise ParseError("/", "top level must be an array of records")
    seen: set[str] = set()
    records = []
    for i, obj in enumerate(data):
        record = _parse_record(obj, f"/{i}")
        if record.data_id in seen:
            raise ParseError(f"/{i}/data_id", f"duplicate data_id {record.data_id!r}")
        seen.add(record.data_id)
        records.append(record)
    return records


def records_to_json(records: Sequence[ConversationRecord]) -> list[dict[str, Any]]:
    """Rebuild the original record shape (inverse of load_records on preserved fields)."""
    out = []
    for record in records:
        ctx = record.context
        obj: dict[str, Any] = {
            "data_id": record.data_id,
            "total_turn": record.total_turn,
            "worldview": ctx.worldview,
            "player": {"persona": dict(ctx.player_persona)},
            "npc": {"role": ctx.npc_role, "persona": dict(ctx.npc_persona)},
            "function_list_id": record.function_list_id,
            "state": dict(ctx.state),
            "knowledge": {
                "knowledge_info": [dict(item) for item in ctx.knowledge_items],
                "general_info": ctx.general_info,
            },
        }
        for k, turn in enumerate(record.turns):
            obj[f"turn_{k}"] = {
                "dialogue": [
                    {"speaker": l.speaker, "text": l.text, "target_item": list(l.target_item)}
                    for l in turn.dialogue
                ],
                "gold_response": turn.gold_response,
                "gold_functions": [
                    {"name": f.name, "parameters": dict(f.parameters), "return": f.return_value}
                    for f in turn.gold_functions
                ],
            }
        obj.update(record.extras)
        out.append(obj)
    return out


def restructure(
    record: ConversationRecord,
    manifest: Mapping[str, Sequence[ToolSchema]],
) -> tuple[list[Message], list[ToolSchema]]:
    """Merge turns into sequential messages and resolve the tool list.

    Per turn: player lines become user messages, npc lines assistant messages;
    non-empty gold functions become one assistant-tool-call message plus one
    tool-response message; the gold response closes the turn.
    """
    if record.function_list_id not in manifest:
        raise UnknownFunctionList(record.function_list_id)
    tools = list(manifest[record.function_list_id])
    known = {schema.name for schema in tools}

    conversation: list[Message] = []
    for turn in record.turns:
        for line in turn.dialogue:
            if line.speaker == "player":
                conversation.append(UserText(line.text))
            else:
                conversation.append(AssistantText(line.text))
        if turn.gold_functions:
            for fn in turn.gold_functions:
                if fn.name not in known:
                    raise GoldFunctionUnknown(fn.name)
            calls = tuple(ToolCall(fn.name, dict(fn.parameters)) for fn in turn.gold_functions)
            results = tuple(
                ToolResult(fn.name, dict(fn.parameters), fn.return_value)
                for fn in turn.gold_functions
            )
            conversation.append(
                AssistantToolCalls(calls, raw_text=render_assistant_output(ParsedOutput(tool_calls=calls)))
            )
            conversation.append(ToolResponse(results, raw_text=serialize_tool_response(results)))
        conversation.append(AssistantText(turn.gold_response))
    return conversation, tools


REPLY_SENTINEL_LABEL = render_tool_call_block(ToolCall(REPLY_TOOL_NAME))


@dataclass(frozen=True)
class TrainingExample:
    example_id: str
    expert_target: ExpertId  # TOOL | PERSONA (the direct expert is untrained)
    context: ScenarioContext
    tools: tuple[ToolSchema, ...]
    input_messages: tuple[Message, ...]
    label: str

    def __post_init__(self) -> None:
        if self.expert_target == ExpertId.TOOL:
            parsed = parse_assistant_output(self.label)
            if not parsed.tool_calls or parsed.malformed or parsed.reply_text:
                raise ValueError(f"{self.example_id}: tool-expert label is not a clean tool-call block")
        elif self.expert_target == ExpertId.PERSONA:
            if not self.input_messages or not isinstance(self.input_messages[-1], ToolResponse):
                raise ValueError(f"{self.example_id}: persona input must end with a tool response")
        else:
            raise ValueError(f"{self.example_id}: no training examples for {self.expert_target}")


def make_splits(
    conversation: Sequence[Message],
    tools: Sequence[ToolSchema],
    context: ScenarioContext,
) -> list[TrainingExample]:
    """Split a conversation into input-label pairs at every assistant position.

    Assistant text after a tool response yields a persona example; any other
    assistant text yields a tool-expert example labeled with the reply
    sentinel; each tool-call message yields a tool-expert example labeled with
    its serialized block. Inputs are pruned to the trailing tool block.
    """
    tool_expert_tools = tuple(inject_reply_tool(tools))
    examples: list[TrainingExample] = []
    for i, message in enumerate(conversation):
        if isinstance(message, AssistantText):
            if i > 0 and isinstance(conversation[i - 1], ToolResponse):
                examples.append(
                    TrainingExample(
                        example_id=f"{context.data_id}:{i:04d}:persona",
                        expert_target=ExpertId.PERSONA,
                        context=context,
                        tools=tuple(tools),
                        input_messages=tuple(prune_history(conversation[:i])),
                        label=message.text,
                    )
                )
            else:
                examples.append(
                    TrainingExample(
                        example_id=f"{context.data_id}:{i:04d}:tool",
                        expert_target=ExpertId.TOOL,
                        context=context,
                        tools=tool_expert_tools,
                        input_messages=tuple(prune_history(conversation[:i])),
                        label=REPLY_SENTINEL_LABEL,
                    )
                )
        elif isinstance(message, AssistantToolCalls):
            examples.append(
                TrainingExample(
                    example_id=f"{context.data_id}:{i:04d}:tool",
                    expert_target=ExpertId.TOOL,
                    context=context,
                    tools=tool_expert_tools,
                    input_messages=tuple(prune_history(conversation[:i])),
                    label=render_assistant_output(ParsedOutput(tool_calls=message.calls)),
                )
            )
    return examples


def example_to_json(example: TrainingExample) -> dict[str, Any]:
    rendered = render_prompt(example.context, example.input_messages,
                             tools=example.tools or None)
    return {
        "example_id": example.example_id,
        "expert_target": example.expert_target.value,
        "tools": [schema.to_manifest() for schema in example.tools],
        "input": rendered + f"{ASSISTANT_MARKER}\n",
        "label": example.label,
    }


def export_jsonl(examples: Sequence[TrainingExample]) -> bytes:
    """One JSON object per line, ordered by example_id."""
    lines = [
        json.dumps(example_to_json(e), ensure_ascii=False)
        for e in sorted(examples, key=lambda e: e.example_id)
    ]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
