"""Shared test helpers: independent oracles, random generators, scripted
backends built from the fixture records, and validator fault injectors."""

from __future__ import annotations

import dataclasses
import json
import random
import re
from pathlib import Path
from typing import Any, Sequence

from npctalk.backends import ExpertBackend, ExpertId, GenerationGateway, ScriptedBackend
from npctalk.dataset import ConversationRecord, load_records
from npctalk.model import (
    AssistantText,
    AssistantToolCalls,
    Message,
    ParsedOutput,
    ScenarioContext,
    ToolCall,
    ToolResponse,
    ToolResult,
    UserText,
    render_assistant_output,
    serialize_tool_response,
)
from npctalk.router import DECISION_PREFILL, DialogueEngine, EngineConfig
from npctalk.tools import ToolSchema, ToolSet, load_manifest

DATA_DIR = Path(__file__).parent / "data"

WORDS = [
    "sword", "gold", "price", "night", "bow", "hunt", "rain", "marsh",
    "guild", "stock", "blade", "shield", "arrow", "forge", "caravan",
    "monster", "lantern", "salt", "rope", "cloak",
]

TOOL_NAMES = ["check_price", "search_item", "equip", "check_stock", "appraise_gem"]


def load_fixture_records() -> list[ConversationRecord]:
    return load_records((DATA_DIR / "sample_records.json").read_bytes())


def load_fixture_manifest() -> dict[str, list[ToolSchema]]:
    return load_manifest((DATA_DIR / "tool_manifest.json").read_bytes())


# ----------------------------------------------------------------------
# random generators
# ----------------------------------------------------------------------

def random_text(rng: random.Random, lo: int = 1, hi: int = 8) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(lo, hi)))


def random_arguments(rng: random.Random) -> dict[str, Any]:
    args: dict[str, Any] = {}
    for _ in range(rng.randint(0, 3)):
        key = rng.choice(["item_name", "item_description", "count", "flag", "tags", "meta"])
        kind = rng.randint(0, 4)
        if kind == 0:
            args[key] = random_text(rng, 1, 3)
        elif kind == 1:
            args[key] = rng.randint(-50, 500)
        elif kind == 2:
            args[key] = round(rng.uniform(-5, 5), 3)
        elif kind == 3:
            args[key] = rng.choice([True, False])
        else:
            args[key] = [random_text(rng, 1, 2) for _ in range(rng.randint(0, 2))]
    return args


def random_parsed_output(rng: random.Random) -> ParsedOutput:
    think = random_text(rng) if rng.random() < 0.4 else None
    calls = tuple(
        ToolCall(rng.choice(TOOL_NAMES), random_arguments(rng))
        for _ in range(rng.randint(0, 3))
    )
    reply = random_text(rng) if (rng.random() < 0.6 or not calls) else None
    return ParsedOutput(think_text=think, tool_calls=calls, reply_text=reply)


def make_tool_block(rng: random.Random) -> tuple[AssistantToolCalls, ToolResponse]:
    calls = tuple(
        ToolCall(rng.choice(TOOL_NAMES), {"item_name": random_text(rng, 1, 2)})
        for _ in range(rng.randint(1, 2))
    )
    results = tuple(ToolResult(c.name, c.arguments, [{"price": f"{rng.randint(10, 900)} Gold"}]) for c in calls)
    return (
        AssistantToolCalls(calls, raw_text=render_assistant_output(ParsedOutput(tool_calls=calls))),
        ToolResponse(results, raw_text=serialize_tool_response(results)),
    )


def random_message_sequence(rng: random.Random, max_len: int = 12) -> list[Message]:
    """Structurally valid message sequence with a random scatter of tool blocks."""
    messages: list[Message] = []
    state = "start"
    while len(messages) < rng.randint(0, max_len):
        if state in ("start", "after_assistant"):
            messages.append(UserText(random_text(rng)))
            state = "after_user"
        elif state == "after_user":
            if rng.random() < 0.4:
                call_msg, response_msg = make_tool_block(rng)
                messages.extend([call_msg, response_msg])
                state = "after_tool"
            else:
                messages.append(AssistantText(random_text(rng)))
                state = "after_assistant"
        elif state == "after_tool":
            roll = rng.random()
            if roll < 0.6:
                messages.append(AssistantText(random_text(rng)))
                state = "after_assistant"
            elif roll < 0.8:
                messages.append(UserText(random_text(rng)))
                state = "after_user"
            else:
                call_msg, response_msg = make_tool_block(rng)
                messages.extend([call_msg, response_msg])
                state = "after_tool"
    return messages


def oracle_prune(messages: Sequence[Message]) -> list[Message]:
    """Regex-over-roles reimplementation of the pruning rule."""
    roles = "".join(
        "t" if isinstance(m, (AssistantToolCalls, ToolResponse))
        else ("a" if isinstance(m, AssistantText) else "u")
        for m in messages
    )
    m = re.search(r"t+(?=[^at]*$)", roles)
    keep = set(range(m.start(), m.end())) if m else set()
    return [msg for i, msg in enumerate(messages) if roles[i] != "t" or i in keep]


# ----------------------------------------------------------------------
# scripted pipelines
# ----------------------------------------------------------------------

def decision_output_for(calls: Sequence[ToolCall]) -> str:
    """Raw scripted-backend output for a tool decision (prefill not echoed)."""
    rendered = "\n".join(
        render_assistant_output(ParsedOutput(tool_calls=(c,))) for c in calls
    )
    assert rendered.startswith(DECISION_PREFILL)
    return rendered[len(DECISION_PREFILL):]


REPLY_DECISION_OUTPUT = 'reply"}\n</tool_call>'


def gold_echo_rules(records: Sequence[ConversationRecord]) -> list[dict[str, Any]]:
    """First-match script rules that reproduce every gold turn exactly."""
    rules: list[dict[str, Any]] = []
    for record in records:
        for turn in reversed(record.turns):
            user_text = "\n".join(l.text for l in turn.dialogue if l.speaker == "player")
            if turn.gold_functions:
                calls = [ToolCall(f.name, dict(f.parameters)) for f in turn.gold_functions]
                decision = decision_output_for(calls)
            else:
                decision = REPLY_DECISION_OUTPUT
            rules.append({"match": {"expert": "tool", "prompt_substring": user_text},
                          "output": decision})
            rules.append({"match": {"expert": "direct", "prompt_substring": user_text},
                          "output": turn.gold_response})
            rules.append({"match": {"expert": "persona", "prompt_substring": user_text},
                          "output": turn.gold_response})
    return rules


def gateway_from_rules(rules: Sequence[dict[str, Any]]) -> GenerationGateway:
    backend = ScriptedBackend(rules)
    return GenerationGateway({
        ExpertId.TOOL: ExpertBackend(backend, "tool-adapter"),
        ExpertId.DIRECT: ExpertBackend(backend, "base"),
        ExpertId.PERSONA: ExpertBackend(backend, "persona-adapter"),
    })


class RecordingGateway(GenerationGateway):
    """Delegating gateway that captures every (expert, request) pair."""

    def __init__(self, inner: GenerationGateway):
        super().__init__(inner.experts)
        self.requests: list[tuple[ExpertId, Any]] = []

    def generate(self, expert, request):
        self.requests.append((expert, request))
        return super().generate(expert, request)


def gold_echo_engine(records: Sequence[ConversationRecord]) -> tuple[DialogueEngine, RecordingGateway]:
    gateway = RecordingGateway(gateway_from_rules(gold_echo_rules(records)))
    return DialogueEngine(gateway), gateway


FIXED_CONFIG = EngineConfig(temperature=0.0, seed=7)


# ----------------------------------------------------------------------
# validator fault injection
# ----------------------------------------------------------------------

SIMPLE_SCHEMAS = [
    ToolSchema("check_price", "Check the price of an item.",
               {"item_name": {"type": "string", "description": "item"}}, ("item_name",)),
    ToolSchema("search_item", "Search the inventory.",
               {"item_description": {"type": "string", "description": "query"}}),
    ToolSchema("equip", "Equip an item.",
               {"item_name": {"type": "string", "description": "item"}}, ("item_name",)),
]


def random_clean_conversation(rng: random.Random) -> list[Message]:
    """Conversation that passes all three validation layers against SIMPLE_SCHEMAS."""
    conversation: list[Message] = []
    for _ in range(rng.randint(1, 4)):
        conversation.append(UserText(random_text(rng)))
        if rng.random() < 0.6:
            schema = rng.choice(SIMPLE_SCHEMAS)
            key = next(iter(schema.properties))
            calls = (ToolCall(schema.name, {key: random_text(rng, 1, 3)}),)
            results = tuple(ToolResult(c.name, c.arguments, [{"price": "10 Gold"}]) for c in calls)
            conversation.append(
                AssistantToolCalls(calls, raw_text=render_assistant_output(ParsedOutput(tool_calls=calls)))
            )
            conversation.append(ToolResponse(results, raw_text=serialize_tool_response(results)))
        conversation.append(AssistantText(random_text(rng)))
    return conversation


def _first_index(conversation: Sequence[Message], kind: type) -> int:
    return next(i for i, m in enumerate(conversation) if isinstance(m, kind))


def _ensure_tool_block(rng: random.Random) -> list[Message]:
    while True:
        conversation = random_clean_conversation(rng)
        if any(isinstance(m, AssistantToolCalls) for m in conversation):
            return conversation


def mutate_consecutive_speaker(rng: random.Random, conversation: list[Message]) -> list[Message]:
    i = _first_index(conversation, UserText)
    return conversation[: i + 1] + [UserText(random_text(rng))] + conversation[i + 1:]


def mutate_unclosed_tag(rng: random.Random, conversation: list[Message]) -> list[Message]:
    conversation = list(conversation)
    i = _first_index(conversation, AssistantToolCalls)
    message = conversation[i]
    conversation[i] = dataclasses.replace(
        message, raw_text=message.raw_text.replace("</tool_call>", "", 1)
    )
    return conversation


def mutate_unicode_remnant(rng: random.Random, conversation: list[Message]) -> list[Message]:
    conversation = list(conversation)
    i = _first_index(conversation, UserText)
    conversation[i] = UserText(conversation[i].text + " left over \\u0041 escape")
    return conversation


def mutate_bad_json_body(rng: random.Random, conversation: list[Message]) -> list[Message]:
    conversation = list(conversation)
    i = _first_index(conversation, AssistantToolCalls)
    conversation[i] = dataclasses.replace(
        conversation[i], raw_text='<tool_call>\n{"name": "check_price", broken\n</tool_call>'
    )
    return conversation


def mutate_undeclared_call(rng: random.Random, conversation: list[Message]) -> list[Message]:
    conversation = list(conversation)
    i = _first_index(conversation, AssistantToolCalls)
    calls = tuple(ToolCall("lookup_pricing", dict(c.arguments)) for c in conversation[i].calls)
    conversation[i] = AssistantToolCalls(
        calls, raw_text=render_assistant_output(ParsedOutput(tool_calls=calls))
    )
    return conversation


def mutate_wrong_type_argument(rng: random.Random, conversation: list[Message]) -> list[Message]:
    conversation = list(conversation)
    i = _first_index(conversation, AssistantToolCalls)
    original = conversation[i].calls[0]
    key = next(iter(original.arguments), "item_name")
    calls = (ToolCall(original.name, {**original.arguments, key: 42}),) + conversation[i].calls[1:]
    conversation[i] = AssistantToolCalls(
        calls, raw_text=render_assistant_output(ParsedOutput(tool_calls=calls))
    )
    return conversation


def make_context(data_id: str = "scenario_test") -> ScenarioContext:
    return ScenarioContext(
        data_id=data_id,
        worldview="A small market town at the edge of the wild.",
        npc_role="Play the role of a merchant.",
        npc_persona={"name": "Luna", "occupation": "Merchant"},
        state={"datetime": "Summer, 5 PM", "weather": "Rainy", "place": "Weapon shop"},
        knowledge_items=({"name": "Avis Wind", "type": "Bow", "description": "A light bow."},),
        general_info="Prices are fixed.",
    )


def make_toolset(schemas: Sequence[ToolSchema] = (), handlers: dict | None = None) -> ToolSet:
    return ToolSet(schemas=tuple(schemas or SIMPLE_SCHEMAS), handlers=handlers or {})
