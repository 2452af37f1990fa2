"""Replay evaluation over gold conversations: decision confusion matrix,
tool-call exact match, response similarity (token F1), and information
integration recall.

Replay is teacher-forced: each turn is evaluated against the gold prior
context, not against accumulated model outputs, so per-turn scores are
independent and aggregation is order-free.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

from .backends import BackendError
from .dataset import ConversationRecord, GoldFunction, restructure
from .model import ScenarioContext, ToolCall, ToolResult
from .router import DialogueEngine, EngineConfig, RouteDecision, Session, prune_history
from .tools import ToolSchema, ToolSet

QUADRANTS = ("TP", "FP", "TN", "FN")

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

INTEGRATION_THRESHOLD = 0.5


def score_decision(predicted: RouteDecision, gold_functions: Sequence[Any]) -> str:
    """Confusion-matrix quadrant for one turn's routing decision."""
    gold_has_tools = bool(gold_functions)
    if predicted.uses_tools:
        return "TP" if gold_has_tools else "FP"
    return "FN" if gold_has_tools else "TN"


def _normalize_value(value: Any) -> Any:
    if isinstance(value, str):
        return value.strip()
    if isinstance(value, Mapping):
        return {k: _normalize_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_normalize_value(v) for v in value]
    return value


def match_call(predicted: ToolCall, gold: ToolCall) -> bool:
    """Name equality plus argument equality up to key order and string trim."""
    return predicted.name == gold.name and (
        _normalize_value(predicted.arguments) == _normalize_value(gold.arguments)
    )


def normalize_tokens(text: str) -> list[str]:
    """Lowercase, strip punctuation, collapse whitespace, split."""
    return text.lower().translate(_PUNCT_TABLE).split()


def similarity_f1(predicted_text: str, gold_text: str) -> float:
    """Multiset token F1 between normalized texts."""
    predicted = normalize_tokens(predicted_text)
    gold = normalize_tokens(gold_text)
    if not predicted and not gold:
        return 1.0
    if not predicted or not gold:
        return 0.0
    overlap = sum((Counter(predicted) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def _scalar_leaves(value: Any) -> list[str]:
    if isinstance(value, bool):
        return [str(value).lower()]
    if isinstance(value, (str, int, float)):
        return [str(value)]
    if isinstance(value, Mapping):
        return [leaf for v in value.values() for leaf in _scalar_leaves(v)]
    if isinstance(value, (list, tuple)):
        return [leaf for v in value for leaf in _scalar_leaves(v)]
    return []  # null and anything exotic carry no reportable content


def integration_recall(reply_text: str, results: Sequence[ToolResult]) -> float:
    """Fraction of scalar leaf values from tool returns that made it into the
    reply; a leaf counts once at least half of its tokens appear."""
    leaves = [leaf for r in results for leaf in _scalar_leaves(r.return_value)]
    if not leaves:
        return 1.0
    reply_tokens = set(normalize_tokens(reply_text))
    integrated = 0
    for leaf in leaves:
        tokens = normalize_tokens(leaf)
        if not tokens:
            integrated += 1  # nothing to integrate
            continue
        present = sum(1 for t in tokens if t in reply_tokens)
        if present / len(tokens) >= INTEGRATION_THRESHOLD:
            integrated += 1
    return integrated / len(leaves)


@dataclass
class TurnRow:
    record_id: str
    turn_index: int
    quadrant: str | None = None
    predicted_calls: list[dict[str, Any]] = field(default_factory=list)
    gold_calls: list[dict[str, Any]] = field(default_factory=list)
    exact_match: bool | None = None
    similarity: float | None = None
    integration: float | None = None
    reply: str = ""
    gold_response: str = ""
    skipped: str | None = None


@dataclass
class EvalReport:
    counts: dict[str, int]
    accuracy: float | None
    precision: float | None
    recall: float | None
    call_exact_match_rate: float | None
    mean_similarity: float | None
    mean_integration_recall: float | None
    rows: list[TurnRow]
    skipped: int = 0

    @property
    def evaluated_turns(self) -> int:
        return sum(self.counts.values())

    def to_json(self) -> dict[str, Any]:
        return {
            "summary": {
                "counts": dict(self.counts),
                "accuracy": self.accuracy,
                "precision": self.precision,
                "recall": self.recall,
                "call_exact_match_rate": self.call_exact_match_rate,
                "mean_similarity": self.mean_similarity,
                "mean_integration_recall": self.mean_integration_recall,
                "evaluated_turns": self.evaluated_turns,
                "skipped": self.skipped,
            },
            "rows": [asdict(row) for row in self.rows],
        }


def _ratio(num: float, denom: float) -> float | None:
    return num / denom if denom else None


def _mean(values: Sequence[float]) -> float | None:
    return sum(values) / len(values) if values else None


def gold_replay_toolset(
    tools: Sequence[ToolSchema],
    gold_functions: Sequence[GoldFunction],
) -> ToolSet:
    """Handlers that answer with the current turn's gold return values."""
    returns = {fn.name: fn.return_value for fn in gold_functions}

    def handler_for(name: str):
        def handler(arguments: dict[str, Any], context: ScenarioContext) -> Any:
            if name in returns:
                return returns[name]
            return {"error": "no recorded return"}
        return handler

    return ToolSet(
        schemas=tuple(tools),
        handlers={schema.name: handler_for(schema.name) for schema in tools},
    )


def run_eval(
    records: Sequence[ConversationRecord],
    manifest: Mapping[str, Sequence[ToolSchema]],
    engine: DialogueEngine,
    config: EngineConfig | None = None,
) -> EvalReport:
    """Replay every turn of every record through the pipeline and score it."""
    config = config or EngineConfig()
    counts = {q: 0 for q in QUADRANTS}
    rows: list[TurnRow] = []
    exact_flags: list[bool] = []
    similarities: list[float] = []
    integrations: list[float] = []
    skipped = 0

    for record in records:
        conversation, tools = restructure(record, manifest)
        # message index where each turn starts, to rebuild gold prior context
        turn_starts = _turn_start_indexes(record, conversation)
        for k, turn in enumerate(record.turns):
            user_message = "\n".join(
                line.text for line in turn.dialogue if line.speaker == "player"
            )
            row = TurnRow(
                record_id=record.data_id,
                turn_index=k,
                gold_calls=[{"name": f.name, "arguments": f.parameters} for f in turn.gold_functions],
                gold_response=turn.gold_response,
            )
            rows.append(row)
            if not user_message:
                row.skipped = "no player message in turn"
                skipped += 1
                continue

            session = Session(
                session_id=f"{record.data_id}:turn{k}",
                context=record.context,
                toolset=gold_replay_toolset(tools, turn.gold_functions),
                history=prune_history(conversation[: turn_starts[k]]),
                config=config,
            )
            try:
                reply, trace = engine.run_turn(session, user_message)
            except BackendError as exc:
                row.skipped = f"backend error: {exc}"
                skipped += 1
                continue

            decision = trace.decision or RouteDecision()
            quadrant = score_decision(decision, turn.gold_functions)
            counts[quadrant] += 1
            row.quadrant = quadrant
            row.predicted_calls = [
                {"name": c.name, "arguments": c.arguments} for c in decision.calls
            ]
            row.reply = reply
            row.similarity = similarity_f1(reply, turn.gold_response)
            similarities.append(row.similarity)

            if turn.gold_functions:
                gold_calls = [ToolCall(f.name, dict(f.parameters)) for f in turn.gold_functions]
                row.exact_match = len(decision.calls) == len(gold_calls) and all(
                    match_call(p, g) for p, g in zip(decision.calls, gold_calls)
                )
                exact_flags.append(row.exact_match)
            if trace.tool_results:
                row.integration = integration_recall(reply, trace.tool_results)
                integrations.append(row.integration)

    evaluated = sum(counts.values())
    return EvalReport(
        counts=counts,
        accuracy=_ratio(counts["TP"] + counts["TN"], evaluated),
        precision=_ratio(counts["TP"], counts["TP"] + counts["FP"]),
        recall=_ratio(counts["TP"], counts["TP"] + counts["FN"]),
        call_exact_match_rate=_mean([1.0 if f else 0.0 for f in exact_flags]),
        mean_similarity=_mean(similarities),
        mean_integration_recall=_mean(integrations),
        rows=rows,
        skipped=skipped,
    )


def _turn_start_indexes(record: ConversationRecord, conversation: Sequence[Any]) -> list[int]:
    """Index into the restructured conversation where each turn begins."""
    starts = []
    i = 0
    for turn in record.turns:
        starts.append(i)
        i += len(turn.dialogue)  # one message per dialogue line
        if turn.gold_functions:
            i += 2  # tool-call message + tool-response message
        i += 1  # gold response
    return starts
