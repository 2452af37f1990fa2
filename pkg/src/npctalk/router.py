"""Turn routing: decision via the tool expert with a forced prefill, early stop
on the reply sentinel, then either a direct reply (tools hidden) or tool
execution plus a persona reply with tool-call tokens suppressed.

A session is strictly sequential; distinct sessions may run concurrently and
share only the gateway and immutable configuration. Turns are atomic: on any
error the stored history is left exactly as it was before the turn.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

from .backends import BackendError, ExpertId, GenerationGateway, GenerationRequest
from .model import (
    ASSISTANT_MARKER,
    SYSTEM_MARKER,
    TOOL_MARKER,
    USER_MARKER,
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
    serialize_tool_response,
)
from .tools import REPLY_TOOL_NAME, ToolSet, execute_calls, inject_reply_tool

DECISION_PREFILL = '<tool_call>\n{"name": "'
REPLY_SENTINEL = 'reply"'
DEFAULT_DIRECT_THINK = "Respond in character, naturally and helpfully, without tools."
DEFAULT_PERSONA_THINK = "Weave every piece of tool result information into a natural, complete reply."
DEFAULT_BANNED_STRINGS = ("<tool_call>", "</tool_call>")
ROLE_MARKERS = (SYSTEM_MARKER, USER_MARKER, ASSISTANT_MARKER, TOOL_MARKER)


class BudgetExceeded(Exception):
    """The turn overran its wall-clock budget and was aborted before commit."""


@dataclass(frozen=True)
class EngineConfig:
    prefill: str = DECISION_PREFILL
    sentinel: str = REPLY_SENTINEL
    early_stop: bool = True  # off for decision backends without stop support
    direct_think_prefix: str = DEFAULT_DIRECT_THINK
    persona_think_prefix: str = DEFAULT_PERSONA_THINK
    banned_strings: tuple[str, ...] = DEFAULT_BANNED_STRINGS
    decision_max_tokens: int = 128
    reply_max_tokens: int = 512
    reply_stop_sequences: tuple[str, ...] = (USER_MARKER,)
    temperature: float = 0.7
    seed: int | None = None


@dataclass(frozen=True)
class RouteDecision:
    """Reply (no calls) or Tools (one or more calls, never the sentinel)."""

    calls: tuple[ToolCall, ...] = ()

    def __post_init__(self) -> None:
        if any(c.name == REPLY_TOOL_NAME for c in self.calls):
            raise ValueError("a Tools decision cannot carry the reply sentinel")

    @property
    def uses_tools(self) -> bool:
        return bool(self.calls)


REPLY_DECISION = RouteDecision()


@dataclass
class Session:
    session_id: str
    context: ScenarioContext
    toolset: ToolSet
    history: list[Message] = field(default_factory=list)
    config: EngineConfig = field(default_factory=EngineConfig)
    # commit bookkeeping for budget enforcement; see service.post_message
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    turn_serial: int = 0


@dataclass
class TurnTrace:
    decision: RouteDecision | None = None
    expert_used: ExpertId | None = None
    tool_calls: tuple[ToolCall, ...] = ()
    tool_results: tuple[ToolResult, ...] = ()
    decision_completion: str = ""
    reply_text: str | None = None
    timings: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class DecisionResult:
    decision: RouteDecision
    raw_completion: str
    warnings: tuple[str, ...] = ()


def prune_history(messages: Sequence[Message]) -> list[Message]:
    """Drop every tool-call/tool-response message except the trailing block.

    The trailing block is the last maximal contiguous run of tool messages,
    kept only when no assistant text follows it; earlier tool interactions
    would not be available at the current turn.
    """
    is_tool = [isinstance(m, (AssistantToolCalls, ToolResponse)) for m in messages]
    keep: set[int] = set()
    last = max((i for i, t in enumerate(is_tool) if t), default=None)
    if last is not None:
        start = last
        while start > 0 and is_tool[start - 1]:
            start -= 1
        if not any(isinstance(m, AssistantText) for m in messages[last + 1:]):
            keep = set(range(start, last + 1))
    return [m for i, m in enumerate(messages) if not is_tool[i] or i in keep]


def _trim_trailing_stops(text: str, stops: Sequence[str]) -> str:
    # stop semantics keep the stop text; role markers are not part of a reply
    changed = True
    while changed:
        changed = False
        for stop in stops:
            if stop and text.endswith(stop):
                text = text[: -len(stop)].rstrip()
                changed = True
    return text


class DialogueEngine:
    """Runs the decision -> branch -> reply pipeline against a gateway."""

    def __init__(self, gateway: GenerationGateway):
        self.gateway = gateway

    # ------------------------------------------------------------------
    # decision
    # ------------------------------------------------------------------

    def decide(self, session: Session, user_message: str) -> DecisionResult:
        """Route one user message: reply directly or call tools.

        The decision prompt shows the tool list with the dummy reply tool
        appended; generation is prefilled with the fixed tool-call opener and
        stops early on the reply sentinel. Unparseable output fails open to
        Reply so the NPC always answers within budget.
        """
        if not user_message:
            raise ValueError("user_message must be non-empty")
        working = list(session.history) + [UserText(user_message)]
        return self._decide(session, working)

    def _decide(self, session: Session, working: list[Message]) -> DecisionResult:
        config = session.config
        visible = inject_reply_tool(session.toolset.schemas)
        prompt = render_prompt(session.context, working, tools=visible)
        prompt += f"{ASSISTANT_MARKER}\n"
        request = GenerationRequest(
            prompt=prompt,
            prefill=config.prefill,
            stop_sequences=(config.sentinel,) if config.early_stop else (),
            max_new_tokens=config.decision_max_tokens,
            temperature=config.temperature,
            seed=config.seed,
        )
        result = self.gateway.generate(ExpertId.TOOL, request)
        completion = result.completion

        if completion.strip() == config.sentinel:
            # early stop: the sentinel was the whole continuation
            return DecisionResult(REPLY_DECISION, completion)

        parsed = parse_assistant_output(config.prefill + completion)
        warnings: list[str] = []
        reply_calls = [c for c in parsed.tool_calls if c.name == REPLY_TOOL_NAME]
        real_calls = [c for c in parsed.tool_calls if c.name != REPLY_TOOL_NAME]

        if reply_calls:
            if any(c.arguments for c in reply_calls):
                warnings.append("spurious arguments on reply sentinel ignored")
            if real_calls:
                warnings.append(
                    "tool calls alongside reply sentinel ignored: "
                    + ", ".join(c.name for c in real_calls)
                )
            return DecisionResult(REPLY_DECISION, completion, tuple(warnings))

        if real_calls:
            warnings.extend(f"malformed tool call #{m.index}: {m.reason}" for m in parsed.malformed)
            return DecisionResult(RouteDecision(tuple(real_calls)), completion, tuple(warnings))

        warnings.append(f"decision unparseable, falling back to reply: {completion[:80]!r}")
        return DecisionResult(REPLY_DECISION, completion, tuple(warnings))

    # ------------------------------------------------------------------
    # full turn
    # ------------------------------------------------------------------

    def run_turn(
        self,
        session: Session,
        user_message: str,
        deadline: float | None = None,
        cancel: threading.Event | None = None,
    ) -> tuple[str, TurnTrace]:
        """One complete turn; commits history only on success.

        ``deadline`` is a time.monotonic() instant checked cooperatively at
        phase boundaries and before commit; ``cancel`` lets a caller that has
        already answered BudgetExceeded make sure this turn never commits.
        Overruns raise BudgetExceeded without touching the session.
        """
        if not user_message:
            raise ValueError("user_message must be non-empty")
        trace = TurnTrace()
        working = list(session.history) + [UserText(user_message)]
        try:
            reply = self._run_phases(session, working, trace, deadline, cancel)
        except BackendError as exc:
            exc.trace = trace  # type: ignore[attr-defined]
            raise
        self._commit(session, working, deadline, cancel)
        return reply, trace

    def _run_phases(
        self,
        session: Session,
        working: list[Message],
        trace: TurnTrace,
        deadline: float | None,
        cancel: threading.Event | None,
    ) -> str:
        config = session.config
        started = time.monotonic()
        outcome = self._decide(session, working)
        trace.timings["decision_ms"] = (time.monotonic() - started) * 1000
        trace.decision = outcome.decision
        trace.decision_completion = outcome.raw_completion
        trace.warnings.extend(outcome.warnings)
        self._check_deadline(session, deadline, cancel)

        if outcome.decision.uses_tools:
            started = time.monotonic()
            results, exec_warnings = execute_calls(
                outcome.decision.calls, session.toolset, session.context
            )
            trace.timings["tools_ms"] = (time.monotonic() - started) * 1000
            trace.tool_calls = outcome.decision.calls
            trace.tool_results = tuple(results)
            trace.warnings.extend(exec_warnings)
            working.append(
                AssistantToolCalls(
                    outcome.decision.calls,
                    raw_text=render_assistant_output(ParsedOutput(tool_calls=outcome.decision.calls)),
                )
            )
            working.append(ToolResponse(tuple(results), raw_text=serialize_tool_response(results)))
            self._check_deadline(session, deadline, cancel)

            prompt = render_prompt(
                session.context, working,
                tools=session.toolset.schemas or None,
                think_prefix=config.persona_think_prefix,
            )
            expert = ExpertId.PERSONA
            banned = config.banned_strings
        else:
            prompt = render_prompt(
                session.context, working,
                tools=None,  # tool lists are hidden from the direct expert
                think_prefix=config.direct_think_prefix,
            )
            expert = ExpertId.DIRECT
            banned = ()

        started = time.monotonic()
        result = self.gateway.generate(
            expert,
            GenerationRequest(
                prompt=prompt,
                stop_sequences=config.reply_stop_sequences,
                banned_strings=banned,
                max_new_tokens=config.reply_max_tokens,
                temperature=config.temperature,
                seed=config.seed,
            ),
        )
        trace.timings["generation_ms"] = (time.monotonic() - started) * 1000
        trace.expert_used = expert

        parsed = parse_assistant_output(result.completion)
        if parsed.tool_calls:
            trace.warnings.append(
                "reply output contained tool-call blocks; dropped: "
                + ", ".join(c.name for c in parsed.tool_calls)
            )
        reply = _trim_trailing_stops(parsed.reply_text or "", ROLE_MARKERS)
        trace.reply_text = reply
        working.append(AssistantText(reply, think_text=parsed.think_text))
        return reply

    def _check_deadline(
        self,
        session: Session,
        deadline: float | None,
        cancel: threading.Event | None,
    ) -> None:
        if cancel is not None and cancel.is_set():
            raise BudgetExceeded(f"turn aborted for session {session.session_id}")
        if deadline is not None and time.monotonic() >= deadline:
            raise BudgetExceeded(f"turn aborted for session {session.session_id}")

    def _commit(
        self,
        session: Session,
        working: list[Message],
        deadline: float | None,
        cancel: threading.Event | None,
    ) -> None:
        with session.lock:
            self._check_deadline(session, deadline, cancel)
            session.history = prune_history(working)
            session.turn_serial += 1
