"""HTTP service and session store for interactive chat.

One in-flight turn per session, enforced with a per-session guard; the
wall-clock budget (default 7000 ms) is enforced by waiting on a worker
thread, with a commit guard inside the engine so an overrunning turn can
never mutate history after the service has already answered BudgetExceeded.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Mapping, Sequence

from .backends import BackendError, BackendUnavailable
from .dataset import ConversationRecord
from .model import (
    AssistantText,
    AssistantToolCalls,
    Message,
    ToolResponse,
    UserText,
)
from .router import BudgetExceeded, DialogueEngine, EngineConfig, Session, TurnTrace
from .tools import ToolSchema, ToolSet

logger = logging.getLogger(__name__)

DEFAULT_BUDGET_MS = 7000
DEFAULT_IDLE_EXPIRY_S = 30 * 60


class ServiceError(Exception):
    code = "service_error"
    status = 500


class UnknownScenario(ServiceError):
    code = "unknown_scenario"
    status = 404


class UnknownSession(ServiceError):
    code = "unknown_session"
    status = 404


class TurnInProgress(ServiceError):
    code = "turn_in_progress"
    status = 409


class BadRequest(ServiceError):
    code = "bad_request"
    status = 400


@dataclass
class Scenario:
    record: ConversationRecord
    tools: list[ToolSchema]

    def build_toolset(self) -> ToolSet:
        """Desk-scale handlers that answer with the recorded gold returns,
        preferring an exact-argument match; real deployments register live
        handlers instead."""
        gold = [fn for turn in self.record.turns for fn in turn.gold_functions]

        def handler_for(name: str):
            def handler(arguments: dict[str, Any], context: Any) -> Any:
                by_name = [fn for fn in gold if fn.name == name]
                for fn in by_name:
                    if fn.parameters == arguments:
                        return fn.return_value
                if by_name:
                    return by_name[0].return_value
                return {"error": "no recorded return"}
            return handler

        return ToolSet(
            schemas=tuple(self.tools),
            handlers={schema.name: handler_for(schema.name) for schema in self.tools},
        )


@dataclass
class TurnResponse:
    reply: str
    trace: dict[str, Any]
    timing_total_ms: float


@dataclass
class _Slot:
    session: Session
    created: float
    last_used: float
    in_turn: bool = False


class SessionStore:
    """Thread-safe session map with idle expiry."""

    def __init__(self, idle_expiry_s: float = DEFAULT_IDLE_EXPIRY_S):
        self.idle_expiry_s = idle_expiry_s
        self._slots: dict[str, _Slot] = {}
        self._lock = threading.Lock()

    def add(self, session: Session) -> None:
        now = time.monotonic()
        with self._lock:
            self._slots[session.session_id] = _Slot(session, now, now)

    def get(self, session_id: str) -> _Slot:
        now = time.monotonic()
        with self._lock:
            slot = self._slots.get(session_id)
            if slot is not None and now - slot.last_used > self.idle_expiry_s:
                del self._slots[session_id]
                slot = None
            if slot is None:
                raise UnknownSession(f"no session {session_id!r}")
            slot.last_used = now
            return slot

    def begin_turn(self, session_id: str) -> _Slot:
        now = time.monotonic()
        with self._lock:
            slot = self._slots.get(session_id)
            if slot is not None and now - slot.last_used > self.idle_expiry_s:
                del self._slots[session_id]
                slot = None
            if slot is None:
                raise UnknownSession(f"no session {session_id!r}")
            if slot.in_turn:
                raise TurnInProgress(f"session {session_id!r} already has a turn running")
            slot.in_turn = True
            slot.last_used = now
            return slot

    def end_turn(self, session_id: str) -> None:
        with self._lock:
            slot = self._slots.get(session_id)
            if slot is not None:
                slot.in_turn = False


def message_to_dict(message: Message) -> dict[str, Any]:
    if isinstance(message, UserText):
        return {"role": "user", "text": message.text}
    if isinstance(message, AssistantText):
        out: dict[str, Any] = {"role": "assistant", "text": message.text}
        if message.think_text is not None:
            out["think_text"] = message.think_text
        return out
    if isinstance(message, AssistantToolCalls):
        return {
            "role": "assistant",
            "tool_calls": [{"name": c.name, "arguments": c.arguments} for c in message.calls],
        }
    if isinstance(message, ToolResponse):
        return {
            "role": "tool",
            "tool_results": [
                {"name": r.name, "arguments": r.arguments, "return_value": r.return_value}
                for r in message.results
            ],
        }
    raise TypeError(f"not a Message: {message!r}")


def trace_to_dict(trace: TurnTrace) -> dict[str, Any]:
    decision = None
    if trace.decision is not None:
        decision = {
            "type": "tools" if trace.decision.uses_tools else "reply",
            "calls": [{"name": c.name, "arguments": c.arguments} for c in trace.decision.calls],
        }
    return {
        "decision": decision,
        "expert_used": trace.expert_used.value if trace.expert_used else None,
        "tool_calls": [{"name": c.name, "arguments": c.arguments} for c in trace.tool_calls],
        "tool_results": [
            {"name": r.name, "arguments": r.arguments, "return_value": r.return_value}
            for r in trace.tool_results
        ],
        "decision_completion": trace.decision_completion,
        "reply_text": trace.reply_text,
        "timings": dict(trace.timings),
        "warnings": list(trace.warnings),
    }


class NpcService:
    """Scenario registry + session lifecycle + turn execution with budget."""

    def __init__(
        self,
        records: Sequence[ConversationRecord],
        manifest: Mapping[str, Sequence[ToolSchema]],
        engine: DialogueEngine,
        config: EngineConfig | None = None,
        budget_ms: float = DEFAULT_BUDGET_MS,
        idle_expiry_s: float = DEFAULT_IDLE_EXPIRY_S,
    ):
        self.scenarios: dict[str, Scenario] = {}
        for record in records:
            tools = list(manifest.get(record.function_list_id, ()))
            self.scenarios[record.data_id] = Scenario(record, tools)
        self.engine = engine
        self.config = config or EngineConfig()
        self.budget_ms = budget_ms
        self.store = SessionStore(idle_expiry_s)
        self._pool = ThreadPoolExecutor(max_workers=16, thread_name_prefix="npctalk-turn")

    # ------------------------------------------------------------------

    def list_scenarios(self) -> list[dict[str, str]]:
        return [
            {
                "id": scenario.record.data_id,
                "npc_name": str(scenario.record.context.npc_persona.get("name", "")),
                "place": str(scenario.record.context.state.get("place", "")),
            }
            for scenario in self.scenarios.values()
        ]

    def create_session(self, scenario_id: str) -> str:
        scenario = self.scenarios.get(scenario_id)
        if scenario is None:
            raise UnknownScenario(f"no scenario {scenario_id!r}")
        session = Session(
            session_id=uuid.uuid4().hex,
            context=scenario.record.context,
            toolset=scenario.build_toolset(),
            config=self.config,
        )
        self.store.add(session)
        return session.session_id

    def history(self, session_id: str) -> list[dict[str, Any]]:
        slot = self.store.get(session_id)
        return [message_to_dict(m) for m in slot.session.history]

    def post_message(self, session_id: str, text: str) -> TurnResponse:
        if not text:
            raise BadRequest("text must be non-empty")
        slot = self.store.begin_turn(session_id)
        session = slot.session
        started = time.monotonic()
        deadline = started + self.budget_ms / 1000.0
        serial_before = session.turn_serial
        cancel = threading.Event()
        try:
            future = self._pool.submit(self.engine.run_turn, session, text, deadline, cancel)
            try:
                reply, trace = future.result(timeout=self.budget_ms / 1000.0)
            except FutureTimeout:
                with session.lock:
                    if session.turn_serial == serial_before:
                        # worker has not committed; make sure it never does
                        cancel.set()
                        raise BudgetExceeded(
                            f"turn exceeded {self.budget_ms} ms budget"
                        ) from None
                # committed a hair past the wait: take the finished result
                reply, trace = future.result()
            return TurnResponse(
                reply=reply,
                trace=trace_to_dict(trace),
                timing_total_ms=(time.monotonic() - started) * 1000,
            )
        finally:
            self.store.end_turn(session_id)


# ----------------------------------------------------------------------
# HTTP layer
# ----------------------------------------------------------------------


def _make_handler(service: NpcService) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args: Any) -> None:
            logger.debug("http: " + fmt, *args)

        def _send(self, status: int, payload: Any) -> None:
            body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _error(self, status: int, code: str, detail: str) -> None:
            self._send(status, {"error": code, "detail": detail})

        def _read_json(self) -> dict[str, Any]:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            if not raw:
                raise BadRequest("request body required")
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise BadRequest(f"invalid JSON body: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise BadRequest("request body must be a JSON object")
            return obj

        def _dispatch(self, method: str) -> None:
            try:
                if method == "GET" and self.path == "/api/scenarios":
                    self._send(200, service.list_scenarios())
                    return
                if method == "POST" and self.path == "/api/sessions":
                    body = self._read_json()
                    scenario_id = body.get("scenario_id")
                    if not isinstance(scenario_id, str):
                        raise BadRequest("scenario_id required")
                    self._send(200, {"session_id": service.create_session(scenario_id)})
                    return
                m = re.match(r"^/api/sessions/([0-9a-f-]+)/messages$", self.path)
                if method == "POST" and m:
                    body = self._read_json()
                    text = body.get("text")
                    if not isinstance(text, str) or not text:
                        raise BadRequest("text required")
                    response = service.post_message(m.group(1), text)
                    self._send(200, {
                        "reply": response.reply,
                        "trace": response.trace,
                        "timing_total_ms": response.timing_total_ms,
                    })
                    return
                m = re.match(r"^/api/sessions/([0-9a-f-]+)/history$", self.path)
                if method == "GET" and m:
                    self._send(200, {"messages": service.history(m.group(1))})
                    return
                self._error(404, "not_found", f"no route for {method} {self.path}")
            except ServiceError as exc:
                self._error(exc.status, exc.code, str(exc))
            except BudgetExceeded as exc:
                self._error(504, "budget_exceeded", str(exc))
            except BackendUnavailable as exc:
                self._error(502, "backend_unavailable", str(exc))
            except BackendError as exc:
                self._error(502, "backend_error", str(exc))
            except Exception as exc:  # noqa: BLE001 - never crash the listener
                logger.exception("unhandled service error")
                self._error(500, "internal_error", str(exc))

        def do_GET(self) -> None:  # noqa: N802 - BaseHTTPRequestHandler API
            self._dispatch("GET")

        def do_POST(self) -> None:  # noqa: N802
            self._dispatch("POST")

    return Handler


def make_server(service: NpcService, host: str = "127.0.0.1", port: int = 8023) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), _make_handler(service))
    server.daemon_threads = True
    return server


def serve_forever(service: NpcService, host: str = "127.0.0.1", port: int = 8023) -> None:
    server = make_server(service, host, port)
    logger.info("serving on http://%s:%d", host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
