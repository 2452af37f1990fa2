"""Generation backends: the request/result contract, a deterministic scripted
backend for tests, and an HTTP client for a live completion server.

The gateway normalizes both backends behind one contract: a leading prefill
echo is stripped, generation halts at the earliest stop sequence (the stop
text itself is kept, everything after it is dropped), output is capped at
max_new_tokens, and banned strings are removed post-hoc when the backend has
no native suppression.
"""

from __future__ import annotations

import enum
import json
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import requests

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\S+")

DEFAULT_TIMEOUT_MS = 6000


class BackendError(Exception):
    pass


class BackendUnavailable(BackendError):
    """Connection failure or timeout talking to a backend."""


class BackendProtocol(BackendError):
    """The backend answered with something the gateway cannot interpret."""


class UnconfiguredExpert(BackendError):
    pass


class ExpertId(enum.Enum):
    TOOL = "tool"
    DIRECT = "direct"
    PERSONA = "persona"


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    prefill: str = ""
    stop_sequences: tuple[str, ...] = ()
    banned_strings: tuple[str, ...] = ()
    max_new_tokens: int = 256
    temperature: float = 0.7
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if any(not s for s in self.stop_sequences):
            raise ValueError("stop sequences must be non-empty strings")


@dataclass(frozen=True)
class GenerationResult:
    completion: str  # excludes the prefill
    finish_reason: str  # stop | length | banned-filtered
    prompt_tokens: int = 0
    completion_tokens: int = 0


def apply_ban_filter(text: str, banned_strings: Sequence[str]) -> tuple[str, bool]:
    """Remove every occurrence of each banned string, one pass per string."""
    filtered = text
    for banned in banned_strings:
        if banned:
            filtered = filtered.replace(banned, "")
    return filtered, filtered != text


def _token_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class RawCompletion:
    """What a backend produced before gateway normalization."""

    text: str
    finish_reason: str | None = None  # backend-reported, if any
    prompt_tokens: int = 0
    completion_tokens: int | None = None


class ScriptedBackend:
    """Deterministic backend driven by first-match rules.

    Script file format: a JSON list of
    ``{"match": {"expert": ..., "prompt_substring": ...}, "output": text}``.
    Both match keys are optional; an absent key matches anything. Rules may
    carry ``delay_ms`` to simulate a slow backend in tests.
    """

    def __init__(self, rules: Sequence[Mapping[str, Any]]):
        self.rules = list(rules)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, expert: ExpertId, request: GenerationRequest, model: str) -> RawCompletion:
        sent = request.prompt + request.prefill
        for rule in self.rules:
            match = rule.get("match", {})
            want_expert = match.get("expert")
            if want_expert is not None and want_expert != expert.value:
                continue
            substring = match.get("prompt_substring")
            if substring is not None and substring not in sent:
                continue
            delay_ms = rule.get("delay_ms")
            if delay_ms:
                time.sleep(delay_ms / 1000.0)
            return RawCompletion(text=rule["output"])
        raise BackendProtocol(f"no scripted rule matched for expert {expert.value!r}")


class HTTPBackend:
    """Client for a completion server speaking the wire protocol:

    POST {endpoint}/completion with
    ``{"prompt", "max_tokens", "stop", "temperature", "seed"?, "logit_bias_strings"?}``
    answering ``{"text", "finish_reason", "prompt_tokens"?, "completion_tokens"?}``.
    """

    def __init__(
        self,
        endpoint: str,
        timeout_ms: int = DEFAULT_TIMEOUT_MS,
        supports_logit_bias: bool = False,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_ms = timeout_ms
        self.supports_logit_bias = supports_logit_bias
        self.session = session or requests.Session()

    def complete(self, expert: ExpertId, request: GenerationRequest, model: str) -> RawCompletion:
        body: dict[str, Any] = {
            "prompt": request.prompt + request.prefill,
            "max_tokens": request.max_new_tokens,
            "stop": list(request.stop_sequences),
            "temperature": request.temperature,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        if model:
            body["model"] = model
        if self.supports_logit_bias and request.banned_strings:
            body["logit_bias_strings"] = list(request.banned_strings)
        try:
            response = self.session.post(
                f"{self.endpoint}/completion", json=body, timeout=self.timeout_ms / 1000.0
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise BackendUnavailable(f"{self.endpoint}: {exc}") from exc
        if response.status_code != 200:
            raise BackendProtocol(f"{self.endpoint}: HTTP {response.status_code}")
        try:
            payload = response.json()
            return RawCompletion(
                text=payload["text"],
                finish_reason=payload.get("finish_reason"),
                prompt_tokens=int(payload.get("prompt_tokens") or 0),
                completion_tokens=(
                    int(payload["completion_tokens"])
                    if payload.get("completion_tokens") is not None
                    else None
                ),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendProtocol(f"{self.endpoint}: malformed response ({exc})") from exc


@dataclass(frozen=True)
class ExpertBackend:
    """One expert's deployment: a backend plus a model/adapter identifier."""

    backend: Any  # ScriptedBackend | HTTPBackend (anything with .complete)
    model: str = ""


class GenerationGateway:
    """Maps experts to backends and enforces the generation contract."""

    def __init__(self, experts: Mapping[ExpertId, ExpertBackend]):
        self.experts = dict(experts)

    def generate(self, expert: ExpertId, request: GenerationRequest) -> GenerationResult:
        configured = self.experts.get(expert)
        if configured is None:
            raise UnconfiguredExpert(f"no backend configured for expert {expert.value!r}")
        raw = configured.backend.complete(expert, request, configured.model)

        # some servers echo the prompt+prefill (or just the prefill) back
        text = raw.text
        full_input = request.prompt + request.prefill
        if text.startswith(full_input):
            text = text[len(full_input):]
        elif request.prefill and text.startswith(request.prefill):
            text = text[len(request.prefill):]

        completion, finish_reason, completion_tokens = self._truncate(text, request, raw)

        filtered, was_filtered = apply_ban_filter(completion, request.banned_strings)
        if was_filtered:
            logger.warning(
                "banned string removed from %s completion (%d chars dropped)",
                expert.value, len(completion) - len(filtered),
            )
            completion = filtered
            finish_reason = "banned-filtered"

        return GenerationResult(
            completion=completion,
            finish_reason=finish_reason,
            prompt_tokens=raw.prompt_tokens,
            completion_tokens=completion_tokens,
        )

    @staticmethod
    def _truncate(
        text: str, request: GenerationRequest, raw: RawCompletion
    ) -> tuple[str, str, int]:
        """Apply stop/length semantics: keep through the earliest stop, cap tokens."""
        spans = _token_spans(text)
        length_cut = spans[request.max_new_tokens - 1][1] if len(spans) > request.max_new_tokens else None

        stop_end: int | None = None
        for stop in request.stop_sequences:
            at = text.find(stop)
            if at != -1:
                end = at + len(stop)
                if stop_end is None or end < stop_end:
                    stop_end = end

        if stop_end is not None and (length_cut is None or stop_end <= length_cut):
            completion = text[:stop_end]
            return completion, "stop", len(_token_spans(completion))
        if length_cut is not None:
            return text[:length_cut], "length", request.max_new_tokens
        reason = raw.finish_reason or "stop"
        tokens = raw.completion_tokens if raw.completion_tokens is not None else len(spans)
        return text, reason, tokens
