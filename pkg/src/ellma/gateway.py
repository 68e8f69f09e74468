"""Uniform access to chat-completion backends.

Two implementations share one calling convention: an HTTP backend speaking
the de-facto ``/v1/chat/completions`` JSON wire format, and a deterministic
scripted backend that makes the whole engine testable offline.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import httpx

from .core import EllmaError

logger = logging.getLogger(__name__)

CHAT_ROLES = ("system", "user", "assistant")

CONVERSATION_TEMPERATURE = 0.7
DECISION_TEMPERATURE = 0.0


class BackendUnavailableError(EllmaError):
    """All retries exhausted (or a scripted backend ran out of replies)."""


class WireFormatError(EllmaError):
    """Response body did not match the expected completion schema."""

    def __init__(self, message: str, payload: str) -> None:
        super().__init__(message)
        self.payload = payload


class ScriptMismatchError(EllmaError):
    """A scripted entry's match substring was absent from the latest user message."""


@dataclass(frozen=True)
class ChatMessage:
    """One chat turn on the wire; content is always non-empty."""

    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in CHAT_ROLES:
            raise ValueError(f"unknown chat role: {self.role!r}")
        if not self.content:
            raise ValueError("chat message content must be non-empty")


@dataclass(frozen=True)
class BackendConfig:
    """Where and how to reach the completion endpoint.

    ``endpoint_url`` is the full completions URL (".../v1/chat/completions").
    The bearer token is read from the environment variable named by
    ``api_key_env`` at call time; the model itself is configuration.
    """

    endpoint_url: str
    model_id: str
    timeout_s: float = 30.0
    max_retries: int = 2
    backoff_base_ms: int = 500
    api_key_env: str = "ELLMA_API_KEY"

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.backoff_base_ms <= 0:
            raise ValueError("backoff_base_ms must be positive")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    latency_ms: int
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")


class CompletionBackend(Protocol):
    def complete(
        self, messages: Sequence[ChatMessage], *, temperature: float = CONVERSATION_TEMPERATURE
    ) -> CompletionResult: ...


def _check_request(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].role != "system":
        raise ValueError("first message must have the system role")


class HttpBackend:
    """Blocking chat-completions client with bounded exponential backoff.

    Retries transient failures (HTTP 429/5xx, timeouts, connection errors);
    waits backoff_base_ms * 2**(attempt-1) before retry ``attempt``, so total
    wait is bounded by backoff_base_ms * (2**max_retries - 1).
    """

    def __init__(
        self,
        config: BackendConfig,
        *,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout_s)
        self._sleep = sleep

    def complete(
        self, messages: Sequence[ChatMessage], *, temperature: float = CONVERSATION_TEMPERATURE
    ) -> CompletionResult:
        _check_request(messages)
        body = {
            "model": self.config.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": temperature,
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"

        started = time.monotonic()
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt > 0:
                self._sleep(self.config.backoff_base_ms * (2 ** (attempt - 1)) / 1000.0)
            try:
                response = self._client.post(self.config.endpoint_url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last_error = exc
                continue
            except httpx.TransportError as exc:
                last_error = exc
                continue
            if response.status_code == 429 or response.status_code >= 500:
                last_error = BackendUnavailableError(
                    f"HTTP {response.status_code}: {response.text[:200]}"
                )
                continue
            latency_ms = int((time.monotonic() - started) * 1000)
            return _parse_completion_body(response.text, latency_ms)

        raise BackendUnavailableError(
            f"completion failed after {self.config.max_retries + 1} attempts: {last_error}"
        )


def _parse_completion_body(raw: str, latency_ms: int) -> CompletionResult:
    try:
        data = json.loads(raw)
        choice = data["choices"][0]
        text = choice["message"]["content"]
        finish = choice.get("finish_reason")
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
        raise WireFormatError(f"malformed completion response: {exc}", payload=raw) from exc
    if not isinstance(text, str):
        raise WireFormatError("completion content is not a string", payload=raw)
    return CompletionResult(text=text, latency_ms=latency_ms, truncated=finish == "length")


def complete(
    config: BackendConfig,
    messages: Sequence[ChatMessage],
    *,
    temperature: float = CONVERSATION_TEMPERATURE,
) -> CompletionResult:
    """One-shot completion against ``config`` (constructs a transient client)."""
    return HttpBackend(config).complete(messages, temperature=temperature)


@dataclass(frozen=True)
class ScriptEntry:
    """One canned reply; ``match`` asserts the latest user message content."""

    reply: str
    match: Optional[str] = None


class ScriptedBackend:
    """Deterministic backend replaying canned replies in order.

    Entries are consumed strictly in order. An entry carrying ``match`` fires
    only when the latest user message contains that substring; a mismatch is
    a harness error and raises. After the script is exhausted,
    ``default_reply`` (when set) answers every further call.
    """

    def __init__(self, entries: Sequence[ScriptEntry], default_reply: Optional[str] = None) -> None:
        self._entries = list(entries)
        self._default_reply = default_reply
        self._cursor = 0

    @property
    def remaining(self) -> int:
        return max(0, len(self._entries) - self._cursor)

    def complete(
        self, messages: Sequence[ChatMessage], *, temperature: float = CONVERSATION_TEMPERATURE
    ) -> CompletionResult:
        _check_request(messages)
        if self._cursor >= len(self._entries):
            if self._default_reply is not None:
                return CompletionResult(text=self._default_reply, latency_ms=0)
            raise BackendUnavailableError("scripted backend exhausted")
        entry = self._entries[self._cursor]
        if entry.match is not None:
            latest_user = next((m for m in reversed(messages) if m.role == "user"), None)
            if latest_user is None or entry.match not in latest_user.content:
                raise ScriptMismatchError(
                    f"script entry {self._cursor} expected {entry.match!r} in the latest "
                    f"user message, got: {latest_user.content[:120] if latest_user else None!r}"
                )
        self._cursor += 1
        return CompletionResult(text=entry.reply, latency_ms=0)


def load_script(path: str) -> ScriptedBackend:
    """Load a scripted backend from a JSON file.

    Accepts either a bare list of ``{"reply": ..., "match"?: ...}`` objects or
    ``{"entries": [...], "default_reply"?: ...}``.
    """
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, list):
        entries, default_reply = data, None
    elif isinstance(data, dict):
        entries = data.get("entries", [])
        default_reply = data.get("default_reply")
    else:
        raise ValueError(f"unsupported script shape in {path}")
    parsed = [ScriptEntry(reply=e["reply"], match=e.get("match")) for e in entries]
    return ScriptedBackend(parsed, default_reply=default_reply)


_DECISION_TOKEN = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def parse_decision(text: str) -> Optional[bool]:
    """Last word-bounded YES/NO token wins; absent when the text has neither."""
    matches = _DECISION_TOKEN.findall(text)
    if not matches:
        return None
    return matches[-1].lower() == "yes"
