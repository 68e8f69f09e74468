"""Short-term history windowing and long-term cross-session summaries.

The long-term store is a single-file append-only JSON-lines log; a remote
database can be slotted in behind the same ``MemoryStore`` protocol.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

from .core import CefrLevel, LearnerProfile, TurnRecord, TurnRole
from .gateway import ChatMessage, CompletionBackend

logger = logging.getLogger(__name__)

STORE_SCHEMA_VERSION = 1


def estimate_tokens(text: str) -> int:
    """Approximate token count at chars/4 (a safety margin, not a tokenizer)."""
    return max(1, (len(text) + 3) // 4)


def window(turns: Sequence[TurnRecord], budget: int) -> list[TurnRecord]:
    """Longest suffix of ``turns`` fitting ``budget`` approximate tokens.

    The final learner turn is always retained, even when it alone exceeds the
    budget; order is never changed.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    last_learner = None
    for i in range(len(turns) - 1, -1, -1):
        if turns[i].role is TurnRole.LEARNER:
            last_learner = i
            break

    start = len(turns)
    used = 0
    for i in range(len(turns) - 1, -1, -1):
        cost = estimate_tokens(turns[i].text)
        if used + cost > budget:
            break
        used += cost
        start = i
    if last_learner is not None and start > last_learner:
        start = last_learner
    return list(turns[start:])


@dataclass(frozen=True)
class SessionSummary:
    """LLM-written record of one session, persisted per learner."""

    learner_id: str
    session_id: str
    created_at: int  # epoch ms
    summary_text: str
    key_facts: tuple[str, ...] = ()
    assessed_level: Optional[CefrLevel] = None
    scenarios_practiced: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.summary_text:
            raise ValueError("summary_text must be non-empty")

    def to_json(self) -> dict:
        return {
            "v": STORE_SCHEMA_VERSION,
            "learner_id": self.learner_id,
            "session_id": self.session_id,
            "created_at": self.created_at,
            "summary_text": self.summary_text,
            "key_facts": list(self.key_facts),
            "assessed_level": self.assessed_level.name if self.assessed_level else None,
            "scenarios_practiced": list(self.scenarios_practiced),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SessionSummary":
        level = data.get("assessed_level")
        return cls(
            learner_id=data["learner_id"],
            session_id=data["session_id"],
            created_at=data["created_at"],
            summary_text=data["summary_text"],
            key_facts=tuple(data.get("key_facts", [])),
            assessed_level=CefrLevel[level] if level else None,
            scenarios_practiced=tuple(data.get("scenarios_practiced", [])),
        )


class MemoryStore(Protocol):
    def put(self, summary: SessionSummary) -> None: ...

    def list_by_learner(self, learner_id: str) -> list[SessionSummary]: ...


class JsonlMemoryStore:
    """Append-only JSON-lines store, one summary per line, durable on flush.

    Puts are atomic per record (single write + flush under a lock); listing
    re-reads the file so a fresh process sees everything previously stored.
    """

    def __init__(self, path: str) -> None:
        self.path = path
        self._lock = threading.Lock()

    def put(self, summary: SessionSummary) -> None:
        line = json.dumps(summary.to_json(), ensure_ascii=False)
        with self._lock:
            directory = os.path.dirname(self.path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def list_by_learner(self, learner_id: str) -> list[SessionSummary]:
        if not os.path.exists(self.path):
            return []
        summaries: list[SessionSummary] = []
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    data = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("skipping corrupt store line %d in %s", lineno, self.path)
                    continue
                if data.get("v") != STORE_SCHEMA_VERSION:
                    logger.warning("skipping line %d with schema v=%r", lineno, data.get("v"))
                    continue
                if data.get("learner_id") == learner_id:
                    summaries.append(SessionSummary.from_json(data))
        summaries.sort(key=lambda s: s.created_at, reverse=True)
        return summaries


class InMemoryStore:
    """Volatile store for tests and ephemeral sessions."""

    def __init__(self) -> None:
        self._records: list[SessionSummary] = []

    def put(self, summary: SessionSummary) -> None:
        self._records.append(summary)

    def list_by_learner(self, learner_id: str) -> list[SessionSummary]:
        found = [s for s in self._records if s.learner_id == learner_id]
        found.sort(key=lambda s: s.created_at, reverse=True)
        return found


_SUMMARIZE_SYSTEM = (
    "You are keeping notes for an English language tutor. Summarize the key "
    "information of the tutoring session below in a few sentences: who the "
    "learner is, what was practiced, and what to pick up next time. Add one "
    "bullet line per key fact, each starting with '- '."
)


def _format_turns(turns: Sequence[TurnRecord]) -> str:
    lines = []
    for t in turns:
        if t.role is TurnRole.SYSTEM:
            continue
        label = "Tutor" if t.role is TurnRole.AGENT else "Learner"
        lines.append(f"{label}: {t.text}")
    return "\n".join(lines)


def summarize_session(
    turns: Sequence[TurnRecord],
    profile: LearnerProfile,
    backend: CompletionBackend,
    *,
    session_id: str,
    created_at: int,
    assessed_level: Optional[CefrLevel] = None,
    scenarios_practiced: Sequence[str] = (),
) -> Optional[SessionSummary]:
    """Summarize a finished session with one completion call.

    Level and scenarios are copied from session state, never from the model
    text. Returns None (with a warning) on backend failure; the transcript
    logs stay authoritative either way.
    """
    if not turns:
        raise ValueError("cannot summarize an empty session")
    messages = [
        ChatMessage("system", _SUMMARIZE_SYSTEM),
        ChatMessage("user", f"Learner id: {profile.learner_id}\n\n{_format_turns(turns)}"),
    ]
    try:
        result = backend.complete(messages)
    except Exception as exc:  # noqa: BLE001 - summary is best-effort by contract
        logger.warning("session summary skipped: %s", exc)
        return None
    key_facts = tuple(
        line.strip()[2:].strip()
        for line in result.text.splitlines()
        if line.strip().startswith(("- ", "* "))
    )
    return SessionSummary(
        learner_id=profile.learner_id,
        session_id=session_id,
        created_at=created_at,
        summary_text=result.text,
        key_facts=tuple(f for f in key_facts if f),
        assessed_level=assessed_level,
        scenarios_practiced=tuple(scenarios_practiced),
    )


def recall(store: MemoryStore, learner_id: str, k: int = 3) -> Optional[str]:
    """Concatenate the ``k`` most recent summaries, newest first, or None."""
    if k < 1:
        raise ValueError("k must be >= 1")
    summaries = store.list_by_learner(learner_id)[:k]
    if not summaries:
        return None
    return "\n\n".join(s.summary_text for s in summaries)
