"""Prompt templates and request composition.

Templates live as plain-text files under ``templates/``, one message block
per ``%% <role>`` marker line, with ``{slot}`` markers for substitution.
They are fixed artifacts: a checksum test guards accidental edits, and
rendering is pure. One quirk is preserved on purpose: the scenario-menu
template labels its instruction message with the role "assistant" even
though it reads like a user instruction.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Optional, Sequence

from .core import EllmaError, SATURATION_EDGES, TaskPhase, TurnRecord, TurnRole
from .gateway import ChatMessage
from .memory import window

logger = logging.getLogger(__name__)

TEMPLATE_IDS = (
    "persona",
    "introduction",
    "assessment",
    "scenario_menu",
    "role_play",
    "feedback",
    "decision",
    "single_prompt",
)

ALLOWED_SLOTS = frozenset(
    {"user_info_conversation", "assessment", "scenario", "role_play_conversations"}
)

_SLOT_PATTERN = re.compile(
    r"\{(user_info_conversation|assessment|scenario|role_play_conversations)\}"
)
_ROLE_MARKER = re.compile(r"^%% (system|user|assistant)$")

DECISION_INSTRUCTION = "Answer with exactly YES or NO."


class TemplateError(EllmaError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    messages: tuple[tuple[str, str], ...]  # (role, text) pairs

    @property
    def text(self) -> str:
        return "\n".join(content for _, content in self.messages)

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(_SLOT_PATTERN.findall(self.text))


def _parse_template_file(template_id: str, raw: str) -> PromptTemplate:
    messages: list[tuple[str, str]] = []
    role: Optional[str] = None
    buffer: list[str] = []

    def flush() -> None:
        if role is None:
            return
        # content is everything between markers minus the final newline
        content = "\n".join(buffer)
        messages.append((role, content))

    for line in raw.split("\n"):
        marker = _ROLE_MARKER.match(line)
        if marker:
            flush()
            role = marker.group(1)
            buffer = []
        else:
            buffer.append(line)
    # the file ends with a newline, leaving one trailing empty element
    if buffer and buffer[-1] == "":
        buffer.pop()
    flush()

    if not messages:
        raise TemplateError(f"template {template_id} has no message blocks")
    template = PromptTemplate(template_id=template_id, messages=tuple(messages))
    unknown = set(re.findall(r"\{(\w+)\}", template.text)) - ALLOWED_SLOTS
    # non-slot braces are allowed as literal text; nothing to do with them
    del unknown
    return template


def _load_all() -> dict[str, PromptTemplate]:
    loaded = {}
    base = resources.files("ellma").joinpath("templates")
    for template_id in TEMPLATE_IDS:
        raw = base.joinpath(f"{template_id}.txt").read_text(encoding="utf-8")
        loaded[template_id] = _parse_template_file(template_id, raw)
    return loaded


_TEMPLATES: Optional[dict[str, PromptTemplate]] = None


def get_template(template_id: str) -> PromptTemplate:
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = _load_all()
    if template_id not in _TEMPLATES:
        raise TemplateError(f"unknown template: {template_id!r}")
    return _TEMPLATES[template_id]


def render(template_id: str, slots: Mapping[str, str] | None = None) -> list[ChatMessage]:
    """Render a template with ``slots`` bound, preserving message roles.

    Unbound slots raise a TemplateError naming the slot. Binding an empty
    string is accepted with a warning: first-session renders legitimately
    have no prior assessment to paste.
    """
    slots = dict(slots or {})
    template = get_template(template_id)

    def substitute(text: str) -> str:
        def repl(match: re.Match[str]) -> str:
            name = match.group(1)
            if name not in slots:
                raise TemplateError(f"unbound slot {name!r} in template {template_id!r}")
            value = slots[name]
            if value == "":
                logger.warning("empty value bound to slot %r in template %r", name, template_id)
            return value

        return _SLOT_PATTERN.sub(repl, text)

    return [ChatMessage(role, substitute(content) or " ") for role, content in template.messages]


def format_history(turns: Sequence[TurnRecord]) -> str:
    """Readable transcript block for pasting into slots and decision prompts."""
    lines = []
    for t in turns:
        if t.role is TurnRole.SYSTEM:
            continue
        label = "Tutor" if t.role is TurnRole.AGENT else "Learner"
        lines.append(f"{label}: {t.text}")
    return "\n".join(lines)


def history_to_messages(turns: Sequence[TurnRecord]) -> list[ChatMessage]:
    """Map transcript turns onto chat roles (learner→user, agent→assistant)."""
    mapped = []
    for t in turns:
        if t.role is TurnRole.LEARNER:
            mapped.append(ChatMessage("user", t.text))
        elif t.role is TurnRole.AGENT:
            mapped.append(ChatMessage("assistant", t.text))
    return mapped


def compose_request(
    persona: ChatMessage,
    task: Sequence[ChatMessage],
    history: Sequence[TurnRecord],
    memory_summary: Optional[str] = None,
    budget: int = 6000,
) -> list[ChatMessage]:
    """Assemble a full request: persona, memory, task, then windowed history.

    History is windowed by the memory module's suffix rule (the most recent
    learner turn always survives) and never reordered.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    messages = [persona]
    if memory_summary:
        messages.append(
            ChatMessage(
                "system",
                "What you remember about this learner from previous sessions:\n"
                + memory_summary,
            )
        )
    messages.extend(task)
    messages.extend(history_to_messages(window(history, budget)))
    return messages


def render_decision(phase: TaskPhase, history: Sequence[TurnRecord]) -> list[ChatMessage]:
    """Build the strict YES/NO task-completion check for a phase.

    Only phases with a forward saturation edge have a decision rule; the
    phase history is embedded verbatim, in order, and the message list ends
    with the single-token instruction.
    """
    if phase not in SATURATION_EDGES:
        raise TemplateError(f"phase {phase.value} has no decision rule")
    system = render("decision")[0]
    transcript = format_history(history) or "(no conversation yet)"
    user = ChatMessage("user", f"{transcript}\n\n{DECISION_INSTRUCTION}")
    return [system, user]


def render_single_prompt() -> list[ChatMessage]:
    """The monolithic whole-session instruction as one system message."""
    return render("single_prompt")
