"""Domain types and pure validation shared by every other module.

Everything here is an immutable value with no I/O. Session transcripts,
profiles, scenarios, and feedback reports are plain frozen dataclasses so
they can be shared across threads and serialized without ceremony.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import Optional


class EllmaError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(EllmaError):
    """Invalid configuration value detected at load or construction time."""


class ProtocolError(EllmaError):
    """Illegal session transition attempt."""

    def __init__(self, from_phase: "TaskPhase", to_phase: "TaskPhase") -> None:
        super().__init__(f"illegal transition {from_phase.name} -> {to_phase.name}")
        self.from_phase = from_phase
        self.to_phase = to_phase


class CefrLevel(IntEnum):
    """CEFR proficiency band, totally ordered A1 < A2 < B1 < B2 < C1 < C2."""

    A1 = 1
    A2 = 2
    B1 = 3
    B2 = 4
    C1 = 5
    C2 = 6

    def __str__(self) -> str:
        return self.name


_CEFR_TOKEN = re.compile(r"\b(A1|A2|B1|B2|C1|C2)\b", re.IGNORECASE)


def parse_cefr_label(text: str) -> Optional[CefrLevel]:
    """Return the first word-bounded CEFR token in ``text``, or None.

    The scan is case-insensitive and left-to-right; the first match wins,
    so "between A2 and B1" parses as A2.
    """
    m = _CEFR_TOKEN.search(text)
    if m is None:
        return None
    return CefrLevel[m.group(1).upper()]


class TaskPhase(Enum):
    """Session task phase. Ended is terminal."""

    INTRODUCTION = "Introduction"
    ASSESSMENT = "Assessment"
    SCENARIO_SELECTION = "ScenarioSelection"
    ROLE_PLAY = "RolePlay"
    FEEDBACK = "Feedback"
    ENDED = "Ended"

    def __str__(self) -> str:
        return self.value


def phase_from_label(label: str) -> TaskPhase:
    for phase in TaskPhase:
        if phase.value == label:
            return phase
    raise ValueError(f"unknown phase label: {label!r}")


# Legal phase transitions: the forward task flow, the post-feedback loop back
# to scenario selection, the mid-role-play switch, and ending from anywhere
# (Ended included, so ending twice is idempotent).
_FORWARD_EDGES = frozenset(
    {
        (TaskPhase.INTRODUCTION, TaskPhase.ASSESSMENT),
        (TaskPhase.ASSESSMENT, TaskPhase.SCENARIO_SELECTION),
        (TaskPhase.SCENARIO_SELECTION, TaskPhase.ROLE_PLAY),
        (TaskPhase.ROLE_PLAY, TaskPhase.FEEDBACK),
        (TaskPhase.FEEDBACK, TaskPhase.SCENARIO_SELECTION),
        (TaskPhase.ROLE_PLAY, TaskPhase.SCENARIO_SELECTION),
    }
)


def validate_transition(from_phase: TaskPhase, to_phase: TaskPhase) -> bool:
    """True iff (from, to) is a legal phase edge."""
    if to_phase is TaskPhase.ENDED:
        return True
    return (from_phase, to_phase) in _FORWARD_EDGES


# The single forward step taken when a phase saturates.
SATURATION_EDGES = {
    TaskPhase.INTRODUCTION: TaskPhase.ASSESSMENT,
    TaskPhase.ASSESSMENT: TaskPhase.SCENARIO_SELECTION,
    TaskPhase.ROLE_PLAY: TaskPhase.FEEDBACK,
}


class TurnRole(Enum):
    AGENT = "agent"
    LEARNER = "learner"
    SYSTEM = "system"

    def __str__(self) -> str:
        return self.value


class EmotionLabel(Enum):
    """Closed emotion label set; neutral is the default."""

    JOY = "joy"
    SADNESS = "sadness"
    SURPRISE = "surprise"
    CONFUSION = "confusion"
    FRUSTRATION = "frustration"
    NEUTRAL = "neutral"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class LearnerProfile:
    """Who the learner is; powers the native-language greeting and recall."""

    learner_id: str
    name: Optional[str] = None
    native_language: Optional[str] = None
    cultural_background: Optional[str] = None
    motivation: Optional[str] = None
    assessed_level: Optional[CefrLevel] = None

    def __post_init__(self) -> None:
        if not self.learner_id:
            raise ValueError("learner_id must be non-empty")

    def with_level(self, level: CefrLevel) -> "LearnerProfile":
        return replace(self, assessed_level=level)


@dataclass(frozen=True)
class TurnRecord:
    """One utterance in a session transcript.

    ``seq`` is the authoritative ordering (gap-free from 1 within a session);
    timestamps are host wall-clock milliseconds and may move backwards across
    clock adjustments.
    """

    seq: int
    role: TurnRole
    text: str
    phase: TaskPhase
    started_at: int
    ended_at: int
    response_latency_ms: Optional[int] = None
    emotion: Optional[EmotionLabel] = None

    def __post_init__(self) -> None:
        if self.seq < 1:
            raise ValueError("seq starts at 1")
        if self.ended_at < self.started_at:
            raise ValueError("ended_at must be >= started_at")
        if self.role in (TurnRole.AGENT, TurnRole.LEARNER) and not self.text:
            raise ValueError(f"{self.role.value} turn text must be non-empty")
        if self.response_latency_ms is not None and self.response_latency_ms < 0:
            raise ValueError("response_latency_ms must be non-negative")


# Environment tags with dedicated handling; anything else is a custom tag.
KNOWN_ENVIRONMENT_TAGS = frozenset(
    {"cafe", "supermarket", "restaurant", "street", "gallery", "office"}
)


@dataclass(frozen=True)
class Scenario:
    """A role-play definition: who plays what, where, and how hard."""

    scenario_id: str
    title: str
    scene_description: str
    agent_role: str
    learner_role: str
    environment_tag: str
    difficulty: CefrLevel

    def __post_init__(self) -> None:
        if not self.scene_description:
            raise ValueError("scene_description must be non-empty")
        if self.agent_role == self.learner_role:
            raise ValueError("agent_role and learner_role must differ")

    @property
    def is_custom_environment(self) -> bool:
        return self.environment_tag not in KNOWN_ENVIRONMENT_TAGS


@dataclass(frozen=True)
class AssessmentResult:
    """Outcome of a CEFR assessment pass.

    When ``sufficient`` is false the level is provisional and must never be
    written to the learner profile.
    """

    level: CefrLevel
    rationale: str
    input_word_count: int
    sufficient: bool

    def __post_init__(self) -> None:
        if self.input_word_count < 0:
            raise ValueError("input_word_count must be non-negative")


FEEDBACK_ITEM_KINDS = ("vocabulary", "grammar", "sentence")


@dataclass(frozen=True)
class FeedbackItem:
    item: str
    kind: str  # one of FEEDBACK_ITEM_KINDS

    def __post_init__(self) -> None:
        if self.kind not in FEEDBACK_ITEM_KINDS:
            raise ValueError(f"unknown feedback item kind: {self.kind!r}")


@dataclass(frozen=True)
class GeneralFeedback:
    strength: str
    improvement: str


@dataclass(frozen=True)
class FeedbackReport:
    """Three-section structured feedback.

    A complete report has all three sections non-empty; ``incomplete`` marks
    reports where a section could not be recovered from the model output.
    """

    general_feedback: GeneralFeedback
    advice_moving_forward: str
    language_summary: tuple[FeedbackItem, ...]
    incomplete: bool = False

    def __post_init__(self) -> None:
        if not self.incomplete:
            if not self.general_feedback.strength or not self.general_feedback.improvement:
                raise ValueError("complete report needs one strength and one improvement")
            if not self.advice_moving_forward:
                raise ValueError("complete report needs advice_moving_forward")
            if not self.language_summary:
                raise ValueError("complete report needs a language summary")


PROMPT_MODES = ("single", "multi")


@dataclass(frozen=True)
class SessionConfig:
    """Engine knobs for one session."""

    silence_threshold_s: float = 2.0
    max_turns_per_phase: int = 8
    prompt_mode: str = "multi"
    voice_id: str = "alloy"
    token_window_budget: int = 6000
    osc_target: Optional[str] = "127.0.0.1:9000"
    log_path: Optional[str] = None
    max_session_s: Optional[float] = None

    def __post_init__(self) -> None:
        if self.silence_threshold_s <= 0:
            raise ConfigurationError("silence_threshold_s must be > 0")
        if self.max_turns_per_phase < 1:
            raise ConfigurationError("max_turns_per_phase must be >= 1")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigurationError(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.token_window_budget < 1:
            raise ConfigurationError("token_window_budget must be positive")
        if self.max_session_s is not None and self.max_session_s <= 0:
            raise ConfigurationError("max_session_s must be positive when set")
