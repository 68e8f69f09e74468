"""Teaching logic layered on the workflow.

Covers proficiency assessment with a local sufficiency gate, scenario menu
generation and parsing, difficulty directives, scaffolding triggers, and
structured feedback generation/parsing. Qualitative judgment is delegated to
the model; this module only gates, extracts, and validates.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .core import (
    AssessmentResult,
    CefrLevel,
    ConfigurationError,
    EllmaError,
    FeedbackItem,
    FeedbackReport,
    GeneralFeedback,
    KNOWN_ENVIRONMENT_TAGS,
    LearnerProfile,
    Scenario,
    TaskPhase,
    TurnRecord,
    TurnRole,
    parse_cefr_label,
)
from .gateway import ChatMessage, CompletionBackend, DECISION_TEMPERATURE, parse_decision
from .prompts import format_history, render, render_decision

logger = logging.getLogger(__name__)

DEFAULT_MIN_WORDS = 40
DEFAULT_MIN_SPEECH_S = 30.0

STRICT_LEVEL_INSTRUCTION = (
    "Reply with exactly one CEFR level token: A1, A2, B1, B2, C1, or C2."
)
SCENARIO_FORMAT_INSTRUCTION = (
    "Write each scenario as four lines, nothing else:\n"
    "Title: <short name>\n"
    "You are: <the role you play>\n"
    "I am: <the role the learner plays>\n"
    "Scene: <one or two sentences describing the place and situation>\n"
    "Separate scenarios with a blank line."
)
FEEDBACK_RETRY_INSTRUCTION = (
    "Rewrite the feedback using exactly these section headers: "
    "**GENERAL FEEDBACK** with one strength and one improvement, "
    "**ADVICE MOVING FORWARD**, and **LANGUAGE SUMMARY** as a bullet list."
)

DISTRESS_MARKERS = ("i don't know", "i dont know", "can't say", "cant say", "give up")
SHORT_TURN_WORDS = 4
SUGGESTED_PHRASE = "Maybe you can say: 'Could you tell me more about that?'"


class AssessmentError(EllmaError):
    """No CEFR level could be extracted after a retry."""


# --- data tables --------------------------------------------------------------


def _load_data_toml(name: str) -> dict:
    raw = resources.files("ellma").joinpath("data").joinpath(name).read_bytes()
    return tomllib.loads(raw.decode("utf-8"))


@dataclass(frozen=True)
class DifficultyDirectives:
    level: CefrLevel
    vocab_guidance: str
    sentence_length_hint: str


@lru_cache(maxsize=1)
def load_difficulty_table() -> dict[CefrLevel, DifficultyDirectives]:
    data = _load_data_toml("difficulty_directives.toml")
    levels = data.get("levels", {})
    table = {}
    for level in CefrLevel:
        if level.name not in levels:
            raise ConfigurationError(f"difficulty table missing level {level.name}")
        entry = levels[level.name]
        table[level] = DifficultyDirectives(
            level=level,
            vocab_guidance=entry["vocab"],
            sentence_length_hint=entry["sentences"],
        )
    return table


def difficulty_directives(level: CefrLevel) -> DifficultyDirectives:
    return load_difficulty_table()[level]


def assessment_slot_value(level: Optional[CefrLevel]) -> str:
    """Text bound to the role-play {assessment} slot: level plus directives."""
    if level is None:
        return ""
    d = difficulty_directives(level)
    return f"{level.name} (CEFR). {d.vocab_guidance} {d.sentence_length_hint}"


@lru_cache(maxsize=1)
def _load_topics() -> tuple[str, tuple[tuple[str, frozenset[str]], ...]]:
    data = _load_data_toml("topics.toml")
    default = data.get("default", "describe a memorable experience")
    variants = tuple(
        (entry["text"], frozenset(t.lower() for t in entry.get("tags", [])))
        for entry in data.get("topics", [])
    )
    return default, variants


def default_topic() -> str:
    return _load_topics()[0]


def assessment_topic(profile: LearnerProfile) -> str:
    """Default speech topic, or a variant matching the learner's motivation."""
    default, variants = _load_topics()
    if profile.motivation:
        words = set(re.findall(r"[a-z']+", profile.motivation.lower()))
        for text, tags in variants:
            if tags & words:
                return text
    return default


@lru_cache(maxsize=1)
def load_scenario_library() -> tuple[Scenario, ...]:
    data = _load_data_toml("scenario_library.toml")
    scenarios = []
    for entry in data.get("scenarios", []):
        scenarios.append(
            Scenario(
                scenario_id=entry["id"],
                title=entry["title"],
                scene_description=entry["scene"],
                agent_role=entry["agent_role"],
                learner_role=entry["learner_role"],
                environment_tag=entry["environment"],
                difficulty=CefrLevel.B1,
            )
        )
    if len(scenarios) < 3:
        raise ConfigurationError("scenario library must hold at least 3 scenarios")
    return tuple(scenarios)


# --- sufficiency and assessment ----------------------------------------------


def count_learner_words(turns: Sequence[TurnRecord]) -> int:
    return sum(len(t.text.split()) for t in turns if t.role is TurnRole.LEARNER)


def learner_speech_seconds(turns: Sequence[TurnRecord]) -> float:
    return sum(
        max(0, t.ended_at - t.started_at) for t in turns if t.role is TurnRole.LEARNER
    ) / 1000.0


def judge_sufficiency(
    history: Sequence[TurnRecord],
    backend: CompletionBackend,
    *,
    min_words: int = DEFAULT_MIN_WORDS,
    min_speech_s: Optional[float] = DEFAULT_MIN_SPEECH_S,
) -> bool:
    """Has the learner given enough input to assess?

    A local gate (word count, or cumulative speech time when audio timing is
    available) must pass AND the decision prompt must answer YES; neither
    alone is sufficient. The decision call is skipped entirely while the
    local gate fails, so a silent learner never reaches the model.
    """
    words = count_learner_words(history)
    speech_s = learner_speech_seconds(history)
    gate = words >= min_words or (
        min_speech_s is not None and speech_s > 0 and speech_s >= min_speech_s
    )
    if not gate:
        return False
    messages = render_decision(TaskPhase.ASSESSMENT, list(history))
    try:
        result = backend.complete(messages, temperature=DECISION_TEMPERATURE)
    except Exception as exc:  # noqa: BLE001 - ask a follow-up instead of advancing
        logger.warning("sufficiency decision failed, staying in assessment: %s", exc)
        return False
    return parse_decision(result.text) is True


def assess_level(
    history: Sequence[TurnRecord], backend: CompletionBackend
) -> AssessmentResult:
    """One completion against the assessment template; extract the CEFR label.

    A reply with no level token earns one retry with a stricter instruction;
    a second miss is an AssessmentError and the level stays unset.
    """
    persona = render("persona")[0]
    task = render("assessment", {"user_info_conversation": format_history(history)})
    messages = [persona, *task]
    words = count_learner_words(history)

    result = backend.complete(messages)
    level = parse_cefr_label(result.text)
    if level is None:
        retry_messages = [*messages, ChatMessage("user", STRICT_LEVEL_INSTRUCTION)]
        result = backend.complete(retry_messages)
        level = parse_cefr_label(result.text)
    if level is None:
        raise AssessmentError("no CEFR level token in assessment reply after retry")
    return AssessmentResult(
        level=level, rationale=result.text, input_word_count=words, sufficient=True
    )


def provisional_assessment(history: Sequence[TurnRecord]) -> AssessmentResult:
    """Forced closure at the phase cap without enough input: provisional A1.

    sufficient=False, so the level is never written to the profile.
    """
    return AssessmentResult(
        level=CefrLevel.A1,
        rationale=(
            "Provisional only: the assessment closed at the phase cap without "
            "enough spoken input to judge."
        ),
        input_word_count=count_learner_words(history),
        sufficient=False,
    )


# --- scenarios -----------------------------------------------------------------

_ENVIRONMENT_KEYWORDS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("cafe", ("cafe", "café", "coffee", "barista")),
    ("restaurant", ("restaurant", "waiter", "server", "diner", "ordering food")),
    ("supermarket", ("supermarket", "grocery", "groceries", "market")),
    ("office", ("office", "interview", "job", "work", "colleague", "meeting")),
    ("gallery", ("gallery", "museum", "exhibition", "art")),
    ("street", ("street", "directions", "travel", "traveling", "travelling", "city", "station", "outdoors")),
)


def infer_environment(text: str) -> str:
    lowered = text.lower()
    for tag, keywords in _ENVIRONMENT_KEYWORDS:
        if any(k in lowered for k in keywords):
            return tag
    return "custom"


_SCENARIO_LINE = re.compile(
    r"^(?P<key>title|you are|i am|scene)\s*:\s*(?P<value>.+)$", re.IGNORECASE
)


def parse_scenarios(text: str, difficulty: CefrLevel) -> list[Scenario]:
    """Parse Title/You are/I am/Scene blocks out of a menu completion."""
    blocks: list[dict[str, str]] = []
    current: dict[str, str] = {}
    for line in text.splitlines():
        match = _SCENARIO_LINE.match(line.strip())
        if not match:
            continue
        key = match.group("key").lower()
        if key == "title" and current:
            blocks.append(current)
            current = {}
        current[key] = match.group("value").strip()
    if current:
        blocks.append(current)

    scenarios = []
    for i, block in enumerate(blocks, start=1):
        title = block.get("title", "")
        scene = block.get("scene", "")
        agent_role = block.get("you are", "")
        learner_role = block.get("i am", "")
        if not (title and scene and agent_role and learner_role):
            continue
        if agent_role == learner_role:
            continue
        scenarios.append(
            Scenario(
                scenario_id=f"gen-{i}",
                title=title,
                scene_description=scene,
                agent_role=agent_role,
                learner_role=learner_role,
                environment_tag=infer_environment(f"{title} {scene}"),
                difficulty=difficulty,
            )
        )
    return scenarios


def scenario_menu(
    profile: LearnerProfile,
    level: Optional[CefrLevel],
    backend: CompletionBackend,
) -> list[Scenario]:
    """Exactly three scenarios: parsed from the model, padded from the library."""
    difficulty = level or CefrLevel.B1
    persona = render("persona")[0]
    task = render("scenario_menu")
    messages = [persona, *task, ChatMessage("user", SCENARIO_FORMAT_INSTRUCTION)]
    parsed: list[Scenario] = []
    try:
        result = backend.complete(messages)
        parsed = parse_scenarios(result.text, difficulty)
    except Exception as exc:  # noqa: BLE001 - the library makes the menu total
        logger.warning("scenario menu completion failed, using library: %s", exc)

    menu = parsed[:3]
    if len(menu) < 3:
        titles = {s.title for s in menu}
        for library_scenario in load_scenario_library():
            if len(menu) == 3:
                break
            if library_scenario.title in titles:
                continue
            menu.append(
                Scenario(
                    scenario_id=library_scenario.scenario_id,
                    title=library_scenario.title,
                    scene_description=library_scenario.scene_description,
                    agent_role=library_scenario.agent_role,
                    learner_role=library_scenario.learner_role,
                    environment_tag=library_scenario.environment_tag,
                    difficulty=difficulty,
                )
            )
    return menu


def user_scenario(text: str, level: Optional[CefrLevel]) -> Scenario:
    """A single custom scenario from the learner's own idea; bypasses the menu."""
    if not text.strip():
        raise ValueError("scenario description must be non-empty")
    cleaned = text.strip()
    return Scenario(
        scenario_id="custom-1",
        title=cleaned[:60],
        scene_description=f"A role-play chosen by the learner: {cleaned}.",
        agent_role="conversation partner",
        learner_role="yourself",
        environment_tag=infer_environment(cleaned),
        difficulty=level or CefrLevel.B1,
    )


# --- scaffolding ----------------------------------------------------------------


class ScaffoldKind(Enum):
    ENCOURAGE = "encourage"
    SUGGEST_PHRASE = "suggest_phrase"
    CLARIFY_INTENT = "clarify_intent"
    NONE = "none"


@dataclass(frozen=True)
class ScaffoldAction:
    kind: ScaffoldKind
    text: str = ""

    def __post_init__(self) -> None:
        if self.kind is ScaffoldKind.SUGGEST_PHRASE and not self.text:
            raise ValueError("SuggestPhrase must carry a phrase")


def scaffold(
    learner_turn: str,
    previous_learner_turns: Sequence[TurnRecord],
    *,
    low_confidence_fragment: Optional[str] = None,
) -> ScaffoldAction:
    """Deterministic local scaffolding triggers for a role-play turn.

    ``previous_learner_turns`` are the learner turns already recorded in the
    current role-play (so nothing can fire on the learner's first turn from
    the short-turn rule). Precedence: an explicit low-confidence flag asks
    for clarification, distress markers earn encouragement, two consecutive
    short turns earn a suggested phrase.
    """
    if low_confidence_fragment is not None:
        fragment = (
            low_confidence_fragment
            if low_confidence_fragment in learner_turn
            else learner_turn
        )
        return ScaffoldAction(ScaffoldKind.CLARIFY_INTENT, fragment)

    lowered = learner_turn.lower()
    if any(marker in lowered for marker in DISTRESS_MARKERS):
        return ScaffoldAction(ScaffoldKind.ENCOURAGE)

    if previous_learner_turns and len(learner_turn.split()) < SHORT_TURN_WORDS:
        last = previous_learner_turns[-1]
        if len(last.text.split()) < SHORT_TURN_WORDS:
            return ScaffoldAction(ScaffoldKind.SUGGEST_PHRASE, SUGGESTED_PHRASE)

    return ScaffoldAction(ScaffoldKind.NONE)


def scaffold_hint(action: ScaffoldAction) -> Optional[str]:
    """System-message nudge injected into the next completion, if any."""
    if action.kind is ScaffoldKind.ENCOURAGE:
        return (
            "The learner sounds stuck. Encourage them warmly to keep going, "
            'for example "Come on, don\'t give up!".'
        )
    if action.kind is ScaffoldKind.SUGGEST_PHRASE:
        return (
            "The learner's answers are very short. Suggest an example reply "
            f'they could practice, for example: {action.text}'
        )
    if action.kind is ScaffoldKind.CLARIFY_INTENT:
        return (
            f'Part of the learner\'s speech was unclear: "{action.text}". '
            'Ask a clarifying question like "You just said..., do you mean...?".'
        )
    return None


# --- feedback -------------------------------------------------------------------

_GENERAL_HEADER = re.compile(r"\*\*\s*general feedback\s*\*\*\s*:?", re.IGNORECASE)
_ADVICE_HEADER = re.compile(r"\*\*\s*advice moving forward\s*\*\*\s*:?", re.IGNORECASE)
_LANGUAGE_HEADER = re.compile(r"\*\*\s*language summary\s*\*\*\s*:?", re.IGNORECASE)
_ANY_HEADER = re.compile(
    r"\*\*\s*(general feedback|advice moving forward|language summary)\s*\*\*\s*:?",
    re.IGNORECASE,
)
_STRENGTH_MARK = re.compile(
    r"strength\s*:\s*(?P<value>.*?)(?=improvement\s*:|$)", re.IGNORECASE | re.DOTALL
)
_IMPROVEMENT_MARK = re.compile(r"improvement\s*:\s*(?P<value>.*)$", re.IGNORECASE | re.DOTALL)
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+(?P<value>.+)$")
_KIND_PREFIX = re.compile(r"^(vocabulary|grammar|sentence)\s*:\s*(?P<value>.+)$", re.IGNORECASE)


def _section_after(header: re.Pattern[str], text: str) -> Optional[str]:
    match = header.search(text)
    if not match:
        return None
    rest = text[match.end() :]
    next_header = _ANY_HEADER.search(rest)
    if next_header:
        rest = rest[: next_header.start()]
    return rest.strip()


def _split_general(section: str) -> GeneralFeedback:
    strength_match = _STRENGTH_MARK.search(section)
    improvement_match = _IMPROVEMENT_MARK.search(section)
    if strength_match and improvement_match:
        return GeneralFeedback(
            strength=strength_match.group("value").strip(),
            improvement=improvement_match.group("value").strip(),
        )
    sentences = re.split(r"(?<=[.!?])\s+", section.strip(), maxsplit=1)
    strength = sentences[0].strip() if sentences else ""
    improvement = sentences[1].strip() if len(sentences) > 1 else ""
    return GeneralFeedback(strength=strength, improvement=improvement)


def _classify_item(raw: str) -> FeedbackItem:
    prefixed = _KIND_PREFIX.match(raw.strip())
    if prefixed:
        return FeedbackItem(
            item=prefixed.group("value").strip(), kind=prefixed.group(1).lower()
        )
    lowered = raw.lower()
    if "grammar" in lowered or "tense" in lowered:
        kind = "grammar"
    elif "sentence" in lowered or "structure" in lowered:
        kind = "sentence"
    else:
        kind = "vocabulary"
    return FeedbackItem(item=raw.strip(), kind=kind)


def parse_feedback(text: str) -> tuple[Optional[FeedbackReport], list[str]]:
    """Parse a feedback completion into a report plus missing-section names."""
    general_section = _section_after(_GENERAL_HEADER, text)
    advice_section = _section_after(_ADVICE_HEADER, text)
    language_section = _section_after(_LANGUAGE_HEADER, text)

    items: list[FeedbackItem] = []
    bullet_source = language_section if language_section is not None else text
    search_from = bullet_source
    if language_section is None and advice_section is not None:
        # no explicit summary header: take bullets after the advice header
        advice_match = _ADVICE_HEADER.search(text)
        search_from = text[advice_match.end() :] if advice_match else text
    for line in search_from.splitlines():
        bullet = _BULLET.match(line)
        if bullet:
            items.append(_classify_item(bullet.group("value")))

    general = _split_general(general_section) if general_section else GeneralFeedback("", "")
    missing = []
    if not general.strength or not general.improvement:
        missing.append("general_feedback")
    if not advice_section:
        missing.append("advice_moving_forward")
    if not items:
        missing.append("language_summary")

    if missing:
        return None, missing
    return (
        FeedbackReport(
            general_feedback=general,
            advice_moving_forward=advice_section,
            language_summary=tuple(items),
        ),
        [],
    )


def generate_feedback(
    history: Sequence[TurnRecord], backend: CompletionBackend
) -> FeedbackReport:
    """One completion against the feedback template, parsed by section headers.

    A missing section earns one retry naming the required format; if sections
    are still missing the partial report is returned flagged incomplete.
    """
    if not history:
        raise ValueError("cannot generate feedback for an empty role-play")
    persona = render("persona")[0]
    task = render("feedback", {"role_play_conversations": format_history(history)})
    messages = [persona, *task]

    result = backend.complete(messages)
    report, missing = parse_feedback(result.text)
    if report is not None:
        return report

    retry = [*messages, ChatMessage("user", FEEDBACK_RETRY_INSTRUCTION)]
    result = backend.complete(retry)
    report, missing = parse_feedback(result.text)
    if report is not None:
        return report

    logger.warning("feedback still missing sections after retry: %s", missing)
    general_section = _section_after(_GENERAL_HEADER, result.text)
    advice_section = _section_after(_ADVICE_HEADER, result.text) or ""
    general = _split_general(general_section) if general_section else GeneralFeedback("", "")
    bullets = [
        _classify_item(m.group("value"))
        for m in (_BULLET.match(line) for line in result.text.splitlines())
        if m
    ]
    return FeedbackReport(
        general_feedback=general,
        advice_moving_forward=advice_section,
        language_summary=tuple(bullets),
        incomplete=True,
    )


def format_feedback(report: FeedbackReport) -> str:
    """Serialize a report in the canonical three-section layout.

    Parsing the serialized text reproduces the report (for complete reports).
    """
    lines = [
        "**GENERAL FEEDBACK**: "
        f"Strength: {report.general_feedback.strength} "
        f"Improvement: {report.general_feedback.improvement}",
        f"**ADVICE MOVING FORWARD**: {report.advice_moving_forward}",
        "**LANGUAGE SUMMARY**:",
    ]
    lines.extend(f"- {item.kind}: {item.item}" for item in report.language_summary)
    return "\n".join(lines)
