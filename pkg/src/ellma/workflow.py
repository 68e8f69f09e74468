"""Deterministic session state machine driving the task flow.

The engine, not the model, owns phase transitions: saturation decisions and
the per-phase turn cap advance the forward flow, user commands end or switch,
and everything else is a protocol error. States are immutable snapshots.
"""

from __future__ import annotations

import logging
import uuid
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Union

from .core import (
    EmotionLabel,
    LearnerProfile,
    ProtocolError,
    SATURATION_EDGES,
    Scenario,
    SessionConfig,
    TaskPhase,
    TurnRecord,
    TurnRole,
    FeedbackReport,
    validate_transition,
)
from .gateway import (
    CompletionBackend,
    CONVERSATION_TEMPERATURE,
    DECISION_TEMPERATURE,
    ChatMessage,
    parse_decision,
)
from .prompts import render_decision

logger = logging.getLogger(__name__)

Clock = Callable[[], int]  # epoch milliseconds


class TurnError(Exception):
    """Backend failure mid-turn; ``state`` retains the learner turn."""

    def __init__(self, message: str, state: "SessionState") -> None:
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class SessionState:
    """Immutable snapshot of one session; the single source of truth."""

    session_id: str
    phase: TaskPhase
    profile: LearnerProfile
    prompt_mode: str = "multi"
    active_scenario: Optional[Scenario] = None
    short_term: tuple[TurnRecord, ...] = ()
    phase_turn_count: int = 0

    @property
    def next_seq(self) -> int:
        return len(self.short_term) + 1

    def phase_history(self, phase: Optional[TaskPhase] = None) -> tuple[TurnRecord, ...]:
        wanted = phase or self.phase
        return tuple(t for t in self.short_term if t.phase is wanted)

    def learner_turns(self, phase: Optional[TaskPhase] = None) -> tuple[TurnRecord, ...]:
        return tuple(t for t in self.phase_history(phase) if t.role is TurnRole.LEARNER)


@dataclass(frozen=True)
class LearnerUtterance:
    text: str
    started_at: int = 0
    ended_at: int = 0
    emotion: Optional[EmotionLabel] = None


@dataclass(frozen=True)
class AgentUtterance:
    text: str
    started_at: int = 0
    ended_at: int = 0
    response_latency_ms: Optional[int] = None


@dataclass(frozen=True)
class SaturationReached:
    pass


@dataclass(frozen=True)
class ScenarioChosen:
    scenario: Scenario


class UserCommandKind(Enum):
    END_SESSION = "end_session"
    SWITCH_ROLE_PLAY = "switch_role_play"
    REQUEST_SCENARIOS = "request_scenarios"


@dataclass(frozen=True)
class UserCommand:
    kind: UserCommandKind


@dataclass(frozen=True)
class FeedbackDelivered:
    report: FeedbackReport


SessionEvent = Union[
    LearnerUtterance,
    AgentUtterance,
    SaturationReached,
    ScenarioChosen,
    UserCommand,
    FeedbackDelivered,
]


def init_session(
    profile: LearnerProfile,
    config: SessionConfig,
    *,
    session_id: Optional[str] = None,
) -> SessionState:
    """Fresh session in the Introduction phase with an empty transcript."""
    return SessionState(
        session_id=session_id or uuid.uuid4().hex[:12],
        phase=TaskPhase.INTRODUCTION,
        profile=profile,
        prompt_mode=config.prompt_mode,
    )


def _append_turn(
    state: SessionState,
    role: TurnRole,
    text: str,
    started_at: int,
    ended_at: int,
    *,
    latency: Optional[int] = None,
    emotion: Optional[EmotionLabel] = None,
    count_learner: bool = True,
) -> SessionState:
    record = TurnRecord(
        seq=state.next_seq,
        role=role,
        text=text,
        phase=state.phase,
        started_at=started_at,
        ended_at=ended_at,
        response_latency_ms=latency,
        emotion=emotion,
    )
    bump = 1 if (role is TurnRole.LEARNER and count_learner) else 0
    return replace(
        state,
        short_term=state.short_term + (record,),
        phase_turn_count=state.phase_turn_count + bump,
    )


def _enter_phase(state: SessionState, to_phase: TaskPhase) -> SessionState:
    if not validate_transition(state.phase, to_phase):
        raise ProtocolError(state.phase, to_phase)
    keep_scenario = to_phase in (TaskPhase.ROLE_PLAY, TaskPhase.FEEDBACK)
    return replace(
        state,
        phase=to_phase,
        phase_turn_count=0,
        active_scenario=state.active_scenario if keep_scenario else None,
    )


def apply_event(state: SessionState, event: SessionEvent) -> SessionState:
    """Pure transition function; raises ProtocolError on illegal moves.

    Ending is idempotent: EndSession in an Ended session returns the state
    unchanged; every other event after Ended is a protocol error.
    """
    if state.phase is TaskPhase.ENDED:
        if isinstance(event, UserCommand) and event.kind is UserCommandKind.END_SESSION:
            return state
        raise ProtocolError(TaskPhase.ENDED, TaskPhase.ENDED)

    if isinstance(event, LearnerUtterance):
        return _append_turn(
            state,
            TurnRole.LEARNER,
            event.text,
            event.started_at,
            event.ended_at,
            emotion=event.emotion,
        )
    if isinstance(event, AgentUtterance):
        return _append_turn(
            state,
            TurnRole.AGENT,
            event.text,
            event.started_at,
            event.ended_at,
            latency=event.response_latency_ms,
        )
    if isinstance(event, SaturationReached):
        target = SATURATION_EDGES.get(state.phase)
        if target is None:
            raise ProtocolError(state.phase, state.phase)
        return _enter_phase(state, target)
    if isinstance(event, ScenarioChosen):
        if state.phase is not TaskPhase.SCENARIO_SELECTION:
            raise ProtocolError(state.phase, TaskPhase.ROLE_PLAY)
        return _enter_phase(replace(state, active_scenario=event.scenario), TaskPhase.ROLE_PLAY)
    if isinstance(event, FeedbackDelivered):
        if state.phase is not TaskPhase.FEEDBACK:
            raise ProtocolError(state.phase, TaskPhase.SCENARIO_SELECTION)
        return _enter_phase(state, TaskPhase.SCENARIO_SELECTION)
    if isinstance(event, UserCommand):
        if event.kind is UserCommandKind.END_SESSION:
            return _enter_phase(state, TaskPhase.ENDED)
        if event.kind is UserCommandKind.SWITCH_ROLE_PLAY:
            return _enter_phase(state, TaskPhase.SCENARIO_SELECTION)
        # REQUEST_SCENARIOS changes nothing at the state level; the engine
        # answers it by re-presenting the menu.
        return state
    raise TypeError(f"unknown event type: {type(event).__name__}")


@dataclass
class TurnDeps:
    """Collaborators run_turn needs; composition is injected per phase.

    ``saturation_check`` overrides the default decision-prompt check (the
    assessment phase, for example, adds a local sufficiency gate);
    ``max_turns_per_phase=None`` disables the fallback cap, as single-prompt
    mode requires.
    """

    backend: CompletionBackend
    compose: Callable[[SessionState], list[ChatMessage]]
    clock: Clock
    max_turns_per_phase: Optional[int] = 8
    temperature: float = CONVERSATION_TEMPERATURE
    detect_emotion: Optional[Callable[[str], EmotionLabel]] = None
    saturation_enabled: bool = True
    saturation_check: Optional[Callable[["SessionState"], bool]] = None


def check_saturation(state: SessionState, deps: TurnDeps) -> bool:
    """Ask the decision prompt whether the current phase has enough.

    Unparsable verdicts and backend failures both answer False: transitions
    only happen on an explicit YES.
    """
    history = state.phase_history()
    messages = render_decision(state.phase, history)
    try:
        result = deps.backend.complete(messages, temperature=DECISION_TEMPERATURE)
    except Exception as exc:  # noqa: BLE001 - conservative by contract
        logger.warning("saturation check failed, staying in %s: %s", state.phase.value, exc)
        return False
    verdict = parse_decision(result.text)
    if verdict is None:
        logger.warning("unparsable saturation verdict %r, staying in %s", result.text, state.phase.value)
        return False
    return verdict


def at_turn_cap(state: SessionState, deps: TurnDeps) -> bool:
    """True when the phase has spent its learner-turn budget."""
    return (
        deps.saturation_enabled
        and deps.max_turns_per_phase is not None
        and state.phase in SATURATION_EDGES
        and state.phase_turn_count >= deps.max_turns_per_phase
    )


def exchange_turn(
    state: SessionState, learner_input: str, deps: TurnDeps
) -> tuple[SessionState, str]:
    """Append the learner turn, obtain a completion, append the agent turn.

    On backend failure a TurnError carries the state with the learner turn
    retained.
    """
    now = deps.clock()
    emotion = deps.detect_emotion(learner_input) if deps.detect_emotion else None
    state = apply_event(
        state, LearnerUtterance(learner_input, started_at=now, ended_at=now, emotion=emotion)
    )

    messages = deps.compose(state)
    started = deps.clock()
    try:
        result = deps.backend.complete(messages, temperature=deps.temperature)
    except Exception as exc:
        raise TurnError(f"completion failed: {exc}", state) from exc
    ended = deps.clock()
    state = apply_event(
        state,
        AgentUtterance(
            result.text,
            started_at=started,
            ended_at=max(started, ended),
            response_latency_ms=max(0, ended - started),
        ),
    )
    return state, result.text


def run_turn(
    state: SessionState, learner_input: str, deps: TurnDeps
) -> tuple[SessionState, str]:
    """One learner/agent exchange with saturation handling.

    At turn start, a phase that has spent its learner-turn budget is forced
    along its saturation edge before the new input lands (the fallback cap);
    otherwise the saturation check runs after the exchange. On success
    exactly two turns are appended (learner then agent).
    """
    if state.phase is TaskPhase.ENDED:
        raise ProtocolError(TaskPhase.ENDED, TaskPhase.ENDED)

    capped = False
    if at_turn_cap(state, deps):
        state = apply_event(state, SaturationReached())
        capped = True

    state, text = exchange_turn(state, learner_input, deps)

    if deps.saturation_enabled and not capped and state.phase in SATURATION_EDGES:
        checker = deps.saturation_check or (lambda s: check_saturation(s, deps))
        if checker(state):
            state = apply_event(state, SaturationReached())

    return state, text
