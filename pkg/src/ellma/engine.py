"""Session engine: drives the full task flow over a completion backend.

One TutorSession owns one conversation: it dispatches learner input per
phase, runs phase-entry actions on transitions (assessment, scenario menu,
feedback), mirrors emotions to the avatar bridge, and emits a gap-free
stream of SessionEventEnvelope records that the CSV log, the CLI, and the
web gateway all consume. Everything it does is observable twice: as turns
and as envelopes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

from .core import (
    CefrLevel,
    EllmaError,
    LearnerProfile,
    ProtocolError,
    SATURATION_EDGES,
    Scenario,
    SessionConfig,
    TaskPhase,
    TurnRecord,
    TurnRole,
    validate_transition,
)
from .embodiment import EmbodimentBridge
from .gateway import ChatMessage, CompletionBackend
from .memory import MemoryStore, recall, summarize_session
from .pedagogy import (
    AssessmentError,
    ScaffoldAction,
    ScaffoldKind,
    assess_level,
    assessment_slot_value,
    assessment_topic,
    default_topic,
    generate_feedback,
    format_feedback,
    judge_sufficiency,
    provisional_assessment,
    scaffold,
    scaffold_hint,
    scenario_menu,
    user_scenario,
)
from .prompts import compose_request, render, render_single_prompt
from .transcript import ms_to_iso
from .workflow import (
    Clock,
    FeedbackDelivered,
    LearnerUtterance,
    SaturationReached,
    ScenarioChosen,
    SessionState,
    TurnDeps,
    TurnError,
    UserCommand,
    UserCommandKind,
    apply_event,
    at_turn_cap,
    check_saturation,
    exchange_turn,
    init_session,
)

logger = logging.getLogger(__name__)

ENVELOPE_KINDS = (
    "phase_changed",
    "turn_added",
    "assessment_set",
    "scenario_set",
    "feedback_ready",
    "error",
    "ended",
)

SESSION_ENDED_MARKER = "session ended"


class CommandRejected(EllmaError):
    """Operator command refused; carries the offending edge and a reason."""

    def __init__(self, from_phase: TaskPhase, to_phase: TaskPhase, reason: str) -> None:
        super().__init__(reason)
        self.from_phase = from_phase
        self.to_phase = to_phase
        self.reason = reason


@dataclass(frozen=True)
class SessionEventEnvelope:
    """One observable session event; seq is gap-free per session."""

    session_id: str
    seq: int
    kind: str
    payload: dict
    ts: str

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
            "ts": self.ts,
        }


class FakeClock:
    """Deterministic millisecond clock for scripted runs: fixed start, fixed step."""

    def __init__(self, start_ms: int = 1735689600000, step_ms: int = 250) -> None:
        self._now = start_ms
        self._step = step_ms

    def __call__(self) -> int:
        value = self._now
        self._now += self._step
        return value


def wall_clock() -> int:
    return int(time.time() * 1000)


def _turn_payload(turn: TurnRecord) -> dict:
    return {
        "seq": turn.seq,
        "role": turn.role.value,
        "text": turn.text,
        "phase": turn.phase.value,
        "started_at": turn.started_at,
        "ended_at": turn.ended_at,
        "latency_ms": turn.response_latency_ms,
        "emotion": turn.emotion.value if turn.emotion else None,
    }


def scenario_payload(scenario: Scenario) -> dict:
    return {
        "scenario_id": scenario.scenario_id,
        "title": scenario.title,
        "scene_description": scenario.scene_description,
        "agent_role": scenario.agent_role,
        "learner_role": scenario.learner_role,
        "environment_tag": scenario.environment_tag,
        "difficulty": scenario.difficulty.name,
    }


def render_menu_text(menu: Sequence[Scenario]) -> str:
    lines = ["Here are three scenarios we could practice:"]
    for i, s in enumerate(menu, start=1):
        lines.append(
            f"{i}. {s.title}: {s.scene_description} (I will be the {s.agent_role}; "
            f"you will be the {s.learner_role}.)"
        )
    lines.append("Say 1, 2, or 3 to pick one, or describe a scenario of your own.")
    return "\n".join(lines)


class TutorSession:
    """One live tutoring session.

    Callers drive it with start(), handle_learner_text(), and the operator
    methods; every call returns the envelopes it produced. The engine owns
    all phase transitions; the model never does.
    """

    def __init__(
        self,
        profile: LearnerProfile,
        config: SessionConfig,
        backend: CompletionBackend,
        *,
        session_id: Optional[str] = None,
        clock: Optional[Clock] = None,
        store: Optional[MemoryStore] = None,
        bridge: Optional[EmbodimentBridge] = None,
        emotion_lexicon: Optional[dict] = None,
        min_assessment_words: int = 40,
        min_assessment_speech_s: Optional[float] = 30.0,
    ) -> None:
        self.config = config
        self.backend = backend
        self.clock: Clock = clock or wall_clock
        self.store = store
        self.bridge = bridge
        self.min_assessment_words = min_assessment_words
        self.min_assessment_speech_s = min_assessment_speech_s

        from .embodiment import load_default_lexicon

        self.emotion_lexicon = (
            emotion_lexicon if emotion_lexicon is not None else load_default_lexicon()
        )
        self.state: SessionState = init_session(profile, config, session_id=session_id)
        self.envelopes: list[SessionEventEnvelope] = []
        self.menu: list[Scenario] = []
        self.last_assessment = None  # Optional[AssessmentResult]
        self._memory_summary: Optional[str] = None
        self._started_at = self.clock()
        self._observers: list[Callable[[SessionEventEnvelope], None]] = []
        if store is not None:
            self._memory_summary = recall(store, profile.learner_id)
            if self.state.profile.assessed_level is None:
                # carry the most recent stored level forward: difficulty
                # adjusts across sessions until a fresh assessment replaces it
                previous = store.list_by_learner(profile.learner_id)
                for summary in previous:
                    if summary.assessed_level is not None:
                        self.state = replace(
                            self.state,
                            profile=self.state.profile.with_level(summary.assessed_level),
                        )
                        break

    # -- observability ---------------------------------------------------

    @property
    def session_id(self) -> str:
        return self.state.session_id

    @property
    def ended(self) -> bool:
        return self.state.phase is TaskPhase.ENDED

    def add_observer(self, observer: Callable[[SessionEventEnvelope], None]) -> None:
        self._observers.append(observer)

    def _emit(self, kind: str, payload: dict) -> SessionEventEnvelope:
        envelope = SessionEventEnvelope(
            session_id=self.state.session_id,
            seq=len(self.envelopes) + 1,
            kind=kind,
            payload=payload,
            ts=ms_to_iso(self.clock()),
        )
        self.envelopes.append(envelope)
        for observer in self._observers:
            observer(envelope)
        return envelope

    def _commit(
        self,
        new_state: SessionState,
        turn_extra: Optional[dict] = None,
        extra_role: Optional[TurnRole] = None,
    ) -> None:
        """Adopt a new state, emitting envelopes for what changed.

        At most one phase change happens per committed step; new turns carry
        their own phase, which orders the phase_changed envelope correctly
        relative to them. ``turn_extra`` enriches the turn_added payload of
        new turns (those matching ``extra_role``, or all of them).
        """
        old_state = self.state
        new_turns = new_state.short_term[len(old_state.short_term) :]
        phase_changed = new_state.phase is not old_state.phase
        self.state = new_state

        if phase_changed and all(t.phase is new_state.phase for t in new_turns):
            self._emit_phase_change(old_state.phase, new_state.phase)
            phase_changed = False
        for turn in new_turns:
            payload = _turn_payload(turn)
            if turn_extra and (extra_role is None or turn.role is extra_role):
                payload.update(turn_extra)
            self._emit("turn_added", payload)
            if self.bridge is not None:
                self._mirror(turn)
        if phase_changed:
            self._emit_phase_change(old_state.phase, new_state.phase)

    def _emit_phase_change(self, from_phase: TaskPhase, to_phase: TaskPhase) -> None:
        self._emit("phase_changed", {"from": from_phase.value, "to": to_phase.value})

    def _mirror(self, turn: TurnRecord) -> None:
        try:
            if turn.role is TurnRole.LEARNER:
                self.bridge.mirror_emotion(turn.text)
            elif turn.role is TurnRole.AGENT:
                self.bridge.send_chatbox(turn.text)
        except Exception as exc:  # noqa: BLE001 - avatar link is best-effort
            logger.warning("embodiment bridge failed: %s", exc)

    def transcript(self) -> tuple[TurnRecord, ...]:
        return self.state.short_term

    def snapshot(self) -> dict:
        profile = self.state.profile
        return {
            "session_id": self.state.session_id,
            "phase": self.state.phase.value,
            "prompt_mode": self.state.prompt_mode,
            "learner_id": profile.learner_id,
            "assessed_level": profile.assessed_level.name if profile.assessed_level else None,
            "active_scenario": (
                scenario_payload(self.state.active_scenario)
                if self.state.active_scenario
                else None
            ),
            "turns": [_turn_payload(t) for t in self.state.short_term],
            "envelope_seq": len(self.envelopes),
            "voice_id": self.config.voice_id,
        }

    # -- composition -------------------------------------------------------

    def _persona(self) -> ChatMessage:
        return render("persona")[0]

    def _compose(self, state: SessionState, extra_task: Sequence[ChatMessage] = ()) -> list[ChatMessage]:
        """Phase-appropriate request for a conversational exchange."""
        if state.prompt_mode == "single":
            return compose_request(
                render_single_prompt()[0],
                [],
                state.short_term,
                memory_summary=self._memory_summary,
                budget=self.config.token_window_budget,
            )

        from .prompts import format_history  # local import keeps module top lean

        phase = state.phase
        if phase is TaskPhase.INTRODUCTION:
            task = list(render("introduction"))
            history: Sequence[TurnRecord] = state.short_term
        elif phase is TaskPhase.ASSESSMENT:
            task = list(
                render("assessment", {"user_info_conversation": format_history(state.short_term)})
            )
            topic = assessment_topic(state.profile)
            if topic != default_topic():
                task.append(
                    ChatMessage("system", f"For this assessment, ask the learner to {topic}.")
                )
            # the assessment template pastes the history into its slot
            history = ()
        elif phase is TaskPhase.ROLE_PLAY:
            scenario = state.active_scenario
            assert scenario is not None
            slot = (
                f"{scenario.title}: {scenario.scene_description} "
                f"(you are the {scenario.agent_role}, the learner is the {scenario.learner_role})"
            )
            level = state.profile.assessed_level or (
                self.last_assessment.level if self.last_assessment else None
            )
            task = list(
                render("role_play", {"scenario": slot, "assessment": assessment_slot_value(level)})
            )
            history = state.phase_history(TaskPhase.ROLE_PLAY)
        else:
            raise ProtocolError(phase, phase)

        task.extend(extra_task)
        return compose_request(
            self._persona(),
            task,
            history,
            memory_summary=self._memory_summary,
            budget=self.config.token_window_budget,
        )

    def _detect_emotion(self, text: str):
        from .embodiment import detect_emotion

        return detect_emotion(text, self.emotion_lexicon)

    def _turn_deps(self, extra_task: Sequence[ChatMessage] = ()) -> TurnDeps:
        return TurnDeps(
            backend=self.backend,
            compose=lambda state: self._compose(state, extra_task),
            clock=self.clock,
            max_turns_per_phase=(
                None if self.state.prompt_mode == "single" else self.config.max_turns_per_phase
            ),
            detect_emotion=self._detect_emotion,
            saturation_enabled=self.state.prompt_mode != "single",
        )

    def _agent_initiated(self, messages: list[ChatMessage], turn_extra: Optional[dict] = None) -> str:
        """Agent-initiated turn (phase entry): one completion, one agent turn."""
        started = self.clock()
        result = self.backend.complete(messages)
        ended = self.clock()
        from .workflow import AgentUtterance

        new_state = apply_event(
            self.state,
            AgentUtterance(
                result.text,
                started_at=started,
                ended_at=max(started, ended),
                response_latency_ms=max(0, ended - started),
            ),
        )
        self._commit(new_state, turn_extra)
        return result.text

    def _append_system_turn(self, text: str, phase: TaskPhase) -> None:
        now = self.clock()
        record = TurnRecord(
            seq=self.state.next_seq,
            role=TurnRole.SYSTEM,
            text=text,
            phase=phase,
            started_at=now,
            ended_at=now,
        )
        self._commit(replace(self.state, short_term=self.state.short_term + (record,)))

    # -- public API --------------------------------------------------------

    def start(self) -> list[SessionEventEnvelope]:
        """Produce the agent's opening turn."""
        mark = len(self.envelopes)
        logger.info(
            "session %s started (prompt_mode=%s, voice=%s)",
            self.session_id,
            self.state.prompt_mode,
            self.config.voice_id,
        )
        try:
            self._agent_initiated(self._compose_opening())
        except Exception as exc:  # noqa: BLE001
            self._emit("error", {"code": "backend_unavailable", "message": str(exc)})
        return self.envelopes[mark:]

    def _compose_opening(self) -> list[ChatMessage]:
        if self.state.prompt_mode == "single":
            return [render_single_prompt()[0], ChatMessage("user", "Hello!")]
        return self._compose(self.state)

    def handle_learner_text(
        self, text: str, *, low_confidence_fragment: Optional[str] = None
    ) -> list[SessionEventEnvelope]:
        """Dispatch one line of learner input; returns the new envelopes."""
        mark = len(self.envelopes)
        text = text.strip()
        if not text:
            return []
        try:
            self._dispatch(text, low_confidence_fragment)
        except CommandRejected as exc:
            self._emit(
                "error",
                {
                    "code": "rejected",
                    "message": exc.reason,
                    "from": exc.from_phase.value,
                    "to": exc.to_phase.value,
                },
            )
        except ProtocolError as exc:
            self._emit(
                "error",
                {
                    "code": "protocol",
                    "message": str(exc),
                    "from": exc.from_phase.value,
                    "to": exc.to_phase.value,
                },
            )
        return self.envelopes[mark:]

    def _dispatch(self, text: str, low_confidence_fragment: Optional[str]) -> None:
        if text == "/end":
            self._end_session()
            return
        if self.ended:
            raise ProtocolError(TaskPhase.ENDED, TaskPhase.ENDED)
        if (
            self.config.max_session_s is not None
            and (self.clock() - self._started_at) / 1000.0 >= self.config.max_session_s
        ):
            logger.info("session %s hit the time limit", self.session_id)
            self._end_session()
            return

        if text == "/switch":
            self._switch_role_play()
            return
        if text.startswith("/scenario"):
            self._scenario_command(text[len("/scenario") :].strip())
            return

        if self.state.prompt_mode == "single":
            self._conversational_turn(text, low_confidence_fragment)
            return

        deps = self._turn_deps()
        if at_turn_cap(self.state, deps):
            # fallback cap: the phase is out of budget, advance before the
            # new input lands, then dispatch it in the new phase
            self._advance_phase(forced=True)
            if self.ended:
                return

        if self.state.phase is TaskPhase.SCENARIO_SELECTION:
            self._handle_scenario_choice(text)
        else:
            self._conversational_turn(text, low_confidence_fragment)

    # -- conversational turns ------------------------------------------------

    def _scaffold_for(self, text: str, fragment: Optional[str]) -> ScaffoldAction:
        if self.state.phase is not TaskPhase.ROLE_PLAY:
            return ScaffoldAction(ScaffoldKind.NONE)
        previous = self.state.learner_turns(TaskPhase.ROLE_PLAY)
        return scaffold(text, previous, low_confidence_fragment=fragment)

    def _conversational_turn(self, text: str, fragment: Optional[str]) -> None:
        action = self._scaffold_for(text, fragment)
        extra_task: list[ChatMessage] = []
        hint = scaffold_hint(action)
        if hint:
            extra_task.append(ChatMessage("system", hint))
        deps = self._turn_deps(extra_task)

        turn_extra = (
            {"scaffold": {"kind": action.kind.value, "text": action.text}}
            if action.kind is not ScaffoldKind.NONE
            else None
        )
        try:
            new_state, _ = exchange_turn(self.state, text, deps)
        except TurnError as exc:
            self._commit(exc.state, turn_extra, extra_role=TurnRole.LEARNER)
            self._emit("error", {"code": "backend_unavailable", "message": str(exc)})
            return
        self._commit(new_state, turn_extra, extra_role=TurnRole.LEARNER)

        if self.state.prompt_mode == "single":
            return
        if self.state.phase in SATURATION_EDGES and self._phase_saturated():
            self._advance_phase(forced=False)

    def _phase_saturated(self) -> bool:
        if self.state.phase is TaskPhase.ASSESSMENT:
            return judge_sufficiency(
                self.state.phase_history(TaskPhase.ASSESSMENT),
                self.backend,
                min_words=self.min_assessment_words,
                min_speech_s=self.min_assessment_speech_s,
            )
        return check_saturation(self.state, self._turn_deps())

    # -- phase transitions -----------------------------------------------------

    def _advance_phase(self, *, forced: bool) -> None:
        """Take the saturation edge out of the current phase and run entry actions."""
        from_phase = self.state.phase
        self._commit(apply_event(self.state, SaturationReached()))
        if from_phase is TaskPhase.INTRODUCTION:
            self._enter_assessment()
        elif from_phase is TaskPhase.ASSESSMENT:
            self._close_assessment(forced=forced)
            self._offer_menu()
        elif from_phase is TaskPhase.ROLE_PLAY:
            self._deliver_feedback()

    def _enter_assessment(self) -> None:
        try:
            self._agent_initiated(self._compose(self.state))
        except Exception as exc:  # noqa: BLE001
            self._emit("error", {"code": "backend_unavailable", "message": str(exc)})

    def _close_assessment(self, *, forced: bool) -> None:
        """Produce the assessment result when leaving the Assessment phase.

        A saturation-driven exit met the sufficiency gate, so the level is
        real and is written to the profile. A cap-forced exit never met it:
        the result is a provisional A1 and the profile stays untouched.
        """
        history = self.state.short_term
        if forced:
            result = provisional_assessment(self.state.phase_history(TaskPhase.ASSESSMENT))
        else:
            try:
                result = assess_level(history, self.backend)
            except Exception as exc:  # noqa: BLE001 - includes AssessmentError
                self._emit("error", {"code": "assessment_failed", "message": str(exc)})
                return
        self.last_assessment = result
        if result.sufficient:
            self._commit(
                replace(self.state, profile=self.state.profile.with_level(result.level))
            )
        self._emit(
            "assessment_set",
            {
                "level": result.level.name,
                "sufficient": result.sufficient,
                "rationale": result.rationale,
                "input_word_count": result.input_word_count,
            },
        )

    def _menu_difficulty(self) -> Optional[CefrLevel]:
        if self.state.profile.assessed_level:
            return self.state.profile.assessed_level
        if self.last_assessment:
            return self.last_assessment.level
        return None

    def _offer_menu(self) -> None:
        self.menu = scenario_menu(self.state.profile, self._menu_difficulty(), self.backend)
        menu_payload = [scenario_payload(s) for s in self.menu]
        now = self.clock()
        record = TurnRecord(
            seq=self.state.next_seq,
            role=TurnRole.AGENT,
            text=render_menu_text(self.menu),
            phase=self.state.phase,
            started_at=now,
            ended_at=now,
        )
        self._commit(
            replace(self.state, short_term=self.state.short_term + (record,)),
            {"menu": menu_payload},
            extra_role=TurnRole.AGENT,
        )

    def _handle_scenario_choice(self, text: str) -> None:
        now = self.clock()
        self._commit(
            apply_event(
                self.state,
                LearnerUtterance(
                    text, started_at=now, ended_at=now, emotion=self._detect_emotion(text)
                ),
            )
        )
        scenario = self._parse_choice(text)
        if scenario is None:
            self._append_agent_note(
                "Please say 1, 2, or 3 to pick a scenario, or describe the one "
                "you would like to practice."
            )
            return
        self._begin_role_play(scenario)

    def _parse_choice(self, text: str) -> Optional[Scenario]:
        """Menu number, title match, or (for a described idea) a custom scenario.

        Very short free text is treated as not-a-choice and answered with a
        re-prompt rather than being promoted to a scenario.
        """
        stripped = text.strip().rstrip(".!")
        if stripped.isdigit() and self.menu:
            index = int(stripped)
            if 1 <= index <= len(self.menu):
                return self.menu[index - 1]
        lowered = stripped.lower()
        for scenario in self.menu:
            if scenario.title.lower() in lowered or lowered in scenario.title.lower():
                return scenario
        if len(stripped.split()) >= 3:
            return user_scenario(text, self._menu_difficulty())
        return None

    def _append_agent_note(self, text: str) -> None:
        now = self.clock()
        record = TurnRecord(
            seq=self.state.next_seq,
            role=TurnRole.AGENT,
            text=text,
            phase=self.state.phase,
            started_at=now,
            ended_at=now,
        )
        self._commit(replace(self.state, short_term=self.state.short_term + (record,)))

    def _begin_role_play(self, scenario: Scenario) -> None:
        self._commit(apply_event(self.state, ScenarioChosen(scenario)))
        self._emit("scenario_set", scenario_payload(scenario))
        try:
            self._agent_initiated(self._compose(self.state))
        except Exception as exc:  # noqa: BLE001
            self._emit("error", {"code": "backend_unavailable", "message": str(exc)})

    def _deliver_feedback(self) -> None:
        """Feedback phase entry: generate, speak, record, then re-offer the menu."""
        history = self.state.phase_history(TaskPhase.ROLE_PLAY)
        try:
            report = generate_feedback(history, self.backend)
        except Exception as exc:  # noqa: BLE001
            self._emit("error", {"code": "feedback_failed", "message": str(exc)})
            report = None
        if report is not None:
            self._emit(
                "feedback_ready",
                {
                    "strength": report.general_feedback.strength,
                    "improvement": report.general_feedback.improvement,
                    "advice_moving_forward": report.advice_moving_forward,
                    "language_summary": [
                        {"item": i.item, "kind": i.kind} for i in report.language_summary
                    ],
                    "incomplete": report.incomplete,
                },
            )
            now = self.clock()
            record = TurnRecord(
                seq=self.state.next_seq,
                role=TurnRole.AGENT,
                text=format_feedback(report),
                phase=self.state.phase,
                started_at=now,
                ended_at=now,
            )
            self._commit(replace(self.state, short_term=self.state.short_term + (record,)))
            self._commit(apply_event(self.state, FeedbackDelivered(report)))
        else:
            # feedback failed; fall back to the menu so the session can go on
            self._commit(
                apply_event(self.state, UserCommand(UserCommandKind.SWITCH_ROLE_PLAY))
            )
        self._offer_menu()

    # -- commands ---------------------------------------------------------------

    def _switch_role_play(self) -> None:
        if not validate_transition(self.state.phase, TaskPhase.SCENARIO_SELECTION):
            raise CommandRejected(
                self.state.phase,
                TaskPhase.SCENARIO_SELECTION,
                f"cannot switch role-play from {self.state.phase.value}",
            )
        self._commit(apply_event(self.state, UserCommand(UserCommandKind.SWITCH_ROLE_PLAY)))
        self._offer_menu()

    def _scenario_command(self, description: str) -> None:
        if not description:
            raise CommandRejected(
                self.state.phase, self.state.phase, "usage: /scenario <description>"
            )
        if self.state.phase is TaskPhase.ROLE_PLAY:
            self._commit(
                apply_event(self.state, UserCommand(UserCommandKind.SWITCH_ROLE_PLAY))
            )
        if self.state.phase is not TaskPhase.SCENARIO_SELECTION:
            raise CommandRejected(
                self.state.phase,
                TaskPhase.ROLE_PLAY,
                "custom scenarios are available once the assessment is done",
            )
        self._begin_role_play(user_scenario(description, self._menu_difficulty()))

    def choose_scenario(self, scenario: Scenario) -> list[SessionEventEnvelope]:
        """Operator-injected scenario choice."""
        mark = len(self.envelopes)
        if self.state.phase is not TaskPhase.SCENARIO_SELECTION:
            self._emit(
                "error",
                {
                    "code": "rejected",
                    "message": "scenario can only be injected during scenario selection",
                    "from": self.state.phase.value,
                    "to": TaskPhase.ROLE_PLAY.value,
                },
            )
        else:
            self._begin_role_play(scenario)
        return self.envelopes[mark:]

    def force_phase(self, target: TaskPhase) -> list[SessionEventEnvelope]:
        """Operator-forced transition, validated against the phase edge set."""
        mark = len(self.envelopes)
        from_phase = self.state.phase
        try:
            if not validate_transition(from_phase, target):
                raise CommandRejected(
                    from_phase, target, f"illegal transition {from_phase.value} -> {target.value}"
                )
            if target is TaskPhase.ENDED:
                self._end_session()
            elif SATURATION_EDGES.get(from_phase) is target:
                self._advance_phase(forced=True)
            elif target is TaskPhase.SCENARIO_SELECTION:
                self._switch_role_play()
            else:
                raise CommandRejected(
                    from_phase,
                    target,
                    "transition requires a scenario; inject one instead",
                )
        except CommandRejected as exc:
            self._emit(
                "error",
                {
                    "code": "rejected",
                    "message": exc.reason,
                    "from": exc.from_phase.value,
                    "to": exc.to_phase.value,
                },
            )
        return self.envelopes[mark:]

    def request_clarification(self, fragment: Optional[str] = None) -> list[SessionEventEnvelope]:
        """Deterministic agent clarification when the learner's speech was lost.

        Used by the voice pipeline on transcription failure; no completion is
        made since there is no transcript to react to.
        """
        mark = len(self.envelopes)
        heard = f'You just said "{fragment}", do you mean something else?' if fragment else ""
        text = (
            "Sorry, I did not catch that clearly. "
            + (heard + " " if heard else "")
            + "Could you say it again?"
        )
        now = self.clock()
        record = TurnRecord(
            seq=self.state.next_seq,
            role=TurnRole.AGENT,
            text=text,
            phase=self.state.phase,
            started_at=now,
            ended_at=now,
        )
        self._commit(replace(self.state, short_term=self.state.short_term + (record,)))
        return self.envelopes[mark:]

    def end(self) -> list[SessionEventEnvelope]:
        mark = len(self.envelopes)
        self._end_session()
        return self.envelopes[mark:]

    def _end_session(self) -> None:
        if self.ended:
            return
        scenarios = [
            s.scenario_id
            for s in ([self.state.active_scenario] if self.state.active_scenario else [])
        ]
        if self.store is not None and self.state.short_term:
            summary = summarize_session(
                self.state.short_term,
                self.state.profile,
                self.backend,
                session_id=self.session_id,
                created_at=self.clock(),
                assessed_level=self.state.profile.assessed_level,
                scenarios_practiced=scenarios,
            )
            if summary is not None:
                self.store.put(summary)
        self._commit(apply_event(self.state, UserCommand(UserCommandKind.END_SESSION)))
        self._append_system_turn(SESSION_ENDED_MARKER, TaskPhase.ENDED)
        self._emit("ended", {"turns": len(self.state.short_term)})
        logger.info("session %s ended after %d turns", self.session_id, len(self.state.short_term))
