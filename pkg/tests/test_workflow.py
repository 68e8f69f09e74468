from __future__ import annotations

import random

import pytest

from ellma.core import (
    CefrLevel,
    LearnerProfile,
    ProtocolError,
    SATURATION_EDGES,
    Scenario,
    SessionConfig,
    TaskPhase,
    TurnRole,
    FeedbackItem,
    FeedbackReport,
    GeneralFeedback,
    validate_transition,
)
from ellma.gateway import ScriptedBackend, ScriptEntry
from ellma.workflow import (
    AgentUtterance,
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
    check_saturation,
    init_session,
    run_turn,
)


def _scenario() -> Scenario:
    return Scenario(
        scenario_id="s1",
        title="Ordering at a cafe",
        scene_description="A cozy cafe",
        agent_role="barista",
        learner_role="customer",
        environment_tag="cafe",
        difficulty=CefrLevel.B1,
    )


def _report() -> FeedbackReport:
    return FeedbackReport(
        general_feedback=GeneralFeedback(strength="clear requests", improvement="verb tense"),
        advice_moving_forward="order a coffee this week",
        language_summary=(FeedbackItem("espresso", "vocabulary"),),
    )


def _state(profile: LearnerProfile, config: SessionConfig, phase: TaskPhase = TaskPhase.INTRODUCTION) -> SessionState:
    from dataclasses import replace

    return replace(init_session(profile, config, session_id="t1"), phase=phase)


def _deps(replies: list[str], **kwargs) -> TurnDeps:
    clock_state = {"now": 1000}

    def clock() -> int:
        clock_state["now"] += 100
        return clock_state["now"]

    backend = ScriptedBackend([ScriptEntry(reply=r) for r in replies], default_reply=kwargs.pop("default_reply", None))
    return TurnDeps(
        backend=backend,
        compose=lambda state: _compose_passthrough(state),
        clock=clock,
        **kwargs,
    )


def _compose_passthrough(state: SessionState):
    from ellma.gateway import ChatMessage

    messages = [ChatMessage("system", "test harness")]
    for turn in state.short_term:
        if turn.role is TurnRole.LEARNER:
            messages.append(ChatMessage("user", turn.text))
        elif turn.role is TurnRole.AGENT:
            messages.append(ChatMessage("assistant", turn.text))
    if not any(m.role == "user" for m in messages):
        messages.append(ChatMessage("user", "(begin)"))
    return messages


class TestInitSession:
    def test_initial_state(self, profile, config) -> None:
        state = init_session(profile, config)
        assert state.phase is TaskPhase.INTRODUCTION
        assert state.short_term == ()
        assert state.phase_turn_count == 0

    def test_invalid_config_rejected_at_construction(self) -> None:
        from ellma.core import ConfigurationError

        with pytest.raises(ConfigurationError):
            SessionConfig(max_turns_per_phase=0)


class TestApplyEvent:
    def test_saturation_advances_forward(self, profile, config) -> None:
        state = init_session(profile, config, session_id="t1")
        state = apply_event(state, SaturationReached())
        assert state.phase is TaskPhase.ASSESSMENT

    def test_end_from_role_play(self, profile, config) -> None:
        state = _state(profile, config, TaskPhase.ROLE_PLAY)
        state = apply_event(state, UserCommand(UserCommandKind.END_SESSION))
        assert state.phase is TaskPhase.ENDED

    def test_scenario_chosen_outside_selection_is_protocol_error(self, profile, config) -> None:
        state = _state(profile, config, TaskPhase.ASSESSMENT)
        with pytest.raises(ProtocolError) as exc:
            apply_event(state, ScenarioChosen(_scenario()))
        assert exc.value.from_phase is TaskPhase.ASSESSMENT
        assert exc.value.to_phase is TaskPhase.ROLE_PLAY

    def test_end_is_idempotent(self, profile, config) -> None:
        state = _state(profile, config, TaskPhase.ENDED)
        assert apply_event(state, UserCommand(UserCommandKind.END_SESSION)) is state

    def test_ended_rejects_everything_else(self, profile, config) -> None:
        state = _state(profile, config, TaskPhase.ENDED)
        with pytest.raises(ProtocolError):
            apply_event(state, LearnerUtterance("hi"))

    def test_utterances_append_and_count(self, profile, config) -> None:
        state = init_session(profile, config, session_id="t1")
        state = apply_event(state, LearnerUtterance("hello"))
        state = apply_event(state, AgentUtterance("hi there"))
        assert [t.role for t in state.short_term] == [TurnRole.LEARNER, TurnRole.AGENT]
        assert state.phase_turn_count == 1  # learner turns drive the cap
        assert [t.seq for t in state.short_term] == [1, 2]

    def test_phase_change_resets_count_and_scenario_rule(self, profile, config) -> None:
        state = _state(profile, config, TaskPhase.SCENARIO_SELECTION)
        state = apply_event(state, ScenarioChosen(_scenario()))
        assert state.phase is TaskPhase.ROLE_PLAY
        assert state.active_scenario is not None
        assert state.phase_turn_count == 0
        state = apply_event(state, SaturationReached())
        assert state.phase is TaskPhase.FEEDBACK
        assert state.active_scenario is not None  # kept through feedback
        state = apply_event(state, FeedbackDelivered(_report()))
        assert state.phase is TaskPhase.SCENARIO_SELECTION
        assert state.active_scenario is None

    def test_switch_clears_scenario(self, profile, config) -> None:
        state = _state(profile, config, TaskPhase.SCENARIO_SELECTION)
        state = apply_event(state, ScenarioChosen(_scenario()))
        state = apply_event(state, UserCommand(UserCommandKind.SWITCH_ROLE_PLAY))
        assert state.phase is TaskPhase.SCENARIO_SELECTION
        assert state.active_scenario is None

    def test_request_scenarios_is_stateless(self, profile, config) -> None:
        state = _state(profile, config, TaskPhase.SCENARIO_SELECTION)
        assert apply_event(state, UserCommand(UserCommandKind.REQUEST_SCENARIOS)) == state


def _random_event(rng: random.Random, state: SessionState):
    choice = rng.randrange(7)
    if choice == 0:
        return LearnerUtterance(f"utterance {rng.randrange(1000)}")
    if choice == 1:
        return AgentUtterance(f"reply {rng.randrange(1000)}")
    if choice == 2:
        return SaturationReached()
    if choice == 3:
        return ScenarioChosen(_scenario())
    if choice == 4:
        return UserCommand(UserCommandKind.END_SESSION)
    if choice == 5:
        return UserCommand(UserCommandKind.SWITCH_ROLE_PLAY)
    return FeedbackDelivered(_report())


class TestStateMachineFuzz:
    def test_random_event_sequences_never_escape_edge_set(self, profile, config) -> None:
        rng = random.Random(20240917)
        sequences = 500
        for _ in range(sequences):
            state = init_session(profile, config, session_id="fuzz")
            for _ in range(rng.randrange(1, 30)):
                before = state.phase
                event = _random_event(rng, state)
                try:
                    state = apply_event(state, event)
                except ProtocolError:
                    continue
                if state.phase is not before:
                    assert validate_transition(before, state.phase), (before, state.phase)

    def test_ended_is_absorbing(self, profile, config) -> None:
        rng = random.Random(7)
        state = _state(profile, config, TaskPhase.ENDED)
        for _ in range(200):
            event = _random_event(rng, state)
            try:
                state = apply_event(state, event)
            except ProtocolError:
                pass
            assert state.phase is TaskPhase.ENDED


class TestRunTurn:
    def test_appends_learner_then_agent(self, profile, config) -> None:
        deps = _deps(["OK"], saturation_enabled=False)
        state = init_session(profile, config, session_id="t1")
        state, reply = run_turn(state, "hello", deps)
        assert reply == "OK"
        assert [t.role for t in state.short_term] == [TurnRole.LEARNER, TurnRole.AGENT]
        assert state.short_term[-1].text == "OK"
        assert state.short_term[-1].response_latency_ms == 100

    def test_passthrough_increments_seq_by_two(self, profile, config) -> None:
        deps = _deps(["OK", "OK"], saturation_enabled=False)
        state = init_session(profile, config, session_id="t1")
        state, _ = run_turn(state, "one", deps)
        state, _ = run_turn(state, "two", deps)
        assert [t.seq for t in state.short_term] == [1, 2, 3, 4]

    def test_backend_failure_retains_learner_turn(self, profile, config) -> None:
        deps = _deps([], saturation_enabled=False)  # exhausted immediately
        state = init_session(profile, config, session_id="t1")
        with pytest.raises(TurnError) as exc:
            run_turn(state, "hello", deps)
        kept = exc.value.state
        assert len(kept.short_term) == 1
        assert kept.short_term[0].role is TurnRole.LEARNER

    def test_cap_forces_transition_on_next_turn(self, profile) -> None:
        # hand-simulated counter: max=1, first turn stays, second transitions
        from dataclasses import replace

        config = SessionConfig(max_turns_per_phase=1)
        state = replace(
            _state(LearnerProfile(learner_id="x"), config, TaskPhase.ROLE_PLAY),
            active_scenario=_scenario(),
        )
        deps = _deps(["reply1", "NO", "reply2"], max_turns_per_phase=1)
        state, _ = run_turn(state, "first", deps)
        assert state.phase is TaskPhase.ROLE_PLAY
        state, _ = run_turn(state, "second", deps)
        assert state.phase is TaskPhase.FEEDBACK

    def test_no_capped_phase_exceeds_learner_turn_cap(self, profile) -> None:
        config = SessionConfig(max_turns_per_phase=3)
        deps = _deps([], default_reply="OK", max_turns_per_phase=3)
        state = init_session(profile, config, session_id="t1")
        for i in range(12):
            state, _ = run_turn(state, f"turn {i}", deps)
        by_phase: dict[TaskPhase, int] = {}
        for t in state.short_term:
            if t.role is TurnRole.LEARNER:
                by_phase[t.phase] = by_phase.get(t.phase, 0) + 1
        for phase in SATURATION_EDGES:
            assert by_phase.get(phase, 0) <= 3, by_phase

    def test_run_turn_rejected_after_end(self, profile, config) -> None:
        state = _state(profile, config, TaskPhase.ENDED)
        with pytest.raises(ProtocolError):
            run_turn(state, "hello", _deps(["x"]))

    def test_custom_saturation_check_is_used(self, profile, config) -> None:
        calls = []

        def checker(state: SessionState) -> bool:
            calls.append(state.phase)
            return True

        deps = _deps(["reply"], saturation_check=checker)
        state = init_session(profile, config, session_id="t1")
        state, _ = run_turn(state, "hello", deps)
        assert calls == [TaskPhase.INTRODUCTION]
        assert state.phase is TaskPhase.ASSESSMENT


class TestCheckSaturation:
    def test_yes_advances(self, profile, config) -> None:
        deps = _deps(["YES"])
        state = init_session(profile, config, session_id="t1")
        state = apply_event(state, LearnerUtterance("hello"))
        assert check_saturation(state, deps) is True

    def test_trailing_yes_wins(self, profile, config) -> None:
        # oracle: last word-bounded YES/NO token wins
        deps = _deps(["The user has shared enough. YES."])
        state = init_session(profile, config, session_id="t1")
        state = apply_event(state, LearnerUtterance("hello"))
        assert check_saturation(state, deps) is True

    def test_unparsable_is_conservative(self, profile, config) -> None:
        deps = _deps(["maybe"])
        state = init_session(profile, config, session_id="t1")
        state = apply_event(state, LearnerUtterance("hello"))
        assert check_saturation(state, deps) is False

    def test_backend_failure_is_conservative(self, profile, config) -> None:
        deps = _deps([])
        state = init_session(profile, config, session_id="t1")
        state = apply_event(state, LearnerUtterance("hello"))
        assert check_saturation(state, deps) is False


class TestDeterminism:
    def test_identical_scripts_produce_identical_transcripts(self, profile, config) -> None:
        def run() -> tuple:
            deps = _deps(["a", "NO", "b", "NO", "c", "NO"])
            state = init_session(profile, config, session_id="same")
            for text in ["one", "two", "three"]:
                state, _ = run_turn(state, text, deps)
            return state.short_term

        assert run() == run()
