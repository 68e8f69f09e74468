from __future__ import annotations

import pytest

from ellma.core import (
    CefrLevel,
    LearnerProfile,
    Scenario,
    SessionConfig,
    TaskPhase,
    TurnRole,
)
from ellma.embodiment import CollectingTransport, EmbodimentBridge, decode_osc
from ellma.engine import ENVELOPE_KINDS, FakeClock, TutorSession, render_menu_text
from ellma.gateway import ScriptedBackend, ScriptEntry
from ellma.memory import InMemoryStore
from conftest import FEEDBACK_REPLY, golden_learner_lines, golden_script


def scripted(entries: list[dict], default: str | None = None) -> ScriptedBackend:
    return ScriptedBackend(
        [ScriptEntry(reply=e["reply"], match=e.get("match")) for e in entries],
        default_reply=default,
    )


def run_golden_session(profile, config=None, store=None, bridge=None) -> TutorSession:
    session = TutorSession(
        profile,
        config or SessionConfig(),
        scripted(golden_script()),
        session_id="golden-1",
        clock=FakeClock(),
        store=store,
        bridge=bridge,
    )
    session.start()
    for line in golden_learner_lines():
        session.handle_learner_text(line)
    return session


def visited_phases(session: TutorSession) -> list[str]:
    order: list[str] = []
    for turn in session.transcript():
        if not order or order[-1] != turn.phase.value:
            order.append(turn.phase.value)
    return order


class TestFullFlow:
    def test_phases_visited_in_figure_order(self, profile) -> None:
        session = run_golden_session(profile)
        assert visited_phases(session) == [
            "Introduction",
            "Assessment",
            "ScenarioSelection",
            "RolePlay",
            "Feedback",
            "ScenarioSelection",
            "Ended",
        ]

    def test_at_least_one_turn_per_phase(self, profile) -> None:
        session = run_golden_session(profile)
        counts: dict[str, int] = {}
        for turn in session.transcript():
            counts[turn.phase.value] = counts.get(turn.phase.value, 0) + 1
        for phase in ("Introduction", "Assessment", "ScenarioSelection", "RolePlay", "Feedback", "Ended"):
            assert counts.get(phase, 0) >= 1, phase

    def test_script_fully_consumed(self, profile) -> None:
        backend = scripted(golden_script())
        session = TutorSession(
            profile, SessionConfig(), backend, session_id="golden-1", clock=FakeClock()
        )
        session.start()
        for line in golden_learner_lines():
            session.handle_learner_text(line)
        # the summarize entry stays: no store was configured
        assert backend.remaining == 1

    def test_envelope_seq_gap_free(self, profile) -> None:
        session = run_golden_session(profile)
        assert [e.seq for e in session.envelopes] == list(range(1, len(session.envelopes) + 1))
        assert all(e.kind in ENVELOPE_KINDS for e in session.envelopes)

    def test_profile_level_written_after_sufficient_assessment(self, profile) -> None:
        session = run_golden_session(profile)
        assert session.state.profile.assessed_level is CefrLevel.B1
        kinds = [e.kind for e in session.envelopes]
        assert "assessment_set" in kinds
        assert "scenario_set" in kinds
        assert "feedback_ready" in kinds
        assert kinds[-1] == "ended"

    def test_turn_seq_gap_free_from_one(self, profile) -> None:
        session = run_golden_session(profile)
        assert [t.seq for t in session.transcript()] == list(
            range(1, len(session.transcript()) + 1)
        )

    def test_determinism_byte_identical_runs(self, profile) -> None:
        a = run_golden_session(profile)
        b = run_golden_session(profile)
        assert a.transcript() == b.transcript()
        assert [e.to_json() for e in a.envelopes] == [e.to_json() for e in b.envelopes]

    def test_dual_sink_consistency(self, profile) -> None:
        # every turn in the transcript appears as a turn_added envelope, in order
        session = run_golden_session(profile)
        envelope_turns = [
            (e.payload["seq"], e.payload["role"], e.payload["text"])
            for e in session.envelopes
            if e.kind == "turn_added"
        ]
        transcript_turns = [(t.seq, t.role.value, t.text) for t in session.transcript()]
        assert envelope_turns == transcript_turns


class TestSilentLearner:
    def test_no_level_before_cap_and_provisional_at_cap(self, profile) -> None:
        config = SessionConfig(max_turns_per_phase=3)
        # intro saturates immediately; learner then refuses to speak substance
        entries = [
            {"reply": "Hi!"},
            {"reply": "Hello again."},
            {"reply": "YES", "match": "Answer with exactly YES or NO"},
            {"reply": "Please describe a memorable experience."},
        ] + [{"reply": "Could you tell me more?"} for _ in range(6)]
        session = TutorSession(
            profile,
            config,
            scripted(entries, default="Could you say more?"),
            session_id="silent-1",
            clock=FakeClock(),
        )
        session.start()
        session.handle_learner_text("hello")  # intro turn; decision YES -> assessment
        refusals = ["no", "I don't want to", "hm"]
        for text in refusals:
            session.handle_learner_text(text)
            assert session.state.profile.assessed_level is None
        # cap reached: the next input forces closure with a provisional A1
        session.handle_learner_text("still no")
        assessment_events = [e for e in session.envelopes if e.kind == "assessment_set"]
        assert len(assessment_events) == 1
        assert assessment_events[0].payload["level"] == "A1"
        assert assessment_events[0].payload["sufficient"] is False
        assert session.state.profile.assessed_level is None  # never written
        assert session.state.phase is TaskPhase.SCENARIO_SELECTION


class TestCommands:
    def _session_in_role_play(self, profile) -> TutorSession:
        session = run_golden_session_partial(profile)
        assert session.state.phase is TaskPhase.ROLE_PLAY
        return session

    def test_switch_during_role_play(self, profile) -> None:
        session = self._session_in_role_play(profile)
        session.handle_learner_text("/switch")
        assert session.state.phase is TaskPhase.SCENARIO_SELECTION
        assert session.state.active_scenario is None
        menu_turns = [
            e for e in session.envelopes if e.kind == "turn_added" and "menu" in e.payload
        ]
        assert menu_turns

    def test_scenario_command_switches_to_custom(self, profile) -> None:
        session = self._session_in_role_play(profile)
        session.handle_learner_text("/scenario renting an apartment as an international student")
        assert session.state.phase is TaskPhase.ROLE_PLAY
        assert session.state.active_scenario is not None
        assert "renting an apartment" in session.state.active_scenario.scene_description

    def test_end_everywhere_and_idempotent(self, profile) -> None:
        session = self._session_in_role_play(profile)
        session.handle_learner_text("/end")
        assert session.ended
        before = len(session.envelopes)
        session.end()
        assert len(session.envelopes) == before  # second end is a no-op

    def test_text_after_end_is_protocol_error_envelope(self, profile) -> None:
        session = self._session_in_role_play(profile)
        session.handle_learner_text("/end")
        produced = session.handle_learner_text("hello?")
        assert [e.kind for e in produced] == ["error"]
        assert produced[0].payload["from"] == "Ended"

    def test_switch_rejected_in_introduction(self, profile, config) -> None:
        session = TutorSession(
            profile, config, scripted([{"reply": "hi"}]), session_id="x", clock=FakeClock()
        )
        session.start()
        produced = session.handle_learner_text("/switch")
        assert produced[0].kind == "error"
        assert produced[0].payload["code"] == "rejected"
        assert produced[0].payload["from"] == "Introduction"
        assert produced[0].payload["to"] == "ScenarioSelection"


def run_golden_session_partial(profile) -> TutorSession:
    """Golden session stopped right after entering RolePlay."""
    entries = golden_script()[:11] + [
        {"reply": "extra reply 1"},
        {"reply": "NO", "match": "Answer with exactly YES or NO"},
        {"reply": FEEDBACK_REPLY},
        {"reply": "Title: Ordering at a cafe\nYou are: barista\nI am: customer\nScene: Cafe.", "match": "Write each scenario"},
    ]
    session = TutorSession(
        profile,
        SessionConfig(),
        scripted(entries, default="OK"),
        session_id="partial-1",
        clock=FakeClock(),
    )
    session.start()
    for line in golden_learner_lines()[:4]:
        session.handle_learner_text(line)
    return session


class TestOperator:
    def test_force_transition_to_ended_always_legal(self, profile) -> None:
        session = run_golden_session_partial(profile)
        produced = session.force_phase(TaskPhase.ENDED)
        assert session.ended
        assert any(e.kind == "ended" for e in produced)

    def test_force_illegal_edge_rejected_with_from_to(self, profile) -> None:
        session = run_golden_session_partial(profile)  # RolePlay
        produced = session.force_phase(TaskPhase.ASSESSMENT)
        assert [e.kind for e in produced] == ["error"]
        assert produced[0].payload["from"] == "RolePlay"
        assert produced[0].payload["to"] == "Assessment"
        assert session.state.phase is TaskPhase.ROLE_PLAY

    def test_force_feedback_runs_feedback_pipeline(self, profile) -> None:
        entries = golden_script()[:11] + [
            {"reply": FEEDBACK_REPLY},
            {"reply": "Title: At the gallery\nYou are: guide\nI am: visitor\nScene: An art gallery.", "match": "Write each scenario"},
        ]
        session = TutorSession(
            profile,
            SessionConfig(),
            scripted(entries),
            session_id="force-1",
            clock=FakeClock(),
        )
        session.start()
        for line in golden_learner_lines()[:4]:
            session.handle_learner_text(line)
        assert session.state.phase is TaskPhase.ROLE_PLAY
        session.force_phase(TaskPhase.FEEDBACK)
        kinds = [e.kind for e in session.envelopes]
        assert "feedback_ready" in kinds
        assert session.state.phase is TaskPhase.SCENARIO_SELECTION

    def test_inject_scenario_outside_selection_rejected(self, profile) -> None:
        session = run_golden_session_partial(profile)  # RolePlay
        scenario = Scenario(
            scenario_id="op-1",
            title="Office hours",
            scene_description="A quiet office",
            agent_role="professor",
            learner_role="student",
            environment_tag="office",
            difficulty=CefrLevel.B1,
        )
        produced = session.choose_scenario(scenario)
        assert produced[0].kind == "error"


class TestFailureHandling:
    def test_backend_failure_keeps_learner_turn_and_session(self, profile, config) -> None:
        backend = ScriptedBackend([ScriptEntry(reply="hello!")])  # start() consumes it
        session = TutorSession(profile, config, backend, session_id="f1", clock=FakeClock())
        session.start()
        produced = session.handle_learner_text("are you there?")
        kinds = [e.kind for e in produced]
        assert kinds == ["turn_added", "error"]
        assert produced[1].payload["code"] == "backend_unavailable"
        last_turn = session.transcript()[-1]
        assert last_turn.role is TurnRole.LEARNER
        assert not session.ended

    def test_start_failure_emits_error(self, profile, config) -> None:
        session = TutorSession(profile, config, ScriptedBackend([]), session_id="f2")
        produced = session.start()
        assert [e.kind for e in produced] == ["error"]


class TestScaffoldWiring:
    def test_scaffold_recorded_in_envelope_payload(self, profile) -> None:
        session = run_golden_session_partial(profile)
        session.handle_learner_text("ok yes")
        session.handle_learner_text("me too")
        scaffolded = [
            e
            for e in session.envelopes
            if e.kind == "turn_added" and e.payload.get("scaffold")
        ]
        assert scaffolded
        assert scaffolded[-1].payload["scaffold"]["kind"] == "suggest_phrase"


class TestBridgeWiring:
    def test_agent_turns_reach_chatbox_and_emotions_mirror(self, profile) -> None:
        transport = CollectingTransport()
        bridge = EmbodimentBridge(transport, schedule=lambda d, f: None)
        run_golden_session(profile, bridge=bridge)
        addresses = [decode_osc(f).address for f in transport.frames]
        assert "/chatbox/input" in addresses
        assert any(a.startswith("/avatar/parameters/") for a in addresses)


class TestMemoryWiring:
    def test_summary_stored_at_end_and_recalled_next_session(self, profile) -> None:
        store = InMemoryStore()
        run_golden_session(profile, store=store)
        stored = store.list_by_learner("ana")
        assert len(stored) == 1
        assert stored[0].assessed_level is CefrLevel.B1
        assert stored[0].summary_text.startswith("Ana practiced supermarket")

        # next session: the recall text must flow into the opening request
        captured: list = []

        class SpyBackend:
            def complete(self, messages, *, temperature=0.7):
                captured.append(messages)
                from ellma.gateway import CompletionResult

                return CompletionResult(text="hello again!", latency_ms=0)

        second = TutorSession(
            profile, SessionConfig(), SpyBackend(), session_id="g2", store=store
        )
        second.start()
        joined = "\n".join(m.content for m in captured[0])
        assert "Ana practiced supermarket" in joined

    def test_stored_level_carries_into_next_session(self, profile) -> None:
        store = InMemoryStore()
        run_golden_session(profile, store=store)
        second = TutorSession(
            profile,
            SessionConfig(),
            ScriptedBackend([ScriptEntry(reply="welcome back!")]),
            session_id="g3",
            store=store,
        )
        assert second.state.profile.assessed_level is CefrLevel.B1


class TestSingleMode:
    def _session(self, profile, entries=None) -> TutorSession:
        config = SessionConfig(prompt_mode="single")
        backend = scripted(entries or [], default="OK")
        return TutorSession(profile, config, backend, session_id="s1", clock=FakeClock())

    def test_stays_in_introduction(self, profile) -> None:
        session = self._session(profile)
        session.start()
        for text in ["hello", "more text", "and more", "keep going"]:
            session.handle_learner_text(text)
        assert session.state.phase is TaskPhase.INTRODUCTION

    def test_single_prompt_composes_whole_session(self, profile) -> None:
        captured: list = []

        class SpyBackend:
            def complete(self, messages, *, temperature=0.7):
                captured.append(messages)
                from ellma.gateway import CompletionResult

                return CompletionResult(text="OK", latency_ms=0)

        config = SessionConfig(prompt_mode="single")
        session = TutorSession(profile, config, SpyBackend(), session_id="s1")
        session.start()
        session.handle_learner_text("hello")
        assert captured[1][0].content.startswith("You are a friendly, and very patient")
        assert all(
            "**Initial Assessment**" in messages[0].content for messages in captured
        )

    def test_end_command_works(self, profile) -> None:
        session = self._session(profile)
        session.start()
        session.handle_learner_text("/end")
        assert session.ended

    def test_switch_rejected_in_single_mode(self, profile) -> None:
        session = self._session(profile)
        session.start()
        produced = session.handle_learner_text("/switch")
        assert produced[0].kind == "error"

    def test_no_cap_transitions_in_single_mode(self, profile) -> None:
        config = SessionConfig(prompt_mode="single", max_turns_per_phase=2)
        session = TutorSession(
            profile, config, scripted([], default="OK"), session_id="s2", clock=FakeClock()
        )
        session.start()
        for i in range(6):
            session.handle_learner_text(f"line {i}")
        assert session.state.phase is TaskPhase.INTRODUCTION


class TestMenuText:
    def test_menu_text_lists_three_numbered_options(self, profile) -> None:
        session = run_golden_session(profile)
        menu_payloads = [
            e.payload
            for e in session.envelopes
            if e.kind == "turn_added" and e.payload.get("menu")
        ]
        assert menu_payloads
        first = menu_payloads[0]
        assert len(first["menu"]) == 3
        for i in (1, 2, 3):
            assert f"{i}. " in first["text"]

    def test_render_menu_text_deterministic(self, profile) -> None:
        session = run_golden_session(profile)
        assert render_menu_text(session.menu) == render_menu_text(session.menu)
