from __future__ import annotations

import pytest

from ellma.core import EmotionLabel, LearnerProfile, SessionConfig, TaskPhase, TurnRecord, TurnRole


def make_turn(
    seq: int,
    role: str = "learner",
    text: str = "hello there",
    phase: TaskPhase = TaskPhase.INTRODUCTION,
    started_at: int = 0,
    ended_at: int = 0,
    latency: int | None = None,
    emotion: EmotionLabel | None = None,
) -> TurnRecord:
    return TurnRecord(
        seq=seq,
        role=TurnRole(role),
        text=text,
        phase=phase,
        started_at=started_at,
        ended_at=max(started_at, ended_at),
        response_latency_ms=latency,
        emotion=emotion,
    )


@pytest.fixture
def profile() -> LearnerProfile:
    return LearnerProfile(
        learner_id="ana",
        name="Ana",
        native_language="es",
        cultural_background="Chile",
        motivation="practice English for my work",
    )


@pytest.fixture
def config() -> SessionConfig:
    return SessionConfig()


MENU_REPLY_ONE = (
    "Title: Shopping at a supermarket\nYou are: cashier\nI am: shopper\n"
    "Scene: A busy supermarket near closing time.\n\n"
    "Title: A job interview\nYou are: interviewer\nI am: candidate\n"
    "Scene: A small office with two chairs.\n\n"
    "Title: Traveling by train\nYou are: conductor\nI am: traveler\n"
    "Scene: A platform in a foreign city."
)

MENU_REPLY_TWO = (
    "Title: Ordering at a cafe\nYou are: barista\nI am: customer\n"
    "Scene: A cozy cafe in the morning.\n\n"
    "Title: At the gallery\nYou are: guide\nI am: visitor\n"
    "Scene: A modern art gallery.\n\n"
    "Title: Asking directions\nYou are: local\nI am: tourist\n"
    "Scene: A rainy street corner."
)

FEEDBACK_REPLY = (
    "**GENERAL FEEDBACK**: Strength: You used polite shopping phrases naturally. "
    "Improvement: Watch the past tense of irregular verbs.\n"
    "**ADVICE MOVING FORWARD**: Try ordering at a real store this week and ask one question.\n"
    "**LANGUAGE SUMMARY**:\n"
    "- vocabulary: aisle\n"
    "- grammar: past tense of buy\n"
    "- sentence: Could you tell me where the eggs are?"
)


def golden_script() -> list[dict]:
    """Scripted replies for the canonical full-flow session, in consumption order."""
    return [
        {"reply": "Hola Ana! Welcome. What should I call you?", "match": "Greet me"},
        {"reply": "Nice to meet you, Ana! Why are you learning English?"},
        {"reply": "NO", "match": "Answer with exactly YES or NO"},
        {"reply": "Wonderful, thanks for sharing!"},
        {"reply": "YES", "match": "Answer with exactly YES or NO"},
        {
            "reply": (
                "So, Ana from Chile learning English for work. Now, please describe "
                "a memorable experience."
            ),
            "match": "Wrap up our previous conversations",
        },
        {"reply": "That sounds like a wonderful trip!"},
        {"reply": "YES", "match": "Answer with exactly YES or NO"},
        {
            "reply": "Based on our conversation, your level is B1: you describe experiences well.",
            "match": "Wrap up our previous conversations",
        },
        {"reply": MENU_REPLY_ONE, "match": "Write each scenario as four lines"},
        {"reply": "Welcome! I'm at the register. Did you find everything you need today?"},
        {"reply": "The eggs are in aisle five, next to the bread."},
        {"reply": "NO", "match": "Answer with exactly YES or NO"},
        {"reply": "Great choice! That will be six dollars, please."},
        {"reply": "YES", "match": "Answer with exactly YES or NO"},
        {"reply": FEEDBACK_REPLY},
        {"reply": MENU_REPLY_TWO, "match": "Write each scenario as four lines"},
        {
            "reply": "Ana practiced supermarket small talk; assessed B1.\n- practiced: supermarket role-play",
            "match": "Learner id",
        },
    ]


def golden_learner_lines() -> list[str]:
    long_speech = (
        "Last summer I traveled to Patagonia with my sister and it was amazing. "
        + "We hiked for many days and saw glaciers and lakes and learned new words. "
        * 7
    ).strip()
    return [
        "Hola! My name is Ana.",
        "I am from Chile and I want to practice English for my work.",
        long_speech,
        "1",
        "Hello, where can I find the eggs?",
        "Thank you, I am happy I found apples and eggs.",
        "/end",
    ]
