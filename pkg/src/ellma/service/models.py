"""Pydantic request/response models for the session gateway."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, Field

from ..core import CefrLevel, LearnerProfile, Scenario


class ProfileModel(BaseModel):
    learner_id: str = Field(min_length=1)
    name: Optional[str] = None
    native_language: Optional[str] = None
    cultural_background: Optional[str] = None
    motivation: Optional[str] = None

    def to_domain(self) -> LearnerProfile:
        return LearnerProfile(
            learner_id=self.learner_id,
            name=self.name,
            native_language=self.native_language,
            cultural_background=self.cultural_background,
            motivation=self.motivation,
        )


class ScenarioModel(BaseModel):
    scenario_id: str = Field(min_length=1)
    title: str
    scene_description: str = Field(min_length=1)
    agent_role: str
    learner_role: str
    environment_tag: str = "custom"
    difficulty: str = "B1"

    def to_domain(self) -> Scenario:
        return Scenario(
            scenario_id=self.scenario_id,
            title=self.title,
            scene_description=self.scene_description,
            agent_role=self.agent_role,
            learner_role=self.learner_role,
            environment_tag=self.environment_tag,
            difficulty=CefrLevel[self.difficulty],
        )


class SessionCreateRequest(BaseModel):
    profile: ProfileModel
    prompt_mode: Optional[Literal["single", "multi"]] = None
    max_turns_per_phase: Optional[int] = Field(default=None, ge=1)
    session_id: Optional[str] = None


class EnvelopeModel(BaseModel):
    session_id: str
    seq: int
    kind: str
    payload: dict[str, Any]
    ts: str


class SessionCreateResponse(BaseModel):
    session_id: str
    snapshot: dict[str, Any]
    envelopes: list[EnvelopeModel]


class SessionView(BaseModel):
    session_id: str
    snapshot: dict[str, Any]


class LearnerTextRequest(BaseModel):
    text: str = Field(min_length=1)


class EnvelopesResponse(BaseModel):
    envelopes: list[EnvelopeModel]


class CommandFrame(BaseModel):
    """Operator/learner command arriving over the WebSocket."""

    kind: Literal["say_as_learner", "force_transition", "end_session", "inject_scenario"]
    text: Optional[str] = None
    phase: Optional[str] = None
    scenario: Optional[ScenarioModel] = None
