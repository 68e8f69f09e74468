"""FastAPI application wrapping the session engine.

Sessions live in-process behind a per-session lock; the WebSocket endpoint
replays the envelope log from any sequence number and then tails it live, so
a client reconnecting with ``from_seq`` never sees a gap. Operator commands
arrive as JSON frames on the same socket and are serialized into the owning
session.
"""

from __future__ import annotations

import asyncio
import logging
import threading
from typing import Callable, Optional

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.concurrency import run_in_threadpool
from pydantic import ValidationError

from ..core import SessionConfig, phase_from_label
from ..engine import SessionEventEnvelope, TutorSession
from ..gateway import CompletionBackend
from ..workflow import Clock
from .models import (
    CommandFrame,
    EnvelopeModel,
    EnvelopesResponse,
    LearnerTextRequest,
    SessionCreateRequest,
    SessionCreateResponse,
    SessionView,
)

logger = logging.getLogger(__name__)

WS_POLL_INTERVAL_S = 0.2


class SessionHub:
    """Serializes access to one TutorSession and wakes envelope tails."""

    def __init__(self, session: TutorSession) -> None:
        self.session = session
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)

    def run(self, fn: Callable[[TutorSession], list[SessionEventEnvelope]]) -> list[SessionEventEnvelope]:
        with self._cond:
            produced = fn(self.session)
            self._cond.notify_all()
            return produced

    def envelopes_after(self, seq: int) -> list[SessionEventEnvelope]:
        with self._lock:
            return list(self.session.envelopes[seq:])

    def current_seq(self) -> int:
        with self._lock:
            return len(self.session.envelopes)

    def wait_envelopes(self, after_seq: int, timeout_s: float) -> list[SessionEventEnvelope]:
        with self._cond:
            if len(self.session.envelopes) <= after_seq:
                self._cond.wait(timeout_s)
            return list(self.session.envelopes[after_seq:])


class SessionManager:
    """Creates and tracks live sessions; one backend factory serves them all."""

    def __init__(
        self,
        backend_factory: Callable[[], CompletionBackend],
        base_config: SessionConfig,
        *,
        clock_factory: Optional[Callable[[], Clock]] = None,
        store_factory: Optional[Callable[[], object]] = None,
    ) -> None:
        self._backend_factory = backend_factory
        self._base_config = base_config
        self._clock_factory = clock_factory
        self._store_factory = store_factory
        self._hubs: dict[str, SessionHub] = {}
        self._lock = threading.Lock()

    def create(self, request: SessionCreateRequest) -> SessionHub:
        from dataclasses import replace

        config = self._base_config
        if request.prompt_mode:
            config = replace(config, prompt_mode=request.prompt_mode)
        if request.max_turns_per_phase:
            config = replace(config, max_turns_per_phase=request.max_turns_per_phase)
        session = TutorSession(
            request.profile.to_domain(),
            config,
            self._backend_factory(),
            session_id=request.session_id,
            clock=self._clock_factory() if self._clock_factory else None,
            store=self._store_factory() if self._store_factory else None,
        )
        hub = SessionHub(session)
        with self._lock:
            self._hubs[session.session_id] = hub
        return hub

    def get(self, session_id: str) -> Optional[SessionHub]:
        with self._lock:
            return self._hubs.get(session_id)

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._hubs)


def _as_models(envelopes: list[SessionEventEnvelope]) -> list[EnvelopeModel]:
    return [EnvelopeModel(**e.to_json()) for e in envelopes]


def create_app(manager: SessionManager) -> FastAPI:
    app = FastAPI(title="ellma session gateway", version="0.1.0")
    app.state.manager = manager

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "sessions": len(manager.ids())}

    @app.get("/sessions")
    def list_sessions() -> dict:
        return {"sessions": manager.ids()}

    @app.post("/sessions", response_model=SessionCreateResponse)
    def create_session(request: SessionCreateRequest) -> SessionCreateResponse:
        hub = manager.create(request)
        produced = hub.run(lambda s: s.start())
        return SessionCreateResponse(
            session_id=hub.session.session_id,
            snapshot=hub.session.snapshot(),
            envelopes=_as_models(produced),
        )

    def _hub_or_404(session_id: str) -> SessionHub:
        hub = manager.get(session_id)
        if hub is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return hub

    @app.get("/sessions/{session_id}", response_model=SessionView)
    def get_session(session_id: str) -> SessionView:
        hub = _hub_or_404(session_id)
        return SessionView(session_id=session_id, snapshot=hub.session.snapshot())

    @app.post("/sessions/{session_id}/learner", response_model=EnvelopesResponse)
    def learner_text(session_id: str, request: LearnerTextRequest) -> EnvelopesResponse:
        hub = _hub_or_404(session_id)
        produced = hub.run(lambda s: s.handle_learner_text(request.text))
        return EnvelopesResponse(envelopes=_as_models(produced))

    @app.post("/sessions/{session_id}/end", response_model=EnvelopesResponse)
    def end_session(session_id: str) -> EnvelopesResponse:
        hub = _hub_or_404(session_id)
        produced = hub.run(lambda s: s.end())
        return EnvelopesResponse(envelopes=_as_models(produced))

    @app.get("/sessions/{session_id}/envelopes", response_model=EnvelopesResponse)
    def envelopes(session_id: str, from_seq: int = 0) -> EnvelopesResponse:
        hub = _hub_or_404(session_id)
        return EnvelopesResponse(envelopes=_as_models(hub.envelopes_after(from_seq)))

    def _apply_command(session: TutorSession, frame: CommandFrame) -> list[SessionEventEnvelope]:
        if frame.kind == "say_as_learner":
            if not frame.text:
                raise ValueError("say_as_learner needs text")
            return session.handle_learner_text(frame.text)
        if frame.kind == "end_session":
            return session.end()
        if frame.kind == "force_transition":
            if not frame.phase:
                raise ValueError("force_transition needs a phase")
            return session.force_phase(phase_from_label(frame.phase))
        if frame.kind == "inject_scenario":
            if frame.scenario is None:
                raise ValueError("inject_scenario needs a scenario")
            return session.choose_scenario(frame.scenario.to_domain())
        raise ValueError(f"unknown command kind {frame.kind!r}")

    @app.websocket("/ws/sessions/{session_id}")
    async def session_events(websocket: WebSocket, session_id: str, from_seq: int = 0) -> None:
        hub = manager.get(session_id)
        if hub is None:
            await websocket.close(code=4404)
            return
        await websocket.accept()
        send_lock = asyncio.Lock()
        # a client claiming a future seq gets the live tail from now on
        cursor = min(from_seq, hub.current_seq())

        async def send_envelope(envelope: SessionEventEnvelope) -> None:
            async with send_lock:
                await websocket.send_json(envelope.to_json())

        async def tail() -> None:
            nonlocal cursor
            while True:
                fresh = await run_in_threadpool(hub.wait_envelopes, cursor, WS_POLL_INTERVAL_S)
                for envelope in fresh:
                    await send_envelope(envelope)
                    cursor = envelope.seq

        tail_task = asyncio.create_task(tail())
        try:
            while True:
                raw = await websocket.receive_json()
                try:
                    frame = CommandFrame.model_validate(raw)
                    await run_in_threadpool(hub.run, lambda s: _apply_command(s, frame))
                except (ValidationError, ValueError, KeyError) as exc:
                    # malformed or unusable frame: error goes to this client
                    # only and is not part of the session envelope log
                    async with send_lock:
                        await websocket.send_json(
                            {
                                "session_id": session_id,
                                "seq": 0,
                                "kind": "error",
                                "payload": {"code": "bad_command", "message": str(exc)},
                                "ts": "",
                            }
                        )
        except WebSocketDisconnect:
            pass
        finally:
            tail_task.cancel()

    return app
