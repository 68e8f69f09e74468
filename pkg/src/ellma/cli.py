"""Command-line surface: text and voice session runners, replay, and serve.

The CLI stays thin: it parses flags, assembles the engine from configuration,
and delegates. Scripted runs (``--scripted``) swap in the deterministic
backend and a fixed fake clock so transcripts are byte-identical between
runs; live runs need [backend] configuration and the API key environment
variable.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from typing import IO, Optional

from .config import AppConfig, load_config
from .core import ConfigurationError, EllmaError, LearnerProfile, TaskPhase
from .embodiment import EmbodimentBridge, UdpTransport, parse_osc_target
from .engine import FakeClock, SessionEventEnvelope, TutorSession
from .gateway import HttpBackend, load_script
from .memory import JsonlMemoryStore
from .speech import (
    EndpointConfig,
    HttpStt,
    HttpTts,
    StubStt,
    StubTts,
    SynthesisError,
    TranscriptionError,
    detect_endpoint,
    frames_from_segment,
    read_wav,
    stream_frames_threaded,
    synthesize,
    transcribe,
    write_wav,
)
from .transcript import format_replay, read_csv, write_csv

logger = logging.getLogger(__name__)

SCRIPTED_SESSION_ID = "scripted-0001"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ellma", description="situated language-tutoring session engine"
    )
    parser.add_argument("--config", help="TOML config path (or $ELLMA_CONFIG)")
    parser.add_argument("--prompt-mode", choices=["single", "multi"], dest="prompt_mode")
    parser.add_argument("--scripted", help="JSON reply script; enables the offline backend")
    parser.add_argument("--endpoint-url", dest="endpoint_url", help="chat-completions URL")
    parser.add_argument("--model", dest="model_id", help="model id for the live backend")
    parser.add_argument("--osc", default="off", help="off or host:port for avatar OSC output")
    parser.add_argument("--log-dir", dest="log_dir", help="directory for CSV transcripts")
    parser.add_argument("--max-turns", type=int, dest="max_turns_per_phase")
    parser.add_argument("--session-id", dest="session_id")
    parser.add_argument("--learner", default="learner-1", help="learner id for the profile")
    parser.add_argument("--name", dest="learner_name")
    parser.add_argument("--native-language", dest="native_language")
    parser.add_argument("--motivation", dest="motivation")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("text", help="interactive text session (reads stdin)")

    voice = sub.add_parser("voice", help="voice session over WAV fixtures or adapters")
    voice.add_argument("--wav-input", required=False, help="WAV file or directory of WAV files")
    voice.add_argument("--stt-map", help="JSON file mapping wav names to transcripts")
    voice.add_argument("--audio-out", help="directory for synthesized agent audio")

    replay = sub.add_parser("replay", help="pretty-print a stored CSV transcript")
    replay.add_argument("csv_path")

    serve = sub.add_parser("serve", help="run the HTTP/WebSocket session gateway")
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)

    return parser


def _profile_from_args(args: argparse.Namespace) -> LearnerProfile:
    return LearnerProfile(
        learner_id=args.learner,
        name=args.learner_name,
        native_language=args.native_language,
        motivation=args.motivation,
    )


def _overrides_from_args(args: argparse.Namespace) -> dict:
    keys = (
        "prompt_mode",
        "log_dir",
        "max_turns_per_phase",
        "endpoint_url",
        "model_id",
        "host",
        "port",
    )
    overrides = {k: getattr(args, k, None) for k in keys}
    if args.osc is not None:
        overrides["osc_target"] = None if args.osc == "off" else args.osc
    return overrides


def _make_backend(args: argparse.Namespace, config: AppConfig):
    if args.scripted:
        return load_script(args.scripted)
    if config.backend is None:
        raise ConfigurationError(
            "no backend configured: pass --scripted <script.json> or set "
            "[backend] endpoint_url in the config file"
        )
    return HttpBackend(config.backend)


def _make_bridge(args: argparse.Namespace, config: AppConfig) -> Optional[EmbodimentBridge]:
    if args.osc == "off":
        return None
    target = args.osc or config.session.osc_target
    if target is None:
        return None
    return EmbodimentBridge(UdpTransport(parse_osc_target(target)))


def _build_session(args: argparse.Namespace, config: AppConfig) -> TutorSession:
    backend = _make_backend(args, config)
    clock = FakeClock() if args.scripted else None
    session_id = args.session_id or (SCRIPTED_SESSION_ID if args.scripted else None)
    os.makedirs(config.log_dir, exist_ok=True)
    store = JsonlMemoryStore(config.resolved_memory_path())
    return TutorSession(
        _profile_from_args(args),
        config.session,
        backend,
        session_id=session_id,
        clock=clock,
        store=store,
        bridge=_make_bridge(args, config),
    )


def _print_envelopes(envelopes: list[SessionEventEnvelope], out: IO[str]) -> None:
    for envelope in envelopes:
        if envelope.kind == "phase_changed":
            out.write(f"=== {envelope.payload['to']} ===\n")
        elif envelope.kind == "turn_added" and envelope.payload["role"] == "agent":
            out.write(f"tutor> {envelope.payload['text']}\n")
        elif envelope.kind == "assessment_set":
            flag = "" if envelope.payload["sufficient"] else " (provisional)"
            out.write(f"[assessment: {envelope.payload['level']}{flag}]\n")
        elif envelope.kind == "error":
            out.write(f"[error: {envelope.payload.get('message')}]\n")
        elif envelope.kind == "ended":
            out.write("[session ended]\n")
    out.flush()


def _finalize_csv(session: TutorSession, config: AppConfig, out: IO[str]) -> str:
    path = os.path.join(config.log_dir, f"{session.session_id}.csv")
    write_csv(session.transcript(), path, session.session_id)
    out.write(f"[transcript: {path}]\n")
    return path


def run_text_session(
    args: argparse.Namespace,
    config: AppConfig,
    stdin: IO[str],
    stdout: IO[str],
) -> int:
    """Interactive loop: read a learner line, run the turn, print the reply."""
    session = _build_session(args, config)
    stdout.write(f"=== {TaskPhase.INTRODUCTION.value} ===\n")
    _print_envelopes(session.start(), stdout)
    try:
        for line in stdin:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            _print_envelopes(session.handle_learner_text(line), stdout)
            if session.ended:
                break
        if not session.ended:
            _print_envelopes(session.end(), stdout)
    finally:
        _finalize_csv(session, config, stdout)
    return 0


def _load_voice_fixtures(wav_input: str) -> list[str]:
    if os.path.isdir(wav_input):
        paths = sorted(glob.glob(os.path.join(wav_input, "*.wav")))
        if not paths:
            raise ConfigurationError(f"no .wav files in {wav_input}")
        return paths
    if os.path.exists(wav_input):
        return [wav_input]
    raise ConfigurationError(
        f"audio source {wav_input!r} not found: pass a WAV file or a directory "
        "of WAV fixtures with --wav-input"
    )


def run_voice_session(
    args: argparse.Namespace,
    config: AppConfig,
    stdout: IO[str],
) -> int:
    """Endpoint WAV fixture audio, transcribe, converse, and synthesize replies."""
    if not args.wav_input:
        raise ConfigurationError(
            "voice mode needs an audio source: --wav-input <file-or-dir> "
            "(no live device capture in this environment)"
        )
    wav_paths = _load_voice_fixtures(args.wav_input)

    if args.stt_map:
        with open(args.stt_map, encoding="utf-8") as fh:
            mapping = json.load(fh)
        stt = StubStt(mapping)
    elif config.stt_url:
        stt = HttpStt(config.stt_url)
    else:
        raise ConfigurationError("voice mode needs --stt-map or [speech] stt_url")
    tts = HttpTts(config.tts_url) if config.tts_url else StubTts()

    audio_out = args.audio_out or os.path.join(config.log_dir, "audio")
    os.makedirs(audio_out, exist_ok=True)

    session = _build_session(args, config)
    endpoint_config = EndpointConfig(silence_threshold_s=config.session.silence_threshold_s)
    stdout.write(f"=== {TaskPhase.INTRODUCTION.value} ===\n")
    stdout.write(f"[voice: {config.session.voice_id}]\n")
    logger.info("voice session with voice_id=%s", config.session.voice_id)
    _print_envelopes(session.start(), stdout)

    reply_index = 0
    try:
        for wav_path in wav_paths:
            segment = read_wav(wav_path)
            frames = stream_frames_threaded(frames_from_segment(segment))
            for event in detect_endpoint(frames, endpoint_config):
                cut = _segment_slice(segment, event.speech_start_ms, event.speech_end_ms)
                try:
                    text = transcribe(cut, stt)
                except TranscriptionError as exc:
                    logger.warning("transcription failed: %s", exc)
                    _print_envelopes(session.request_clarification(), stdout)
                    continue
                stdout.write(f"learner> {text}\n")
                envelopes = session.handle_learner_text(text)
                _print_envelopes(envelopes, stdout)
                reply_index = _speak_agent_turns(
                    envelopes, session, tts, config, audio_out, reply_index, stdout
                )
                if session.ended:
                    break
            if session.ended:
                break
        if not session.ended:
            _print_envelopes(session.end(), stdout)
    finally:
        _finalize_csv(session, config, stdout)
    return 0


def _segment_slice(segment, start_ms: int, end_ms: int):
    from .speech import AudioSegment, PCM_SAMPLE_WIDTH

    start = start_ms * segment.sample_rate // 1000 * PCM_SAMPLE_WIDTH
    end = end_ms * segment.sample_rate // 1000 * PCM_SAMPLE_WIDTH
    return AudioSegment(
        samples=segment.samples[start:end],
        sample_rate=segment.sample_rate,
        source=segment.source,
    )


def _speak_agent_turns(
    envelopes: list[SessionEventEnvelope],
    session: TutorSession,
    tts,
    config: AppConfig,
    audio_out: str,
    reply_index: int,
    stdout: IO[str],
) -> int:
    for envelope in envelopes:
        if envelope.kind != "turn_added" or envelope.payload["role"] != "agent":
            continue
        try:
            audio = synthesize(envelope.payload["text"], config.session.voice_id, tts)
        except (SynthesisError, ValueError) as exc:
            logger.warning("synthesis failed, text-only delivery: %s", exc)
            continue
        reply_index += 1
        path = os.path.join(audio_out, f"agent_{reply_index:03d}.wav")
        write_wav(path, audio)
        stdout.write(f"[audio: {path}]\n")
    return reply_index


def run_replay(csv_path: str, stdout: IO[str]) -> int:
    session_id, turns = read_csv(csv_path)
    stdout.write(format_replay(session_id, turns) + "\n")
    return 0


def run_serve(args: argparse.Namespace, config: AppConfig) -> int:
    import uvicorn

    from .service import SessionManager, create_app

    def backend_factory():
        return _make_backend(args, config)

    os.makedirs(config.log_dir, exist_ok=True)
    manager = SessionManager(
        backend_factory,
        config.session,
        store_factory=lambda: JsonlMemoryStore(config.resolved_memory_path()),
    )
    app = create_app(manager)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        config = load_config(args.config, _overrides_from_args(args))
        if args.command == "text":
            return run_text_session(args, config, sys.stdin, sys.stdout)
        if args.command == "voice":
            return run_voice_session(args, config, sys.stdout)
        if args.command == "replay":
            return run_replay(args.csv_path, sys.stdout)
        if args.command == "serve":
            return run_serve(args, config)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except (ConfigurationError, EllmaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
