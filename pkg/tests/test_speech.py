from __future__ import annotations

import json
import math
import random
import struct
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from ellma.speech import (
    AudioFrame,
    AudioSegment,
    EndpointConfig,
    EndpointDetector,
    HttpStt,
    HttpTts,
    StreamError,
    StubStt,
    StubTts,
    TranscriptionError,
    detect_endpoint,
    frame_dbfs,
    frames_from_segment,
    read_wav,
    segment_to_wav_bytes,
    stream_frames_threaded,
    synthesize,
    transcribe,
    wav_bytes_to_segment,
    write_wav,
)

RATE = 16000
FRAME_MS = 20
SAMPLES_PER_FRAME = RATE * FRAME_MS // 1000

LOUD = struct.pack("<h", 8000) * SAMPLES_PER_FRAME
QUIET = b"\x00\x00" * SAMPLES_PER_FRAME


def frames_for(pattern: list[tuple[bool, int]]) -> list[AudioFrame]:
    """Build a frame stream from (is_speech, duration_ms) segments."""
    frames = []
    ts = 0
    for speech, duration_ms in pattern:
        for _ in range(duration_ms // FRAME_MS):
            frames.append(
                AudioFrame(
                    samples=LOUD if speech else QUIET,
                    sample_rate=RATE,
                    frame_duration_ms=FRAME_MS,
                    timestamp_ms=ts,
                )
            )
            ts += FRAME_MS
    return frames


def _oracle_dbfs(frame: AudioFrame) -> float:
    # independent RMS: struct-based, no shared code with the implementation
    n = len(frame.samples) // 2
    values = struct.unpack(f"<{n}h", frame.samples)
    rms = math.sqrt(sum(v * v for v in values) / n) if n else 0.0
    return 20.0 * math.log10(rms / 32768.0) if rms > 0 else float("-inf")


def brute_force_events(
    frames: list[AudioFrame],
    silence_threshold_s: float = 2.0,
    min_speech_ms: int = 200,
    threshold_db: float = -35.0,
) -> list[tuple[int, int]]:
    """Frame-level simulation straight from the endpointing definition."""
    events = []
    speech_start = None
    speech_end = None
    silence_ms = 0
    for frame in frames:
        active = _oracle_dbfs(frame) >= threshold_db
        if active:
            if speech_start is None:
                speech_start = frame.timestamp_ms
            speech_end = frame.timestamp_ms + frame.frame_duration_ms
            silence_ms = 0
        elif speech_start is not None:
            silence_ms += frame.frame_duration_ms
            if silence_ms >= round(silence_threshold_s * 1000):
                if speech_end - speech_start >= min_speech_ms:
                    events.append((speech_start, speech_end))
                speech_start = speech_end = None
                silence_ms = 0
    return events


def random_stream(rng: random.Random) -> list[AudioFrame]:
    pattern = []
    for _ in range(rng.randrange(1, 8)):
        pattern.append((True, rng.randrange(1, 80) * FRAME_MS))
        pattern.append((False, rng.randrange(1, 160) * FRAME_MS))
    return frames_for(pattern)


class TestEndpointing:
    def test_speech_then_threshold_silence_yields_one_event(self) -> None:
        frames = frames_for([(True, 1000), (False, 2000)])
        events = list(detect_endpoint(frames, EndpointConfig()))
        assert len(events) == 1
        assert events[0].total_speech_ms == 1000
        assert events[0].speech_start_ms == 0
        assert events[0].speech_end_ms == 1000

    def test_sub_threshold_silence_does_not_split(self) -> None:
        # oracle: frame-level simulation over 20 ms frames
        frames = frames_for([(True, 1000), (False, 1900), (True, 400), (False, 2000)])
        events = list(detect_endpoint(frames, EndpointConfig()))
        assert len(events) == 1
        assert events[0].speech_start_ms == 0
        assert events[0].speech_end_ms == 3300  # 1000 + 1900 + 400
        assert brute_force_events(frames) == [(0, 3300)]

    def test_all_silence_stream(self) -> None:
        frames = frames_for([(False, 4000)])
        assert list(detect_endpoint(frames, EndpointConfig())) == []

    def test_short_silence_at_stream_end_yields_nothing(self) -> None:
        frames = frames_for([(True, 1000), (False, 1900)])
        assert list(detect_endpoint(frames, EndpointConfig())) == []

    def test_min_speech_discards_clicks(self) -> None:
        frames = frames_for([(True, 100), (False, 2000), (True, 400), (False, 2000)])
        events = list(detect_endpoint(frames, EndpointConfig()))
        assert [e.total_speech_ms for e in events] == [400]

    def test_exactly_once_per_segment(self) -> None:
        segments = 5
        pattern = []
        for _ in range(segments):
            pattern.append((True, 600))
            pattern.append((False, 2400))
        frames = frames_for(pattern)
        events = list(detect_endpoint(frames, EndpointConfig()))
        assert len(events) == segments

    def test_matches_brute_force_on_random_streams(self) -> None:
        rng = random.Random(424242)
        for _ in range(60):
            frames = random_stream(rng)
            got = [
                (e.speech_start_ms, e.speech_end_ms)
                for e in detect_endpoint(frames, EndpointConfig())
            ]
            assert got == brute_force_events(frames)

    def test_threshold_monotonicity(self) -> None:
        rng = random.Random(99)
        for _ in range(30):
            frames = random_stream(rng)
            counts = [
                len(list(detect_endpoint(frames, EndpointConfig(silence_threshold_s=s))))
                for s in (1.0, 2.0, 3.0)
            ]
            assert counts[0] >= counts[1] >= counts[2]

    def test_causal_emission_time(self) -> None:
        config = EndpointConfig()
        detector = EndpointDetector(config)
        threshold_ms = round(config.silence_threshold_s * 1000)
        for frame in frames_for([(True, 1000), (False, 2400), (True, 600), (False, 2400)]):
            event = detector.feed(frame)
            if event is not None:
                emission = frame.end_ms
                assert emission >= event.speech_end_ms + threshold_ms
                assert emission <= event.speech_end_ms + threshold_ms + FRAME_MS

    def test_out_of_order_timestamps_rejected(self) -> None:
        frames = frames_for([(True, 100)])
        reordered = [frames[-1]] + frames[:-1]
        with pytest.raises(StreamError):
            list(detect_endpoint(reordered, EndpointConfig()))

    def test_external_detector_overrides_energy(self) -> None:
        marks = iter([True] * 25 + [False] * 100)
        config = EndpointConfig(detector=lambda frame: next(marks))
        frames = frames_for([(False, 2500)])  # energy says silence throughout
        events = list(detect_endpoint(frames, config))
        assert len(events) == 1

    def test_threaded_stream_preserves_order(self) -> None:
        frames = frames_for([(True, 400), (False, 2400)])
        streamed = list(stream_frames_threaded(iter(frames), maxsize=4))
        assert streamed == frames


class TestEnergyGate:
    def test_silence_is_minus_inf(self) -> None:
        assert frame_dbfs(AudioFrame(samples=QUIET)) == float("-inf")

    def test_loud_tone_above_gate(self) -> None:
        assert frame_dbfs(AudioFrame(samples=LOUD)) > -35.0

    def test_agrees_with_oracle(self) -> None:
        rng = random.Random(3)
        for _ in range(20):
            samples = struct.pack(
                f"<{SAMPLES_PER_FRAME}h",
                *(rng.randrange(-20000, 20000) for _ in range(SAMPLES_PER_FRAME)),
            )
            frame = AudioFrame(samples=samples)
            assert frame_dbfs(frame) == pytest.approx(_oracle_dbfs(frame), abs=1e-9)


class TestStubAdapters:
    def test_stub_stt_filename_lookup(self) -> None:
        stt = StubStt({"a.wav": "hello"})
        segment = AudioSegment(samples=LOUD, source="a.wav")
        assert transcribe(segment, stt) == "hello"

    def test_stub_stt_list_consumed_in_order(self) -> None:
        stt = StubStt({"s.wav": ["one", "two"]})
        segment = AudioSegment(samples=LOUD, source="s.wav")
        assert transcribe(segment, stt) == "one"
        assert transcribe(segment, stt) == "two"
        with pytest.raises(TranscriptionError):
            transcribe(segment, stt)

    def test_stub_stt_unknown_source(self) -> None:
        stt = StubStt({})
        with pytest.raises(TranscriptionError):
            transcribe(AudioSegment(samples=LOUD, source="x.wav"), stt)

    def test_zero_length_segment_precondition(self) -> None:
        with pytest.raises(ValueError):
            transcribe(AudioSegment(samples=b""), StubStt({}))

    def test_stub_tts_duration_rule(self) -> None:
        # oracle: sample count = 0.015 s/char * chars * 16000 Hz
        tts = StubTts()
        audio = synthesize("hi", "alloy", tts)
        assert len(audio.samples) // 2 == round(0.015 * 2 * 16000)
        assert audio.duration_ms == 30

    def test_stub_tts_records_voice(self) -> None:
        tts = StubTts()
        synthesize("hello world", "alloy", tts)
        assert tts.calls == [("hello world", "alloy")]

    def test_empty_text_precondition(self) -> None:
        with pytest.raises(ValueError):
            synthesize("", "alloy", StubTts())


class TestWavPlumbing:
    def test_wav_round_trip(self, tmp_path) -> None:
        segment = AudioSegment(samples=LOUD * 10, sample_rate=RATE)
        path = str(tmp_path / "t.wav")
        write_wav(path, segment)
        loaded = read_wav(path)
        assert loaded.samples == segment.samples
        assert loaded.sample_rate == RATE
        assert loaded.source == path

    def test_wav_bytes_round_trip(self) -> None:
        segment = AudioSegment(samples=QUIET * 3)
        assert wav_bytes_to_segment(segment_to_wav_bytes(segment)).samples == segment.samples

    def test_frames_from_segment_pads_last(self) -> None:
        segment = AudioSegment(samples=LOUD + LOUD[: 10 * 2])
        frames = list(frames_from_segment(segment))
        assert len(frames) == 2
        assert all(len(f.samples) == SAMPLES_PER_FRAME * 2 for f in frames)
        assert frames[1].timestamp_ms == FRAME_MS


class _FixtureHandler(BaseHTTPRequestHandler):
    def do_POST(self) -> None:  # noqa: N802
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        if self.path == "/stt":
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(json.dumps({"text": "fixture transcript"}).encode())
        else:
            request = json.loads(body)
            audio = segment_to_wav_bytes(
                AudioSegment(samples=b"\x00\x00" * (len(request["text"]) * 80))
            )
            self.send_response(200)
            self.send_header("Content-Type", "audio/wav")
            self.end_headers()
            self.wfile.write(audio)

    def log_message(self, *args) -> None:
        pass


@pytest.fixture
def fixture_server():
    server = HTTPServer(("127.0.0.1", 0), _FixtureHandler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestHttpAdapters:
    def test_http_stt_returns_fixture_payload(self, fixture_server) -> None:
        stt = HttpStt(f"{fixture_server}/stt")
        assert transcribe(AudioSegment(samples=LOUD), stt) == "fixture transcript"

    def test_http_tts_round_trip(self, fixture_server) -> None:
        tts = HttpTts(f"{fixture_server}/tts")
        audio = synthesize("abcd", "alloy", tts)
        assert len(audio.samples) == 4 * 80 * 2

    def test_http_stt_failure_raises_transcription_error(self) -> None:
        stt = HttpStt("http://127.0.0.1:9/unreachable", timeout_s=0.2)
        with pytest.raises(TranscriptionError):
            transcribe(AudioSegment(samples=LOUD), stt)
