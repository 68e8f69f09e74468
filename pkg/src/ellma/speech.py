"""Turn endpointing over PCM frames plus pluggable STT/TTS adapters.

Endpointing is causal and frame-quantized: a boundary event fires the moment
continuous inactivity after speech reaches the silence threshold. Stub
adapters make the whole audio path runnable offline; HTTP adapters speak to
configurable endpoints. Text mode bypasses this module entirely.
"""

from __future__ import annotations

import io
import logging
import math
import queue
import threading
import wave
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Protocol, Sequence, Union

import httpx
import numpy as np

from .core import EllmaError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_FRAME_MS = 20
PCM_SAMPLE_WIDTH = 2  # signed 16-bit mono


class StreamError(EllmaError):
    """Frame stream violated ordering or format expectations."""


class TranscriptionError(EllmaError):
    pass


class SynthesisError(EllmaError):
    pass


@dataclass(frozen=True)
class AudioFrame:
    """One fixed-duration PCM16 mono frame with a stream-relative timestamp."""

    samples: bytes
    sample_rate: int = DEFAULT_SAMPLE_RATE
    frame_duration_ms: int = DEFAULT_FRAME_MS
    timestamp_ms: int = 0

    def __post_init__(self) -> None:
        if self.frame_duration_ms <= 0:
            raise ValueError("frame_duration_ms must be positive")
        if len(self.samples) % PCM_SAMPLE_WIDTH != 0:
            raise ValueError("PCM16 frame must contain whole samples")

    @property
    def end_ms(self) -> int:
        return self.timestamp_ms + self.frame_duration_ms


@dataclass(frozen=True)
class AudioSegment:
    """A contiguous chunk of PCM16 mono audio, optionally named by source."""

    samples: bytes
    sample_rate: int = DEFAULT_SAMPLE_RATE
    source: Optional[str] = None

    @property
    def duration_ms(self) -> int:
        return len(self.samples) // PCM_SAMPLE_WIDTH * 1000 // self.sample_rate


def frame_dbfs(frame: AudioFrame) -> float:
    """RMS level of a frame in dBFS (-inf for digital silence)."""
    if not frame.samples:
        return float("-inf")
    values = np.frombuffer(frame.samples, dtype="<i2").astype(np.float64)
    rms = math.sqrt(float(np.mean(values * values)))
    if rms <= 0:
        return float("-inf")
    return 20.0 * math.log10(rms / 32768.0)


@dataclass(frozen=True)
class EndpointConfig:
    """Endpointing knobs; the energy gate is the default activity detector.

    ``detector`` accepts an external voice-activity callable for parity with
    dedicated VAD tools; when set it overrides the energy gate.
    """

    silence_threshold_s: float = 2.0
    energy_threshold_db: float = -35.0
    min_speech_ms: int = 200
    detector: Optional[Callable[[AudioFrame], bool]] = None

    def __post_init__(self) -> None:
        if self.silence_threshold_s <= 0:
            raise ValueError("silence_threshold_s must be > 0")
        if self.min_speech_ms <= 0:
            raise ValueError("min_speech_ms must be positive")

    def is_active(self, frame: AudioFrame) -> bool:
        if self.detector is not None:
            return self.detector(frame)
        return frame_dbfs(frame) >= self.energy_threshold_db


@dataclass(frozen=True)
class TurnBoundaryEvent:
    speech_start_ms: int
    speech_end_ms: int
    total_speech_ms: int

    def __post_init__(self) -> None:
        if self.speech_end_ms < self.speech_start_ms:
            raise ValueError("speech_end_ms must be >= speech_start_ms")


class EndpointDetector:
    """Incremental endpoint detector; feed frames, collect boundary events.

    A speech segment opens at the first active frame, survives sub-threshold
    silence gaps, and closes once continuous inactivity reaches the silence
    threshold. Segments shorter than min_speech_ms are discarded. Nothing is
    flushed at end of stream: without the threshold of silence there is no
    boundary.
    """

    def __init__(self, config: EndpointConfig) -> None:
        self.config = config
        self._silence_threshold_ms = round(config.silence_threshold_s * 1000)
        self._last_timestamp: Optional[int] = None
        self._speech_start: Optional[int] = None
        self._speech_end: Optional[int] = None
        self._silence_run_ms = 0

    def feed(self, frame: AudioFrame) -> Optional[TurnBoundaryEvent]:
        if self._last_timestamp is not None and frame.timestamp_ms < self._last_timestamp:
            raise StreamError(
                f"out-of-order frame timestamp {frame.timestamp_ms} < {self._last_timestamp}"
            )
        self._last_timestamp = frame.timestamp_ms

        if self.config.is_active(frame):
            if self._speech_start is None:
                self._speech_start = frame.timestamp_ms
            self._speech_end = frame.end_ms
            self._silence_run_ms = 0
            return None

        if self._speech_start is None:
            return None
        self._silence_run_ms += frame.frame_duration_ms
        if self._silence_run_ms < self._silence_threshold_ms:
            return None

        start, end = self._speech_start, self._speech_end
        self._speech_start = None
        self._speech_end = None
        self._silence_run_ms = 0
        assert end is not None
        if end - start < self.config.min_speech_ms:
            return None
        return TurnBoundaryEvent(
            speech_start_ms=start, speech_end_ms=end, total_speech_ms=end - start
        )


def detect_endpoint(
    frames: Iterable[AudioFrame], config: EndpointConfig
) -> Iterator[TurnBoundaryEvent]:
    """Stream boundary events for an ordered frame stream."""
    detector = EndpointDetector(config)
    for frame in frames:
        event = detector.feed(frame)
        if event is not None:
            yield event


def stream_frames_threaded(
    frames: Iterable[AudioFrame], maxsize: int = 64
) -> Iterator[AudioFrame]:
    """Run the frame producer on its own thread behind a bounded queue.

    Delivery order equals capture order; a full queue blocks the producer.
    """
    q: "queue.Queue[Optional[AudioFrame]]" = queue.Queue(maxsize=maxsize)

    def pump() -> None:
        try:
            for frame in frames:
                q.put(frame)
        finally:
            q.put(None)

    threading.Thread(target=pump, daemon=True).start()
    while True:
        item = q.get()
        if item is None:
            return
        yield item


# --- adapters ---------------------------------------------------------------


class SttAdapter(Protocol):
    def transcribe(self, segment: AudioSegment) -> str: ...


class TtsAdapter(Protocol):
    def synthesize(self, text: str, voice_id: str) -> AudioSegment: ...


def transcribe(segment: AudioSegment, backend: SttAdapter) -> str:
    if not segment.samples:
        raise ValueError("cannot transcribe an empty segment")
    return backend.transcribe(segment)


def synthesize(text: str, voice_id: str, backend: TtsAdapter) -> AudioSegment:
    if not text:
        raise ValueError("cannot synthesize empty text")
    return backend.synthesize(text, voice_id)


class StubStt:
    """Offline STT keyed by fixture filename.

    A mapping value may be a single transcript (returned for every segment
    from that source) or a list consumed in order, one per segment.
    """

    def __init__(self, mapping: dict[str, Union[str, Sequence[str]]]) -> None:
        self._fixed: dict[str, str] = {}
        self._queues: dict[str, list[str]] = {}
        for key, value in mapping.items():
            if isinstance(value, str):
                self._fixed[key] = value
            else:
                self._queues[key] = list(value)

    def transcribe(self, segment: AudioSegment) -> str:
        key = segment.source or ""
        if key in self._queues:
            if not self._queues[key]:
                raise TranscriptionError(f"stub transcript list for {key!r} exhausted")
            return self._queues[key].pop(0)
        if key in self._fixed:
            return self._fixed[key]
        raise TranscriptionError(f"no stub transcript for source {key!r}")


class StubTts:
    """Offline TTS emitting silence at 15 ms per character."""

    MS_PER_CHAR = 15

    def __init__(self, sample_rate: int = DEFAULT_SAMPLE_RATE) -> None:
        self.sample_rate = sample_rate
        self.calls: list[tuple[str, str]] = []

    def synthesize(self, text: str, voice_id: str) -> AudioSegment:
        self.calls.append((text, voice_id))
        n_samples = self.MS_PER_CHAR * len(text) * self.sample_rate // 1000
        return AudioSegment(samples=b"\x00" * (n_samples * PCM_SAMPLE_WIDTH), sample_rate=self.sample_rate)


class HttpStt:
    """POSTs WAV bytes to a transcription endpoint returning {"text": ...}."""

    def __init__(self, endpoint_url: str, timeout_s: float = 30.0) -> None:
        self.endpoint_url = endpoint_url
        self._client = httpx.Client(timeout=timeout_s)

    def transcribe(self, segment: AudioSegment) -> str:
        try:
            response = self._client.post(
                self.endpoint_url,
                content=segment_to_wav_bytes(segment),
                headers={"Content-Type": "audio/wav"},
            )
            response.raise_for_status()
            return response.json()["text"]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise TranscriptionError(f"transcription backend failed: {exc}") from exc


class HttpTts:
    """POSTs {"text", "voice"} to a synthesis endpoint returning WAV bytes."""

    def __init__(self, endpoint_url: str, timeout_s: float = 30.0) -> None:
        self.endpoint_url = endpoint_url
        self._client = httpx.Client(timeout=timeout_s)

    def synthesize(self, text: str, voice_id: str) -> AudioSegment:
        try:
            response = self._client.post(
                self.endpoint_url, json={"text": text, "voice": voice_id}
            )
            response.raise_for_status()
            return wav_bytes_to_segment(response.content)
        except httpx.HTTPError as exc:
            raise SynthesisError(f"synthesis backend failed: {exc}") from exc


# --- WAV plumbing -----------------------------------------------------------


def read_wav(path: str) -> AudioSegment:
    with wave.open(path, "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != PCM_SAMPLE_WIDTH:
            raise StreamError(f"{path}: fixtures must be PCM16 mono")
        return AudioSegment(
            samples=wf.readframes(wf.getnframes()),
            sample_rate=wf.getframerate(),
            source=path,
        )


def write_wav(path: str, segment: AudioSegment) -> None:
    with wave.open(path, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(PCM_SAMPLE_WIDTH)
        wf.setframerate(segment.sample_rate)
        wf.writeframes(segment.samples)


def segment_to_wav_bytes(segment: AudioSegment) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(PCM_SAMPLE_WIDTH)
        wf.setframerate(segment.sample_rate)
        wf.writeframes(segment.samples)
    return buf.getvalue()


def wav_bytes_to_segment(data: bytes) -> AudioSegment:
    with wave.open(io.BytesIO(data), "rb") as wf:
        return AudioSegment(
            samples=wf.readframes(wf.getnframes()), sample_rate=wf.getframerate()
        )


def frames_from_segment(
    segment: AudioSegment, frame_ms: int = DEFAULT_FRAME_MS, start_ms: int = 0
) -> Iterator[AudioFrame]:
    """Slice a segment into fixed frames, zero-padding the final partial one."""
    bytes_per_frame = segment.sample_rate * frame_ms // 1000 * PCM_SAMPLE_WIDTH
    ts = start_ms
    for offset in range(0, len(segment.samples), bytes_per_frame):
        chunk = segment.samples[offset : offset + bytes_per_frame]
        if len(chunk) < bytes_per_frame:
            chunk = chunk + b"\x00" * (bytes_per_frame - len(chunk))
        yield AudioFrame(
            samples=chunk,
            sample_rate=segment.sample_rate,
            frame_duration_ms=frame_ms,
            timestamp_ms=ts,
        )
        ts += frame_ms
