"""Emotion mirroring into avatar commands, encoded as OSC 1.0 over UDP.

The OSC layer encodes messages only (no bundles): a padded address, a
','-prefixed padded type-tag string, then big-endian payloads, every block
4-byte aligned. Emotion keywords and expression mappings are versioned TOML
data files, not code.
"""

from __future__ import annotations

import logging
import re
import socket
import struct
import threading
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Optional, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .core import ConfigurationError, EllmaError, EmotionLabel

logger = logging.getLogger(__name__)

AVATAR_PARAMETER_PREFIX = "/avatar/parameters/"
CHATBOX_ADDRESS = "/chatbox/input"
DEFAULT_CHATBOX_CHUNK = 144
DEFAULT_OSC_TARGET = ("127.0.0.1", 9000)

OscArg = Union[int, float, str, bool]


class OscEncodingError(EllmaError):
    pass


# Printable ASCII minus the characters OSC reserves; no spaces, no '#'.
_ADDRESS_SAFE = re.compile(r"^[\x21-\x7e]+$")


def _address_ok(address: str) -> bool:
    return (
        address.startswith("/")
        and _ADDRESS_SAFE.match(address) is not None
        and "#" not in address
        and " " not in address
    )


def _f32(value: float) -> float:
    """Round-trip through float32 so encoded and decoded values compare equal."""
    return struct.unpack(">f", struct.pack(">f", value))[0]


@dataclass(frozen=True)
class OscMessage:
    """Typed OSC 1.0 message; float args are held at float32 precision."""

    address: str
    args: tuple[OscArg, ...] = ()

    def __post_init__(self) -> None:
        if not _address_ok(self.address):
            raise OscEncodingError(f"invalid OSC address: {self.address!r}")
        coerced = []
        for arg in self.args:
            if isinstance(arg, bool) or isinstance(arg, (int, str)):
                coerced.append(arg)
            elif isinstance(arg, float):
                coerced.append(_f32(arg))
            else:
                raise OscEncodingError(f"unsupported OSC argument type: {type(arg).__name__}")
        object.__setattr__(self, "args", tuple(coerced))


def _pad_string(value: str) -> bytes:
    # addresses are pre-validated as printable ASCII; string args may be UTF-8
    raw = value.encode("utf-8") + b"\x00"
    if len(raw) % 4:
        raw += b"\x00" * (4 - len(raw) % 4)
    return raw


def encode_osc(message: OscMessage) -> bytes:
    """OSC 1.0 wire encoding; output length is always a multiple of 4."""
    parts = [_pad_string(message.address)]
    tags = ","
    payload = b""
    for arg in message.args:
        if isinstance(arg, bool):
            tags += "T" if arg else "F"
        elif isinstance(arg, int):
            tags += "i"
            payload += struct.pack(">i", arg)
        elif isinstance(arg, float):
            tags += "f"
            payload += struct.pack(">f", arg)
        else:
            tags += "s"
            try:
                payload += _pad_string(arg)
            except UnicodeEncodeError as exc:
                raise OscEncodingError(f"string argument not ASCII-safe: {arg!r}") from exc
    parts.append(_pad_string(tags))
    parts.append(payload)
    return b"".join(parts)


def _read_padded_string(data: bytes, offset: int) -> tuple[str, int]:
    end = data.index(b"\x00", offset)
    value = data[offset:end].decode("utf-8")
    end += 1
    if end % 4:
        end += 4 - end % 4
    return value, end


def decode_osc(data: bytes) -> OscMessage:
    """Inverse of encode_osc; raises OscEncodingError on malformed frames."""
    try:
        address, offset = _read_padded_string(data, 0)
        tags, offset = _read_padded_string(data, offset)
    except (ValueError, UnicodeDecodeError) as exc:
        raise OscEncodingError(f"malformed OSC frame: {exc}") from exc
    if not tags.startswith(","):
        raise OscEncodingError("missing type-tag string")
    args: list[OscArg] = []
    try:
        for tag in tags[1:]:
            if tag == "i":
                args.append(struct.unpack_from(">i", data, offset)[0])
                offset += 4
            elif tag == "f":
                args.append(struct.unpack_from(">f", data, offset)[0])
                offset += 4
            elif tag == "s":
                value, offset = _read_padded_string(data, offset)
                args.append(value)
            elif tag == "T":
                args.append(True)
            elif tag == "F":
                args.append(False)
            else:
                raise OscEncodingError(f"unsupported type tag: {tag!r}")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise OscEncodingError(f"malformed OSC payload: {exc}") from exc
    return OscMessage(address=address, args=tuple(args))


# --- emotion detection and expression mapping --------------------------------


def _load_data_toml(name: str) -> dict:
    raw = resources.files("ellma").joinpath("data").joinpath(name).read_bytes()
    return tomllib.loads(raw.decode("utf-8"))


def load_default_lexicon() -> dict[str, EmotionLabel]:
    data = _load_data_toml("emotion_lexicon.toml")
    lexicon = {}
    for label_name, keywords in data["keywords"].items():
        label = EmotionLabel(label_name)
        for keyword in keywords:
            lexicon[keyword.lower()] = label
    return lexicon


def detect_emotion(text: str, lexicon: dict[str, EmotionLabel]) -> EmotionLabel:
    """Keyword scan: most frequent label wins, ties break on earliest match."""
    counts: dict[EmotionLabel, int] = {}
    earliest: dict[EmotionLabel, int] = {}
    for keyword, label in lexicon.items():
        for match in re.finditer(rf"\b{re.escape(keyword)}\b", text, re.IGNORECASE):
            counts[label] = counts.get(label, 0) + 1
            position = match.start()
            if label not in earliest or position < earliest[label]:
                earliest[label] = position
    if not counts:
        return EmotionLabel.NEUTRAL
    return min(counts, key=lambda label: (-counts[label], earliest[label]))


@dataclass(frozen=True)
class ExpressionCommand:
    """One avatar parameter write with a hold time before decay to zero."""

    parameter_name: str
    value: Union[float, int, bool]
    hold_ms: int

    def __post_init__(self) -> None:
        if self.hold_ms <= 0:
            raise ValueError("hold_ms must be positive")
        if not _ADDRESS_SAFE.match(self.parameter_name) or "#" in self.parameter_name:
            raise ValueError(f"parameter_name not address-safe: {self.parameter_name!r}")


ExpressionMapping = dict[EmotionLabel, tuple[ExpressionCommand, ...]]


def load_expression_mapping(data: Optional[dict] = None) -> ExpressionMapping:
    """Load the emotion-to-commands table; totality is checked here, at load.

    A mapping missing any label is a configuration error now rather than a
    runtime surprise later. Neutral conventionally maps to no commands.
    """
    if data is None:
        data = _load_data_toml("expression_map.toml")
    mapping: ExpressionMapping = {}
    table = data.get("expressions", {})
    for label in EmotionLabel:
        if label.value not in table:
            raise ConfigurationError(f"expression mapping missing label {label.value!r}")
        commands = []
        for entry in table[label.value]:
            value = entry["value"]
            if isinstance(value, float):
                value = _f32(value)
            commands.append(
                ExpressionCommand(
                    parameter_name=entry["parameter"],
                    value=value,
                    hold_ms=int(entry.get("hold_ms", 1500)),
                )
            )
        mapping[label] = tuple(commands)
    return mapping


def map_expression(emotion: EmotionLabel, mapping: ExpressionMapping) -> list[ExpressionCommand]:
    return list(mapping[emotion])


def parse_osc_target(target: str) -> tuple[str, int]:
    host, _, port = target.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigurationError(f"osc target must be host:port, got {target!r}")
    return host, int(port)


class UdpTransport:
    """Fire-and-forget datagram sender; failures warn, never raise."""

    def __init__(self, target: tuple[str, int] = DEFAULT_OSC_TARGET) -> None:
        self.target = target
        self._socket = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)

    def send(self, data: bytes) -> None:
        try:
            self._socket.sendto(data, self.target)
        except OSError as exc:
            logger.warning("OSC send to %s failed: %s", self.target, exc)

    def close(self) -> None:
        self._socket.close()


class CollectingTransport:
    """Test transport recording every frame instead of sending it."""

    def __init__(self) -> None:
        self.frames: list[bytes] = []

    def send(self, data: bytes) -> None:
        self.frames.append(data)


class EmbodimentBridge:
    """Owns the OSC transport; mirrors emotions and relays chat text.

    One sender owns the socket; expression decay (zeroing a parameter after
    its hold time) is scheduled through an injectable timer so tests can run
    it synchronously.
    """

    def __init__(
        self,
        transport,
        *,
        lexicon: Optional[dict[str, EmotionLabel]] = None,
        mapping: Optional[ExpressionMapping] = None,
        chunk_limit: int = DEFAULT_CHATBOX_CHUNK,
        schedule: Optional[Callable[[float, Callable[[], None]], None]] = None,
    ) -> None:
        self.transport = transport
        self.lexicon = lexicon if lexicon is not None else load_default_lexicon()
        self.mapping = mapping if mapping is not None else load_expression_mapping()
        self.chunk_limit = chunk_limit
        self._schedule = schedule or _timer_schedule
        self._lock = threading.Lock()

    def _send(self, message: OscMessage) -> None:
        with self._lock:
            self.transport.send(encode_osc(message))

    def mirror_emotion(self, text: str) -> EmotionLabel:
        """Detect the emotion in ``text`` and fire its avatar commands."""
        emotion = detect_emotion(text, self.lexicon)
        for command in map_expression(emotion, self.mapping):
            address = AVATAR_PARAMETER_PREFIX + command.parameter_name
            self._send(OscMessage(address, (command.value,)))
            zero: OscArg = False if isinstance(command.value, bool) else type(command.value)(0)
            self._schedule(
                command.hold_ms / 1000.0,
                lambda addr=address, z=zero: self._send(OscMessage(addr, (z,))),
            )
        return emotion

    def send_chatbox(self, text: str) -> int:
        """Relay agent text to the chat display, split at the chunk limit.

        Returns the number of datagrams sent. Transport failures are warnings
        by design: speech continues even when the avatar link is down.
        """
        if not text:
            raise ValueError("chatbox text must be non-empty")
        chunks = [
            text[i : i + self.chunk_limit] for i in range(0, len(text), self.chunk_limit)
        ]
        for chunk in chunks:
            self._send(OscMessage(CHATBOX_ADDRESS, (chunk, True)))
        return len(chunks)


def _timer_schedule(delay_s: float, fn: Callable[[], None]) -> None:
    timer = threading.Timer(delay_s, fn)
    timer.daemon = True
    timer.start()
