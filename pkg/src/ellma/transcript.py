"""CSV transcript logging and lossless reload.

One row per turn, RFC-4180 quoting, UTF-8; the schema captures everything a
session analysis needs: ordering, timing, phases, roles, text, latency, and
the mirrored emotion label.
"""

from __future__ import annotations

import csv
from datetime import datetime, timezone
from typing import Iterable, Optional, Sequence, TextIO

from .core import EmotionLabel, TaskPhase, TurnRecord, TurnRole, phase_from_label

CSV_HEADER = (
    "session_id",
    "seq",
    "ts_start_iso",
    "ts_end_iso",
    "phase",
    "role",
    "text",
    "latency_ms",
    "emotion",
)


def ms_to_iso(ms: int) -> str:
    return datetime.fromtimestamp(ms / 1000.0, tz=timezone.utc).isoformat(
        timespec="milliseconds"
    )


def iso_to_ms(value: str) -> int:
    return round(datetime.fromisoformat(value).timestamp() * 1000)


def write_csv_to(handle: TextIO, transcript: Sequence[TurnRecord], session_id: str) -> None:
    writer = csv.writer(handle)
    writer.writerow(CSV_HEADER)
    for turn in transcript:
        writer.writerow(
            (
                session_id,
                turn.seq,
                ms_to_iso(turn.started_at),
                ms_to_iso(turn.ended_at),
                turn.phase.value,
                turn.role.value,
                turn.text,
                "" if turn.response_latency_ms is None else turn.response_latency_ms,
                "" if turn.emotion is None else turn.emotion.value,
            )
        )


def write_csv(transcript: Sequence[TurnRecord], path: str, session_id: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        write_csv_to(handle, transcript, session_id)


def read_csv(path: str) -> tuple[Optional[str], list[TurnRecord]]:
    """Reload a transcript; returns (session_id, turns), losslessly."""
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header {header}")
        session_id: Optional[str] = None
        turns = []
        for row in reader:
            session_id = row[0]
            turns.append(
                TurnRecord(
                    seq=int(row[1]),
                    role=TurnRole(row[5]),
                    text=row[6],
                    phase=phase_from_label(row[4]),
                    started_at=iso_to_ms(row[2]),
                    ended_at=iso_to_ms(row[3]),
                    response_latency_ms=int(row[7]) if row[7] else None,
                    emotion=EmotionLabel(row[8]) if row[8] else None,
                )
            )
    return session_id, turns


def format_replay(session_id: Optional[str], turns: Iterable[TurnRecord]) -> str:
    """Human-readable rendering of a stored transcript, phase-bannered."""
    lines = [f"session: {session_id or '(empty)'}"]
    current_phase: Optional[TaskPhase] = None
    for turn in turns:
        if turn.phase is not current_phase:
            current_phase = turn.phase
            lines.append(f"--- {current_phase.value} ---")
        latency = f" ({turn.response_latency_ms} ms)" if turn.response_latency_ms else ""
        lines.append(f"[{turn.role.value}] {turn.text}{latency}")
    return "\n".join(lines)
