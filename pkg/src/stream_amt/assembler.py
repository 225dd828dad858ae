"""Greedy note regression from frame events, plus MIDI / JSON output."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from . import midi
from .streamer import FRAME_PERIOD, FrameEvents

MAX_DURATION = 4.0


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset_s: float
    offset_s: float
    source: str = "matched_offset"  # matched_offset | pedal_fallback | max_duration | stream_end

    @property
    def duration(self) -> float:
        return self.offset_s - self.onset_s


def _sec(frames: float) -> float:
    # one conversion point keeps frame order exact (140 * 0.02 + 0.02 > 141 * 0.02 in floats)
    return round(frames * FRAME_PERIOD, 9)


def pedal_intervals(events: Sequence[FrameEvents], end_time: Optional[float] = None) -> List[Tuple[float, float]]:
    """Pedal-down spans from the per-frame pedal state; an open span closes at `end_time`."""
    spans, down_at = [], None
    for ev in events:
        if ev.pedal and down_at is None:
            down_at = _sec(ev.t)
        elif not ev.pedal and down_at is not None:
            spans.append((down_at, _sec(ev.t)))
            down_at = None
    if down_at is not None:
        last = end_time if end_time is not None else _sec(events[-1].t + 1)
        if last > down_at:
            spans.append((down_at, last))
    return spans


def assemble(events: Sequence[FrameEvents], end_time: Optional[float] = None,
             stats: Optional[Counter] = None) -> List[NoteEvent]:
    """Pair each onset with the nearest later offset of its pitch.

    Within a frame the order is: forced offsets, onsets, offsets. An onset with
    no offset before the next onset of the same pitch falls back to the first
    pedal release after it (within 4 s), else onset + 4 s; stream end and the
    next same-pitch onset cap either fallback. Unpaired offsets are discarded
    and counted in `stats["orphan_offsets"]`.
    """
    stats = stats if stats is not None else Counter()
    if not events:
        return []
    end = (events[-1].t + 1) if end_time is None else end_time / FRAME_PERIOD
    max_frames = MAX_DURATION / FRAME_PERIOD

    per_pitch: Dict[int, List[Tuple[int, str]]] = {}
    pedal_offs: List[int] = []
    pedal = False
    for ev in events:
        for p in ev.forced_offsets:
            per_pitch.setdefault(p, []).append((ev.t, "off"))
        for p in ev.onsets:
            per_pitch.setdefault(p, []).append((ev.t, "on"))
        for p in ev.offsets:
            per_pitch.setdefault(p, []).append((ev.t, "off"))
        if ev.pedal is not None:
            if pedal and not ev.pedal:
                pedal_offs.append(ev.t)
            pedal = bool(ev.pedal)

    notes = []
    for p, seq in per_pitch.items():
        onset_idx = [i for i, (_, kind) in enumerate(seq) if kind == "on"]
        used = set()
        for j, i in enumerate(onset_idx):
            on = seq[i][0]
            stop = onset_idx[j + 1] if j + 1 < len(onset_idx) else len(seq)
            next_on = seq[stop][0] if stop < len(seq) else None
            match = next((k for k in range(i + 1, stop) if seq[k][1] == "off"), None)
            if match is not None:
                used.add(match)
                notes.append(NoteEvent(p, _sec(on), _sec(max(seq[match][0], on + 1)), "matched_offset"))
                continue
            rel = next((x for x in pedal_offs if x > on), None)
            if rel is not None and rel - on <= max_frames:
                off, source = rel, "pedal_fallback"
            else:
                off, source = on + max_frames, "max_duration"
            if end < off:
                off, source = max(end, on + 1), "stream_end"
            if next_on is not None and next_on < off:
                off = next_on
            notes.append(NoteEvent(p, _sec(on), _sec(off), source))
        stats["orphan_offsets"] += sum(1 for k, (_, kind) in enumerate(seq) if kind == "off" and k not in used)
    notes.sort(key=lambda n: (n.onset_s, n.pitch))
    return notes


def notes_to_json(notes: Sequence[NoteEvent], pedal: Sequence[Tuple[float, float]] = ()) -> dict:
    return {"notes": [[n.pitch, round(n.onset_s, 6), round(n.offset_s, 6)] for n in notes],
            "pedal": [[round(a, 6), round(b, 6)] for a, b in pedal]}


def write_notes_json(path: Union[str, Path], notes: Sequence[NoteEvent],
                     pedal: Sequence[Tuple[float, float]] = ()) -> None:
    Path(path).write_text(json.dumps(notes_to_json(notes, pedal)))


def write_midi(notes: Sequence[NoteEvent], pedal: Sequence[Tuple[float, float]] = (),
               sink: Union[str, Path, None] = None) -> bytes:
    """Serialize notes (velocity 64) and pedal spans to SMF format 0."""
    data = midi.write_midi([(n.pitch, n.onset_s, n.offset_s) for n in notes], pedal)
    if sink is not None:
        try:
            Path(sink).write_bytes(data)
        except OSError as e:
            raise OSError(f"cannot write MIDI to {sink}: {e}") from e
    return data
