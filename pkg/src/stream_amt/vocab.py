"""Token vocabulary and frame-level target generation.

Layout: BLANK=0, BOS=1, EOS=2, PedalOn=3, PedalOff=4, Onset(p)=5+p,
Offset(p)=133+p, for 261 tokens total.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

BLANK = 0
BOS = 1
EOS = 2
PEDAL_ON = 3
PEDAL_OFF = 4
ONSET_BASE = 5
OFFSET_BASE = 133
N_PITCHES = 128
VOCAB_SIZE = OFFSET_BASE + N_PITCHES

FRAME_RATE = 50  # frames per second (20 ms hop)
N_SEQ = 64
N_SLOTS = 16
HISTORY_FRAMES = 4
IGNORE = -100  # loss ignore index for padding


def vocab_size() -> int:
    return VOCAB_SIZE


@dataclass(frozen=True)
class Token:
    kind: str  # onset | offset | pedal_on | pedal_off | blank | bos | eos
    pitch: Optional[int] = None

    @property
    def id(self) -> int:
        return id_of(self)


_SPECIAL = {BLANK: "blank", BOS: "bos", EOS: "eos", PEDAL_ON: "pedal_on", PEDAL_OFF: "pedal_off"}
_SPECIAL_IDS = {v: k for k, v in _SPECIAL.items()}


def onset(pitch: int) -> int:
    if not 0 <= pitch < N_PITCHES:
        raise ValueError(f"pitch out of range: {pitch}")
    return ONSET_BASE + pitch


def offset(pitch: int) -> int:
    if not 0 <= pitch < N_PITCHES:
        raise ValueError(f"pitch out of range: {pitch}")
    return OFFSET_BASE + pitch


def is_onset(tok: int) -> bool:
    return ONSET_BASE <= tok < OFFSET_BASE


def is_offset(tok: int) -> bool:
    return OFFSET_BASE <= tok < VOCAB_SIZE


def pitch_of(tok: int) -> int:
    if is_onset(tok):
        return tok - ONSET_BASE
    if is_offset(tok):
        return tok - OFFSET_BASE
    raise ValueError(f"token {tok} carries no pitch")


def token_of(tok_id: int) -> Token:
    if tok_id in _SPECIAL:
        return Token(_SPECIAL[tok_id])
    if is_onset(tok_id):
        return Token("onset", tok_id - ONSET_BASE)
    if is_offset(tok_id):
        return Token("offset", tok_id - OFFSET_BASE)
    raise ValueError(f"token id out of range: {tok_id}")


def id_of(token: Token) -> int:
    if token.kind == "onset":
        return onset(token.pitch)
    if token.kind == "offset":
        return offset(token.pitch)
    return _SPECIAL_IDS[token.kind]


def time_to_frame(seconds: float) -> int:
    # round half up; the tiny epsilon absorbs binary representation error (0.5 * 50 etc.)
    return int(math.floor(seconds * FRAME_RATE + 0.5 + 1e-9))


@dataclass
class Annotation:
    notes: List[Tuple[int, float, float]] = field(default_factory=list)
    pedal: List[Tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"notes": [[int(p), float(a), float(b)] for p, a, b in self.notes],
                "pedal": [[float(a), float(b)] for a, b in self.pedal]}

    @classmethod
    def from_json(cls, obj: dict) -> "Annotation":
        notes = [(int(p), float(a), float(b)) for p, a, b in obj.get("notes", [])]
        pedal = [(float(a), float(b)) for a, b in obj.get("pedal", [])]
        return cls(sorted(notes, key=lambda n: (n[1], n[0])), sorted(pedal))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Annotation":
        path = Path(path)
        if path.suffix.lower() in (".mid", ".midi"):
            return read_midi_annotation(path)
        return cls.from_json(json.loads(path.read_text()))


def read_midi_annotation(path: Union[str, Path]) -> Annotation:
    from .midi import read_midi
    notes, pedal = read_midi(Path(path).read_bytes())
    return Annotation(notes, pedal)


@dataclass
class FrameTargets:
    onset_seq: List[int]  # Onset tokens ascending by pitch, then EOS
    offset_slots: List[int]  # N_SLOTS entries; Offset(p) / BLANK, IGNORE for padding
    slot_pitches: List[int]  # pitches of the active slots, in slot order
    pedal_slot: int  # PEDAL_ON / PEDAL_OFF

    @property
    def slot_mask(self) -> List[bool]:
        return [t != IGNORE for t in self.offset_slots]

    @property
    def offsets(self) -> List[int]:
        return [p for p, t in zip(self.slot_pitches, self.offset_slots) if is_offset(t)]

    def mixed_seq(self, pedal: bool = True) -> List[int]:
        """Target sequence for the single-decoder ablation: onsets, offsets, pedal, EOS."""
        seq = self.onset_seq[:-1] + [offset(p) for p in sorted(self.offsets)]
        if pedal:
            seq.append(self.pedal_slot)
        return seq + [EOS]


class AnnotationRejected(ValueError):
    pass


@dataclass(frozen=True)
class _QNote:
    pitch: int
    on: int
    off: int


def quantize_notes(ann: Annotation) -> List[_QNote]:
    """Notes on the frame grid, with same-pitch overlaps resolved.

    An earlier note still sounding when the same pitch re-onsets is closed one
    frame before the new onset.
    """
    by_pitch: Dict[int, List[Tuple[int, int]]] = {}
    for p, a, b in ann.notes:
        on = time_to_frame(a)
        off = max(time_to_frame(b), on)
        by_pitch.setdefault(int(p), []).append((on, off))
    out = []
    for p, spans in by_pitch.items():
        spans.sort()
        for i, (on, off) in enumerate(spans):
            if i + 1 < len(spans) and off >= spans[i + 1][0] - 1:
                off = max(on, spans[i + 1][0] - 1)
            out.append(_QNote(p, on, off))
    out.sort(key=lambda n: (n.on, n.pitch))
    return out


def pedal_frames(ann: Annotation, n_frames: int) -> List[bool]:
    down = [False] * n_frames
    for a, b in ann.pedal:
        for t in range(max(0, time_to_frame(a)), min(n_frames, time_to_frame(b))):
            down[t] = True
    return down


class ActiveOnsetSet:
    """Sounding pitches ordered by (onset frame, pitch); one entry per pitch."""

    def __init__(self, entries: Sequence[Tuple[int, int]] = ()):
        self._entries: Dict[int, int] = {}
        for p, f in entries:
            self.insert(p, f)

    def insert(self, pitch: int, frame: int) -> None:
        if pitch in self._entries:
            raise ValueError(f"pitch {pitch} already active")
        self._entries[pitch] = frame

    def remove(self, pitch: int) -> int:
        return self._entries.pop(pitch)

    def __contains__(self, pitch: int) -> bool:
        return pitch in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def onset_frame(self, pitch: int) -> int:
        return self._entries[pitch]

    @property
    def entries(self) -> List[Tuple[int, int]]:
        return sorted(self._entries.items(), key=lambda e: (e[1], e[0]))

    @property
    def pitches(self) -> List[int]:
        return [p for p, _ in self.entries]

    def copy(self) -> "ActiveOnsetSet":
        s = ActiveOnsetSet()
        s._entries = dict(self._entries)
        return s


def ground_truth_active(notes: Sequence[_QNote], t: int) -> ActiveOnsetSet:
    """Notes sounding at frame t in the target sense: on <= t <= off + 1.

    A newer note of the same pitch replaces an older one.
    """
    active: Dict[int, _QNote] = {}
    for n in notes:
        if n.on <= t <= n.off + 1:
            prev = active.get(n.pitch)
            if prev is None or n.on > prev.on:
                active[n.pitch] = n
    return ActiveOnsetSet((p, n.on) for p, n in active.items())


def annotation_to_frame_targets(ann: Annotation, t: int, active: Optional[ActiveOnsetSet] = None,
                                n_frames: Optional[int] = None, n_slots: int = N_SLOTS,
                                notes: Optional[Sequence[_QNote]] = None) -> FrameTargets:
    """Targets for frame t. Every onset/offset is spread over its frame and the next."""
    notes = quantize_notes(ann) if notes is None else notes
    if active is None:
        active = ground_truth_active(notes, t)
    onsets = sorted({n.pitch for n in notes if n.on in (t, t - 1)})
    if len(onsets) > N_SEQ - 1:
        raise AnnotationRejected(f"{len(onsets)} simultaneous onsets at frame {t}")
    ending = {n.pitch for n in notes if n.off in (t, t - 1) and n.pitch in active
              and active.onset_frame(n.pitch) == n.on}
    pitches = active.pitches
    if len(pitches) > n_slots:
        raise AnnotationRejected(f"{len(pitches)} active notes at frame {t} (max {n_slots})")
    slots = [offset(p) if p in ending else BLANK for p in pitches]
    slots += [IGNORE] * (n_slots - len(slots))
    down = any(time_to_frame(a) <= t < time_to_frame(b) for a, b in ann.pedal)
    return FrameTargets([onset(p) for p in onsets] + [EOS], slots, pitches,
                        PEDAL_ON if down else PEDAL_OFF)


def build_targets(ann: Annotation, n_frames: int, n_slots: int = N_SLOTS) -> List[FrameTargets]:
    """Targets for every frame of a clip of `n_frames` frames."""
    notes = quantize_notes(ann)
    pedal = pedal_frames(ann, n_frames)
    starts: Dict[int, List[_QNote]] = {}
    for n in notes:
        starts.setdefault(n.on, []).append(n)
    onset_at: Dict[int, set] = {}
    offset_at: Dict[int, set] = {}
    for n in notes:
        for f in (n.on, n.on + 1):
            onset_at.setdefault(f, set()).add(n.pitch)
        for f in (n.off, n.off + 1):
            offset_at.setdefault(f, set()).add((n.pitch, n.on))
    live: Dict[int, _QNote] = {}
    out = []
    for t in range(n_frames):
        for n in starts.get(t, ()):  # newer note of a pitch replaces the older one
            live[n.pitch] = n
        active = ActiveOnsetSet((p, n.on) for p, n in live.items())
        pitches = active.pitches
        if len(pitches) > n_slots:
            raise AnnotationRejected(f"{len(pitches)} active notes at frame {t} (max {n_slots})")
        onsets = sorted(onset_at.get(t, ()))
        if len(onsets) > N_SEQ - 1:
            raise AnnotationRejected(f"{len(onsets)} simultaneous onsets at frame {t}")
        ends = offset_at.get(t, set())
        slots = [offset(p) if (p, live[p].on) in ends else BLANK for p in pitches]
        slots += [IGNORE] * (n_slots - len(slots))
        out.append(FrameTargets([onset(p) for p in onsets] + [EOS], slots, pitches,
                                PEDAL_ON if pedal[t] else PEDAL_OFF))
        for p in [p for p, n in live.items() if n.off + 1 <= t]:
            del live[p]
    # notes starting before frame 0 (e.g. crops) are not represented
    return out


def onset_history(targets: Sequence[FrameTargets], t: int, frames: int = HISTORY_FRAMES,
                  mixed: bool = False, pedal: bool = True) -> List[int]:
    """Concatenated sequences (each EOS-terminated) of the `frames` frames before t."""
    hist: List[int] = []
    for s in range(max(0, t - frames), t):
        hist.extend(targets[s].mixed_seq(pedal) if mixed else targets[s].onset_seq)
    return hist


def targets_to_events(targets: Sequence[FrameTargets]):
    """Oracle pass-through: turn targets into streamer-style frame events.

    Applies the keep-first rule for 2-frame spread events and only closes
    pitches that are active, exactly as the streamer does.
    """
    from .streamer import FrameEvents

    active = ActiveOnsetSet()
    last_on: Dict[int, int] = {}
    last_off: Dict[int, int] = {}
    events = []
    pedal_down = False
    for t, ft in enumerate(targets):
        forced, ons, offs = [], [], []
        for tok in ft.onset_seq[:-1]:
            p = pitch_of(tok)
            if last_on.get(p, -10) >= t - 2:
                continue
            if p in active:
                active.remove(p)
                forced.append(p)
                last_off[p] = t
            active.insert(p, t)
            last_on[p] = t
            ons.append(p)
        for p in ft.offsets:
            if p in active and last_off.get(p, -10) < t - 2:
                active.remove(p)
                last_off[p] = t
                offs.append(p)
        pedal_down = ft.pedal_slot == PEDAL_ON
        events.append(FrameEvents(t, ons, offs, pedal_down, forced_offsets=forced,
                                  is_final=(t == len(targets) - 1)))
    return events


def targets_round_trip(ann: Annotation, n_frames: Optional[int] = None) -> Annotation:
    from .assembler import assemble

    if n_frames is None:
        last = max([b for _, _, b in ann.notes] + [a for _, a, _ in ann.notes] + [0.0])
        n_frames = time_to_frame(last) + 3
    notes = assemble(targets_to_events(build_targets(ann, n_frames)))
    return Annotation([(n.pitch, n.onset_s, n.offset_s) for n in notes], list(ann.pedal))
