"""Frame-by-frame streaming transcription with onset/offset correspondence.

Each frame: decode onsets greedily until EOS, add the new pitches to the active
set, then ask the offset decoder about every active pitch (and the pedal).
Offsets can only ever be emitted for pitches in the active set.
"""

from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Optional, Union

import numpy as np

from . import vocab as V
from .features import DB_FLOOR, HOP, N_BINS, SAMPLE_RATE
from .vocab import ActiveOnsetSet

FRAME_PERIOD = HOP / SAMPLE_RATE
DEDUPE_FRAMES = 2


@dataclass
class FrameEvents:
    t: int
    onsets: List[int] = field(default_factory=list)
    offsets: List[int] = field(default_factory=list)
    pedal: Optional[bool] = None
    forced_offsets: List[int] = field(default_factory=list)
    is_final: bool = False

    @property
    def time(self) -> float:
        return self.t * FRAME_PERIOD

    def key(self):
        return (self.t, tuple(self.onsets), tuple(self.offsets), self.pedal,
                tuple(self.forced_offsets), self.is_final)


class Pending:
    """Returned by `step` while the future-context buffer is filling."""

    def __repr__(self):
        return "Pending"


PENDING = Pending()


@dataclass
class StreamState:
    model: object
    active: ActiveOnsetSet = field(default_factory=ActiveOnsetSet)
    frame_index: int = 0  # next frame to emit
    arrivals: int = 0
    pedal_down: bool = False
    last_onset: Dict[int, int] = field(default_factory=dict)
    last_offset: Dict[int, int] = field(default_factory=dict)
    history: Deque[List[int]] = field(default_factory=deque)
    buffer: Deque[np.ndarray] = field(default_factory=deque)
    first_frame: Optional[np.ndarray] = None
    anomalies: Counter = field(default_factory=Counter)
    onsets_emitted: int = 0
    offsets_emitted: int = 0
    future_frames: int = 19

    @property
    def config(self):
        return self.model.config


def latency(config=None, future_frames: Optional[int] = None) -> float:
    """Algorithmic latency in seconds: future context frames times the hop."""
    if future_frames is None:
        future_frames = getattr(config, "future_frames", 19) if config is not None else 19
    return future_frames * HOP / SAMPLE_RATE


def init_stream(model, future_frames: Optional[int] = None) -> StreamState:
    cfg = model.config
    ff = cfg.future_frames if future_frames is None else future_frames
    if not 0 <= ff < cfg.window_m:
        raise ValueError(f"future_frames must be in [0, {cfg.window_m})")
    return StreamState(model=model, future_frames=ff,
                       history=deque(maxlen=cfg.history_frames),
                       buffer=deque(maxlen=cfg.window_m))


def _silence(n_bins: int = N_BINS) -> np.ndarray:
    return np.full(n_bins, DB_FLOOR, dtype=np.float32)


def _stream_window(state: StreamState, t: int) -> np.ndarray:
    cfg = state.config
    past = cfg.window_m - 1 - state.future_frames
    newest = state.arrivals - 1
    oldest_buffered = newest - len(state.buffer) + 1
    rows = []
    silence = None
    for i in range(t - past, t + state.future_frames + 1):
        if i < 0:
            rows.append(state.first_frame)
        elif i > newest:
            if silence is None:
                silence = _silence(len(state.first_frame))
            rows.append(silence)
        else:
            rows.append(state.buffer[i - oldest_buffered])
    return np.stack(rows)


def step(state: StreamState, new_frame) -> Union[FrameEvents, Pending]:
    """Feed one feature frame; returns events for frame (arrival - future_frames)."""
    frame = np.asarray(new_frame, dtype=np.float32).reshape(-1)
    if state.first_frame is None:
        state.first_frame = frame.copy()
    state.buffer.append(frame)
    state.arrivals += 1
    t = state.arrivals - 1 - state.future_frames
    if t < 0:
        return PENDING
    return decode_frame(state, t, _stream_window(state, t))


def flush(state: StreamState) -> List[FrameEvents]:
    """Decode the frames still waiting for future context, padding with silence."""
    out = []
    while state.frame_index < state.arrivals:
        t = state.frame_index
        out.append(decode_frame(state, t, _stream_window(state, t)))
    if out:
        out[-1].is_final = True
    return out


def _greedy_sequence(state: StreamState, enc, allowed) -> List[int]:
    cfg = state.config
    history = [tok for seq in state.history for tok in seq]
    prefix = [V.BOS]
    while len(prefix) < cfg.n_seq:
        logits = state.model.onset_decoder_step(enc, prefix, history)
        tok = int(np.argmax(logits))
        if tok == V.EOS:
            break
        if not allowed(tok):
            state.anomalies["onset_decoder"] += 1
            break
        prefix.append(tok)
    return prefix[1:]


def _mixed_allowed(tok: int) -> bool:
    return V.is_onset(tok) or V.is_offset(tok) or tok in (V.PEDAL_ON, V.PEDAL_OFF)


def decode_frame(state: StreamState, t: int, window: np.ndarray) -> FrameEvents:
    """One iteration of the streaming loop for frame t with its feature window."""
    if t != state.frame_index:
        raise ValueError(f"frame {t} decoded out of order (expected {state.frame_index})")
    cfg = state.config
    model = state.model
    enc = model.encode_window(window)
    ev = FrameEvents(t)

    if cfg.single_decoder:
        seq = _greedy_sequence(state, enc, _mixed_allowed)
        onset_pitches = [V.pitch_of(x) for x in seq if V.is_onset(x)]
        offset_cands = [V.pitch_of(x) for x in seq if V.is_offset(x)]
        pedal_toks = [x for x in seq if x in (V.PEDAL_ON, V.PEDAL_OFF)]
    else:
        seq = _greedy_sequence(state, enc, V.is_onset)
        onset_pitches = [V.pitch_of(x) for x in seq]
        offset_cands, pedal_toks = None, []
    state.history.append(seq + [V.EOS])

    seen = set()
    for p in onset_pitches:
        if p in seen or state.last_onset.get(p, -10 ** 9) >= t - DEDUPE_FRAMES:
            continue
        seen.add(p)
        if p in state.active:
            # re-onset of a sounding pitch closes the old note first
            state.active.remove(p)
            state.last_offset[p] = t
            state.offsets_emitted += 1
            ev.forced_offsets.append(p)
        state.active.insert(p, t)
        state.last_onset[p] = t
        state.onsets_emitted += 1
        ev.onsets.append(p)

    if offset_cands is None:
        offset_cands, pedal_tok = _predict_offsets(state, enc)
        if pedal_tok is not None:
            pedal_toks = [pedal_tok]
    for p in offset_cands:
        if p not in state.active:
            if cfg.single_decoder:
                state.anomalies["inactive_offset"] += 1
            continue
        if state.last_offset.get(p, -10 ** 9) >= t - DEDUPE_FRAMES:
            continue
        state.active.remove(p)
        state.last_offset[p] = t
        state.offsets_emitted += 1
        ev.offsets.append(p)

    if cfg.pedal_enabled:
        if pedal_toks:
            state.pedal_down = pedal_toks[-1] == V.PEDAL_ON
        ev.pedal = state.pedal_down
    state.frame_index += 1
    return ev


def _predict_offsets(state: StreamState, enc):
    cfg = state.config
    pitches = state.active.pitches
    chunks = [pitches[i:i + cfg.n_slots] for i in range(0, len(pitches), cfg.n_slots)]
    if not chunks and cfg.pedal_enabled:
        chunks = [[]]
    ended, pedal_tok = [], None
    for j, chunk in enumerate(chunks):
        slot_logits, pedal_logits = state.model.offset_decoder_predict(enc, [V.onset(p) for p in chunk])
        for p, logits in zip(chunk, slot_logits):
            tok = int(np.argmax(logits))
            if tok == V.offset(p):
                ended.append(p)
            elif tok != V.BLANK:
                state.anomalies["offset_slot"] += 1
        if j == 0 and pedal_logits is not None:
            tok = int(np.argmax(pedal_logits))
            if tok in (V.PEDAL_ON, V.PEDAL_OFF):
                pedal_tok = tok
            else:
                state.anomalies["pedal_slot"] += 1
    return ended, pedal_tok


def run_offline(features, model, future_frames: Optional[int] = None) -> List[FrameEvents]:
    """Decode a whole feature matrix in one pass (reference path for streaming)."""
    frames = np.asarray(getattr(features, "frames", features), dtype=np.float32)
    state = init_stream(model, future_frames)
    T = frames.shape[0]
    if T == 0:
        return []
    cfg = model.config
    past = cfg.window_m - 1 - state.future_frames
    padded = np.concatenate([np.repeat(frames[:1], past, axis=0), frames,
                             np.tile(_silence(frames.shape[1]), (state.future_frames, 1))])
    out = [decode_frame(state, t, padded[t:t + cfg.window_m]) for t in range(T)]
    out[-1].is_final = True
    return out


def run_stream(frames: Iterable, model, future_frames: Optional[int] = None) -> List[FrameEvents]:
    state = init_stream(model, future_frames)
    out = []
    for f in frames:
        ev = step(state, f)
        if isinstance(ev, FrameEvents):
            out.append(ev)
    return out + flush(state)


def events_to_records(events: Iterable[FrameEvents]) -> List[dict]:
    """Flatten frame events into JSON-ready event records, pedal changes included."""
    records = []
    pedal = False
    for ev in events:
        t = round(ev.t * FRAME_PERIOD, 6)
        for p in ev.forced_offsets:
            records.append({"t": t, "type": "off", "pitch": p})
        for p in ev.onsets:
            records.append({"t": t, "type": "on", "pitch": p})
        for p in ev.offsets:
            records.append({"t": t, "type": "off", "pitch": p})
        if ev.pedal is not None and ev.pedal != pedal:
            records.append({"t": t, "type": "pedal_on" if ev.pedal else "pedal_off"})
            pedal = ev.pedal
    return records


def write_jsonl(records: Iterable[dict], fh) -> None:
    for r in records:
        fh.write(json.dumps(r) + "\n")
