"""Minimal Standard MIDI File reader/writer (format 0/1), notes and sustain pedal only."""

from __future__ import annotations

import struct
from typing import Dict, List, Sequence, Tuple

TICKS_PER_QUARTER = 480
DEFAULT_TEMPO = 500000  # microseconds per quarter (120 BPM)
SUSTAIN_CC = 64
DEFAULT_VELOCITY = 64


class MidiError(ValueError):
    pass


def _read_varlen(data: bytes, pos: int) -> Tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= len(data):
            raise MidiError("truncated variable-length quantity")
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiError("variable-length quantity too long")


def _write_varlen(value: int) -> bytes:
    if value < 0:
        raise MidiError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _chunks(data: bytes):
    pos = 0
    while pos + 8 <= len(data):
        kind = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + length]
        if len(body) != length:
            raise MidiError("truncated chunk")
        yield kind, body
        pos += 8 + length


def _parse_track(body: bytes):
    """Yield (abs_tick, kind, payload) with kind in {'note_on','note_off','cc','tempo'}."""
    pos, tick, status = 0, 0, None
    while pos < len(body):
        delta, pos = _read_varlen(body, pos)
        tick += delta
        b = body[pos]
        if b == 0xFF:
            meta = body[pos + 1]
            length, pos = _read_varlen(body, pos + 2)
            payload = body[pos:pos + length]
            pos += length
            if meta == 0x51 and length == 3:
                yield tick, "tempo", int.from_bytes(payload, "big")
            elif meta == 0x2F:
                return
            continue
        if b in (0xF0, 0xF7):
            length, pos = _read_varlen(body, pos + 1)
            pos += length
            continue
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise MidiError("running status without a previous status byte")
        kind = status & 0xF0
        n = 1 if kind in (0xC0, 0xD0) else 2
        args = body[pos:pos + n]
        pos += n
        if kind == 0x90 and args[1] > 0:
            yield tick, "note_on", (status & 0x0F, args[0])
        elif kind == 0x80 or kind == 0x90:
            yield tick, "note_off", (status & 0x0F, args[0])
        elif kind == 0xB0:
            yield tick, "cc", (status & 0x0F, args[0], args[1])


def read_midi(data: bytes):
    """Parse SMF bytes into (notes, pedal_intervals) in seconds.

    Velocity-0 note-ons are note-offs; CC64 >= 64 is pedal down.
    """
    chunks = list(_chunks(data))
    if not chunks or chunks[0][0] != b"MThd":
        raise MidiError("missing MThd header")
    fmt, ntracks, division = struct.unpack(">HHH", chunks[0][1][:6])
    if fmt not in (0, 1):
        raise MidiError(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise MidiError("SMPTE time division is not supported")
    events = []
    for i, (kind, body) in enumerate(c for c in chunks[1:] if c[0] == b"MTrk"):
        for order, (tick, ev, payload) in enumerate(_parse_track(body)):
            events.append((tick, i, order, ev, payload))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    tempo_ticks = [(0, DEFAULT_TEMPO)]
    for tick, _, _, ev, payload in events:
        if ev == "tempo":
            if tempo_ticks[-1][0] == tick:
                tempo_ticks[-1] = (tick, payload)
            else:
                tempo_ticks.append((tick, payload))
    anchors = []  # (tick, seconds, tempo)
    sec = 0.0
    for j, (tick, tempo) in enumerate(tempo_ticks):
        if j:
            prev_tick, prev_sec, prev_tempo = anchors[-1]
            sec = prev_sec + (tick - prev_tick) * prev_tempo / 1e6 / division
        anchors.append((tick, sec, tempo))

    def seconds(tick: int) -> float:
        a = anchors[0]
        for cand in anchors:
            if cand[0] <= tick:
                a = cand
            else:
                break
        return a[1] + (tick - a[0]) * a[2] / 1e6 / division

    notes: List[Tuple[int, float, float]] = []
    open_notes: Dict[Tuple[int, int], List[float]] = {}
    pedal: List[Tuple[float, float]] = []
    pedal_down = None
    for tick, _, _, ev, payload in events:
        t = seconds(tick)
        if ev == "note_on":
            open_notes.setdefault(payload, []).append(t)
        elif ev == "note_off":
            starts = open_notes.get(payload)
            if starts:
                start = starts.pop(0)
                if t > start:
                    notes.append((payload[1], start, t))
        elif ev == "cc" and payload[1] == SUSTAIN_CC:
            down = payload[2] >= 64
            if down and pedal_down is None:
                pedal_down = t
            elif not down and pedal_down is not None:
                if t > pedal_down:
                    pedal.append((pedal_down, t))
                pedal_down = None
    notes.sort(key=lambda n: (n[1], n[0]))
    return notes, pedal


def write_midi(notes: Sequence[Tuple[int, float, float]], pedal: Sequence[Tuple[float, float]] = (),
               velocity: int = DEFAULT_VELOCITY) -> bytes:
    """Format-0 SMF, 480 ticks per quarter at 120 BPM (one tick = 1/960 s)."""
    ticks_per_second = TICKS_PER_QUARTER * 1e6 / DEFAULT_TEMPO
    by_pitch: Dict[int, List[Tuple[float, float]]] = {}
    for p, a, b in notes:
        if not 0 <= p < 128:
            raise MidiError(f"pitch out of range: {p}")
        if not b > a:
            raise MidiError(f"note {p} has non-positive duration")
        by_pitch.setdefault(p, []).append((a, b))
    for p, spans in by_pitch.items():
        spans.sort()
        for (a0, b0), (a1, _) in zip(spans, spans[1:]):
            if a1 < b0:
                raise MidiError(f"overlapping notes for pitch {p} at {a1:.3f}s")

    # (tick, priority, bytes); offs sort before ons at equal ticks
    events = []
    for p, a, b in notes:
        events.append((round(a * ticks_per_second), 1, bytes([0x90, p, velocity])))
        events.append((round(b * ticks_per_second), 0, bytes([0x80, p, 0])))
    for a, b in pedal:
        events.append((round(a * ticks_per_second), 1, bytes([0xB0, SUSTAIN_CC, 127])))
        events.append((round(b * ticks_per_second), 0, bytes([0xB0, SUSTAIN_CC, 0])))
    events.sort(key=lambda e: (e[0], e[1], e[2]))

    track = bytearray(b"\x00\xFF\x51\x03" + DEFAULT_TEMPO.to_bytes(3, "big"))
    last = 0
    for tick, _, msg in events:
        track += _write_varlen(tick - last) + msg
        last = tick
    track += b"\x00\xFF\x2F\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, TICKS_PER_QUARTER)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)
