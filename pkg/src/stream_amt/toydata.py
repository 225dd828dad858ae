"""Synthetic piano-like clips with exact annotations, for desk-scale training.

Notes are sums of 8 exponentially decaying harmonics. A key released while the
sustain pedal is down keeps ringing until the pedal lifts, and the annotation
records that audible (pedal-extended) offset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .features import SAMPLE_RATE, write_wav
from .vocab import Annotation

N_HARMONICS = 8
RELEASE_TAU = 0.01
SAME_PITCH_GAP = 0.1


@dataclass
class ToyClip:
    name: str
    audio: np.ndarray
    annotation: Annotation


def midi_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def decay_constant(pitch: int) -> float:
    """Low register rings longer (about 2 s at A0, 0.4 s at C8)."""
    return 0.4 + 1.6 * (108 - pitch) / 87.0


def render_note(pitch: int, onset: float, offset: float, amp: float, phases: np.ndarray,
                n_samples: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    out = np.zeros(n_samples)
    start = int(round(onset * sr))
    stop = min(n_samples, int(round((offset + 8 * RELEASE_TAU) * sr)))
    if stop <= start:
        return out
    t = np.arange(stop - start) / sr
    env = amp * np.exp(-t / decay_constant(pitch))
    env *= np.minimum(1.0, t / 0.005)
    held = offset - onset
    env *= np.where(t > held, np.exp(-(t - held) / RELEASE_TAU), 1.0)
    f0 = midi_to_hz(pitch)
    tone = np.zeros_like(t)
    for k in range(1, N_HARMONICS + 1):
        if k * f0 >= 0.475 * sr:
            break
        tone += np.sin(2 * np.pi * k * f0 * t + phases[k - 1]) / k
    out[start:stop] = env * tone
    return out


def _sustained(release: float, pedal, limit: float) -> float:
    for a, b in pedal:
        if a <= release < b:
            return min(b, limit)
    return release


def random_annotation(rng: np.random.Generator, duration: float, polyphony_max: int,
                      notes_per_second: float = 3.0, pedal_prob: float = 0.5,
                      pitch_range=(21, 108)) -> Annotation:
    limit = duration - 0.1
    pedal = []
    if rng.random() < pedal_prob:
        t = rng.uniform(0.2, max(0.3, duration / 2))
        while t < limit - 0.3 and len(pedal) < 3:
            up = min(limit, t + rng.uniform(0.5, 2.0))
            pedal.append((round(t, 3), round(up, 3)))
            t = up + rng.uniform(0.3, 1.5)
    n_cand = max(1, int(duration * notes_per_second * 1.5))
    onsets = np.sort(rng.uniform(0.05, max(0.06, limit - 0.2), n_cand))
    accepted = []
    for on in onsets:
        pitch = int(rng.integers(pitch_range[0], pitch_range[1] + 1))
        release = min(limit, on + rng.uniform(0.1, 2.0))
        on = round(float(on), 3)
        off = round(_sustained(release, pedal, limit), 3)
        if off - on < 0.1:
            continue
        overlapping = [n for n in accepted if n[1] < off and on < n[2]]
        if len(overlapping) >= polyphony_max:
            continue
        if any(n[0] == pitch and n[1] < off + SAME_PITCH_GAP and on < n[2] + SAME_PITCH_GAP
               for n in accepted):
            continue
        accepted.append((pitch, on, off))
        if len(accepted) >= duration * notes_per_second:
            break
    accepted.sort(key=lambda n: (n[1], n[0]))
    return Annotation(accepted, pedal)


def render_annotation(ann: Annotation, duration: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration * SAMPLE_RATE))
    mix = np.zeros(n)
    for pitch, on, off in ann.notes:
        amp = rng.uniform(0.3, 1.0)
        phases = rng.uniform(0, 2 * np.pi, N_HARMONICS)
        mix += render_note(pitch, on, off, amp, phases, n)
    peak = np.abs(mix).max()
    if peak > 0:
        mix *= 0.5 / peak
    return mix.astype(np.float32)


def make_toy_dataset(seed: int, n_clips: int, polyphony_max: int = 3, duration: float = 4.0,
                     notes_per_second: float = 3.0) -> List[ToyClip]:
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        ann = random_annotation(rng, duration, polyphony_max, notes_per_second)
        audio = render_annotation(ann, duration, rng)
        clips.append(ToyClip(f"toy_{i:04d}", audio, ann))
    return clips


def write_toy_dataset(out_dir: Union[str, Path], seed: int, n_clips: int, polyphony_max: int = 3,
                      duration: float = 4.0, val_clips: int = 0) -> Path:
    """Write WAVs, annotation JSONs and a manifest; regeneration is byte-identical."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, clip in enumerate(make_toy_dataset(seed, n_clips, polyphony_max, duration)):
        wav = out / "clips" / f"{clip.name}.wav"
        js = out / "clips" / f"{clip.name}.json"
        write_wav(wav, clip.audio)
        clip.annotation.save(js)
        split = "validation" if i >= n_clips - val_clips else "train"
        entries.append({"audio": f"clips/{wav.name}", "annotation": f"clips/{js.name}", "split": split})
    (out / "manifest.json").write_text(json.dumps(entries, indent=1))
    return out
