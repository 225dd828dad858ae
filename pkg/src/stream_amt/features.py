"""Constant-Q front end: 16 kHz audio to 352-bin dB frames at a 20 ms hop.

Batch (`compute_cqt`) and streaming (`FrameStreamer`, `stream_frames`) share one
per-frame arithmetic path so that streamed rows are bit-identical to batch rows
computed with the same dB reference.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Union

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 16000
HOP = 320
N_BINS = 352
BINS_PER_OCTAVE = 48
F_MIN = 27.5
MAX_KERNEL = 2048
DB_FLOOR = -80.0

FEATURE_MAGIC = b"CQTF"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class CqtConfig:
    f_min: float = F_MIN
    bins_per_octave: int = BINS_PER_OCTAVE
    n_bins: int = N_BINS
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    db_floor: float = DB_FLOOR
    max_kernel: int = MAX_KERNEL
    truncate: bool = True

    def validate(self) -> None:
        if self.n_bins != N_BINS:
            raise ValueError(f"n_bins must be {N_BINS}, got {self.n_bins}")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if self.hop * 50 != self.sample_rate:
            raise ValueError(f"hop must give a 20 ms frame period, got hop={self.hop}")
        if self.max_kernel % 2:
            raise ValueError("max_kernel must be even")
        if self.db_floor >= 0:
            raise ValueError("db_floor must be negative")
        top = self.center_frequency(self.n_bins - 1)
        if top >= self.sample_rate / 2:
            raise ValueError(f"top bin {top:.1f} Hz is above Nyquist")
        if not self.truncate and self.kernel_length(0) > self.max_kernel:
            raise ValueError(
                f"lowest-bin kernel ({self.kernel_length(0)} samples) exceeds "
                f"max_kernel={self.max_kernel} and truncation is disabled"
            )

    @property
    def q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    @property
    def frame_period(self) -> float:
        return self.hop / self.sample_rate

    def center_frequency(self, b: int) -> float:
        return self.f_min * 2.0 ** (b / self.bins_per_octave)

    def kernel_length(self, b: int) -> int:
        """Untruncated kernel length for bin `b`, in samples."""
        return int(math.ceil(self.q * self.sample_rate / self.center_frequency(b)))


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            self.samples = resample(self.samples, self.sample_rate, SAMPLE_RATE)
            self.sample_rate = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, 352) float32 dB
    frame_period: float = HOP / SAMPLE_RATE

    def __len__(self) -> int:
        return self.frames.shape[0]


class CqtKernelBank:
    """Immutable bank of per-bin complex kernels laid out on a common window.

    Kernels are centered in a `max_kernel`-sample window, so every bin reads the
    same hop-aligned centered segment. `matrix` stacks real parts over imaginary
    parts, shape (2 * n_bins, max_kernel).
    """

    def __init__(self, config: CqtConfig):
        config.validate()
        self.config = config
        width = config.max_kernel
        half = width // 2
        real = np.zeros((config.n_bins, width))
        imag = np.zeros((config.n_bins, width))
        self.frequencies = np.array([config.center_frequency(b) for b in range(config.n_bins)])
        self.lengths = np.zeros(config.n_bins, dtype=int)
        for b, freq in enumerate(self.frequencies):
            n = min(config.kernel_length(b), width)
            self.lengths[b] = n
            window = np.hanning(n)
            window /= window.sum()
            # sample offsets relative to the frame center
            offsets = np.arange(n) - n // 2
            phase = -2.0 * np.pi * freq * offsets / config.sample_rate
            start = half - n // 2
            real[b, start:start + n] = window * np.cos(phase)
            imag[b, start:start + n] = window * np.sin(phase)
        self.matrix = np.concatenate([real, imag], axis=0)
        self.matrix.setflags(write=False)

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def magnitudes(self, segment: np.ndarray) -> np.ndarray:
        """CQT magnitudes of one centered segment of `width` samples."""
        z = self.matrix @ segment
        n = self.config.n_bins
        return np.hypot(z[:n], z[n:])


_BANKS: dict = {}


def build_cqt_kernels(config: Optional[CqtConfig] = None) -> CqtKernelBank:
    config = config or CqtConfig()
    bank = _BANKS.get(config)
    if bank is None:
        bank = _BANKS[config] = CqtKernelBank(config)
    return bank


def amplitude_to_db(magnitudes, ref: Optional[float] = None, db_floor: float = DB_FLOOR) -> np.ndarray:
    """20*log10(m / ref), clamped below at `db_floor`.

    `ref=None` uses the maximum of `magnitudes` (1.0 when that maximum is 0).
    """
    m = np.asarray(magnitudes, dtype=np.float64)
    if ref is None:
        ref = float(m.max()) if m.size and m.max() > 0 else 1.0
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(m / ref)
    return np.maximum(db, db_floor)


def num_frames(num_samples: int, hop: int = HOP) -> int:
    if num_samples == 0:
        return 0
    return num_samples // hop + 1


def _padded_signal(x: np.ndarray, n_frames: int, config: CqtConfig) -> np.ndarray:
    half = config.max_kernel // 2
    left = np.pad(x, (half, 0), mode="reflect") if len(x) > 1 else np.pad(x, (half, 0), mode="edge")
    need = (n_frames - 1) * config.hop + config.max_kernel
    right = max(0, need - len(left))
    return np.concatenate([left, np.zeros(right)])


def _frame_db(bank: CqtKernelBank, segment: np.ndarray, ref: float) -> np.ndarray:
    db = amplitude_to_db(bank.magnitudes(segment), ref=ref, db_floor=bank.config.db_floor)
    return db.astype(np.float32)


def compute_cqt(clip: Union[AudioClip, np.ndarray], config: Optional[CqtConfig] = None,
                reference: Union[str, float] = "max") -> FeatureSequence:
    """Batch CQT of a whole clip.

    Frames are centered on multiples of the hop (reflection padding at the
    start, zeros past the end), so T = n // hop + 1 for n > 0 and T = 0 for an
    empty clip. `reference="max"` normalizes to the loudest bin of the clip; a
    float gives a fixed reference (streaming uses 1.0).
    """
    config = config or CqtConfig()
    bank = build_cqt_kernels(config)
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    T = num_frames(len(x), config.hop)
    if T == 0:
        return FeatureSequence(np.zeros((0, config.n_bins), dtype=np.float32), config.frame_period)
    padded = _padded_signal(x, T, config)
    width = bank.width
    if reference == "max":
        mags = [bank.magnitudes(padded[t * config.hop:t * config.hop + width]) for t in range(T)]
        peak = max(float(m.max()) for m in mags)
        ref = peak if peak > 0 else 1.0
        rows = [amplitude_to_db(m, ref=ref, db_floor=config.db_floor).astype(np.float32) for m in mags]
    else:
        ref = float(reference)
        rows = [_frame_db(bank, padded[t * config.hop:t * config.hop + width], ref) for t in range(T)]
    return FeatureSequence(np.stack(rows), config.frame_period)


class RingBuffer:
    """Fixed-capacity circular sample buffer addressed by absolute sample index."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._data = np.zeros(capacity)
        self.end = 0  # absolute index one past the newest sample

    @property
    def start(self) -> int:
        return max(0, self.end - self.capacity)

    def write(self, x: np.ndarray) -> None:
        if len(x) > self.capacity:
            raise ValueError("write larger than ring buffer capacity")
        pos = self.end % self.capacity
        first = min(len(x), self.capacity - pos)
        self._data[pos:pos + first] = x[:first]
        self._data[:len(x) - first] = x[first:]
        self.end += len(x)

    def read(self, start: int, stop: int) -> np.ndarray:
        if start < self.start or stop > self.end:
            raise IndexError(f"[{start}, {stop}) not in buffer [{self.start}, {self.end})")
        idx = np.arange(start, stop) % self.capacity
        return self._data[idx]


class FrameStreamer:
    """Incremental CQT: push arbitrary-sized chunks, receive completed frames.

    Uses a fixed dB reference (default 1.0 full scale) because future peaks are
    unknown; rows equal `compute_cqt(..., reference=ref)` bit for bit.
    """

    def __init__(self, config: Optional[CqtConfig] = None, ref: float = 1.0):
        self.config = config or CqtConfig()
        self.bank = build_cqt_kernels(self.config)
        self.ref = ref
        self.half = self.bank.width // 2
        self.ring = RingBuffer(self.bank.width + self.config.hop)
        self._head = np.zeros(0)  # first `width` samples, for start reflection
        self.next_frame = 0
        self.finished = False

    @property
    def samples_seen(self) -> int:
        return self.ring.end

    def _ready(self, t: int) -> bool:
        stop = t * self.config.hop + self.half
        return self.ring.end >= stop and self.ring.end >= self.half + 1

    def _segment(self, t: int) -> np.ndarray:
        center = t * self.config.hop
        start, stop = center - self.half, center + self.half
        if start >= 0:
            return self.ring.read(start, stop)
        reflected = np.pad(self._head, (self.half, 0), mode="reflect")[start + self.half:self.half]
        return np.concatenate([reflected, self._head[:stop]])

    def _emit_ready(self) -> List[np.ndarray]:
        out = []
        while self._ready(self.next_frame):
            out.append(_frame_db(self.bank, self._segment(self.next_frame), self.ref))
            self.next_frame += 1
        return out

    def push(self, chunk) -> List[np.ndarray]:
        if self.finished:
            raise RuntimeError("stream already finished")
        chunk = np.asarray(chunk, dtype=np.float64).reshape(-1)
        out: List[np.ndarray] = []
        step = self.config.hop
        for i in range(0, len(chunk), step):
            piece = chunk[i:i + step]
            if len(self._head) < self.bank.width:
                self._head = np.concatenate([self._head, piece])[:self.bank.width]
            self.ring.write(piece)
            out.extend(self._emit_ready())
        return out

    def finish(self) -> List[np.ndarray]:
        """Flush the tail with zero padding; returns the remaining frames."""
        self.finished = True
        n = self.ring.end
        T = num_frames(n, self.config.hop)
        out = []
        if T == 0:
            return out
        if n <= self.half:
            # whole signal still in memory; pad exactly as the batch path does
            padded = _padded_signal(self._head[:n], T, self.config)
            for t in range(self.next_frame, T):
                seg = padded[t * self.config.hop:t * self.config.hop + self.bank.width]
                out.append(_frame_db(self.bank, seg, self.ref))
            self.next_frame = T
            return out
        for t in range(self.next_frame, T):
            center = t * self.config.hop
            avail_stop = min(center + self.half, n)
            if center - self.half >= 0:
                seg = self.ring.read(center - self.half, avail_stop)
            else:
                seg = self._segment_partial(t, avail_stop)
            seg = np.concatenate([seg, np.zeros(self.bank.width - len(seg))])
            out.append(_frame_db(self.bank, seg, self.ref))
        self.next_frame = T
        return out

    def _segment_partial(self, t: int, stop: int) -> np.ndarray:
        center = t * self.config.hop
        reflected = np.pad(self._head, (self.half, 0), mode="reflect")[center:self.half]
        return np.concatenate([reflected, self._head[:stop]])


@dataclass
class StreamFrame:
    index: int
    values: np.ndarray
    is_final: bool = False


def stream_frames(chunks: Iterable, config: Optional[CqtConfig] = None,
                  ref: float = 1.0) -> Iterator[StreamFrame]:
    """Yield frames as soon as their centered window is complete."""
    fs = FrameStreamer(config, ref=ref)
    index = 0
    for chunk in chunks:
        for row in fs.push(chunk):
            yield StreamFrame(index, row)
            index += 1
    tail = fs.finish()
    for i, row in enumerate(tail):
        yield StreamFrame(index, row, is_final=(i == len(tail) - 1))
        index += 1


def resample(x: np.ndarray, orig_sr: int, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    if orig_sr == target_sr:
        return np.asarray(x, dtype=np.float64)
    g = math.gcd(int(orig_sr), int(target_sr))
    return signal.resample_poly(np.asarray(x, dtype=np.float64), target_sr // g, orig_sr // g)


def load_wav(path: Union[str, Path]) -> AudioClip:
    """Read PCM16/24/32 or float WAV, downmix to mono, resample to 16 kHz."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-aligns 24-bit PCM in int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, sr)


def write_wav(path: Union[str, Path], samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    wavfile.write(str(path), sample_rate, np.asarray(samples, dtype=np.float32))


def write_feature_dump(path: Union[str, Path], features: FeatureSequence, hop: int = HOP) -> None:
    frames = np.ascontiguousarray(features.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, frames.shape[1], hop))
        f.write(frames.tobytes())


def read_feature_dump(path: Union[str, Path]) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a CQTF feature dump")
    version, n_bins, hop = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature dump version {version}")
    body = raw[16:]
    if len(body) % (4 * n_bins):
        raise ValueError(f"{path}: truncated feature dump")
    frames = np.frombuffer(body, dtype="<f4").reshape(-1, n_bins).astype(np.float32)
    return FeatureSequence(frames, hop / SAMPLE_RATE)
