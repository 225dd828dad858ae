"""CNN encoder over a 39-frame window and two transformer decoders.

The encoder maps a window of CQT frames to an (f_h, d_enc) frequency-axis
sequence for the window's center frame. The onset decoder is autoregressive
(causal self-attention over previous frames' onset tokens plus the current
prefix); the offset decoder scores every active slot in one shot, with an
optional pedal query slot in front.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import vocab as V
from .features import DB_FLOOR, N_BINS

CKPT_MAGIC = b"SAMT"
CKPT_VERSION = 1


def harmonic_dilations(bins_per_octave: int = 48, n_harmonics: int = 8) -> List[int]:
    """Bin offsets of harmonics 1..n on a log-frequency axis."""
    return [int(round(bins_per_octave * math.log2(k))) for k in range(1, n_harmonics + 1)]


@dataclass
class ModelConfig:
    window_m: int = 39
    future_frames: int = 19
    n_bins: int = N_BINS
    enc_channels: Tuple[int, int, int] = (16, 64, 64)  # 7x7 stack, harmonic conv, 5x3 stack
    n_harmonics: int = 8
    f_h: int = 88
    d_enc: int = 128
    d_dec: int = 256
    n_layers: int = 6
    n_heads: int = 8
    d_mlp: int = 1024
    n_seq: int = V.N_SEQ
    n_slots: int = V.N_SLOTS
    history_frames: int = V.HISTORY_FRAMES
    dropout: float = 0.1
    pedal_enabled: bool = True
    single_decoder: bool = False
    pitch_code: bool = True  # note tokens share the encoder's frequency-position code

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(enc_channels=(8, 16, 16), d_enc=64, d_dec=64, n_layers=2, n_heads=4, d_mlp=256)
        base.update(overrides)
        return cls(**base)

    @property
    def receptive_field(self) -> int:
        # three 7-tall convs, one 1-tall harmonic conv, five 5-tall convs
        return 1 + 3 * (7 - 1) + 0 + 5 * (5 - 1)

    @property
    def past_frames(self) -> int:
        return self.window_m - 1 - self.future_frames

    def validate(self) -> None:
        if self.window_m % 2 == 0:
            raise ValueError("window_m must be odd")
        if self.window_m != self.receptive_field:
            raise ValueError(f"window_m={self.window_m} must equal the encoder receptive field "
                             f"({self.receptive_field})")
        if not 0 <= self.future_frames < self.window_m:
            raise ValueError("future_frames must be in [0, window_m)")
        if self.d_dec % self.n_heads:
            raise ValueError("d_dec must be divisible by n_heads")
        if self.n_seq < 2:
            raise ValueError("n_seq must be >= 2")
        if self.n_slots < 1:
            raise ValueError("n_slots must be >= 1")
        if self.f_h * 4 != self.n_bins:
            raise ValueError("f_h must be n_bins / 4 (semitone pooling)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.float()


class HarmonicDilatedConv(nn.Module):
    """Sum of 1x3 frequency convolutions dilated to the harmonic bin offsets."""

    def __init__(self, c_in: int, c_out: int, dilations: Sequence[int]):
        super().__init__()
        self.dilations = [max(1, d) for d in dilations]
        self.branches = nn.ModuleList(
            nn.Conv2d(c_in, c_out, (1, 3), padding=(0, d), dilation=(1, d)) for d in self.dilations
        )

    def forward(self, x):
        return sum(b(x) for b in self.branches)


class Encoder(nn.Module):
    """Time-valid conv stack: input (B, T + M - 1, n_bins) -> (B, T, f_h, d_enc)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.enc_channels
        self.front = nn.ModuleList([
            nn.Conv2d(1, c1, 7, padding=(0, 3)),
            nn.Conv2d(c1, c1, 7, padding=(0, 3)),
            nn.Conv2d(c1, c1, 7, padding=(0, 3)),
        ])
        self.hdc = HarmonicDilatedConv(c1, c2, harmonic_dilations(48, cfg.n_harmonics))
        self.back = nn.ModuleList(
            [nn.Conv2d(c2 if i == 0 else c3, c3, (5, 3), padding=(0, 1)) for i in range(5)]
        )
        self.proj = nn.Linear(c3, cfg.d_enc)
        self.norm = nn.LayerNorm(cfg.d_enc)
        self.register_buffer("pos", sinusoidal_table(cfg.f_h, cfg.d_enc), persistent=False)

    def forward(self, x):
        x = (x - DB_FLOOR) / (-DB_FLOOR)
        x = x.unsqueeze(1)  # (B, 1, time, freq)
        for conv in self.front:
            x = F.relu(conv(x))
        x = F.relu(self.hdc(x))
        # semitone pooling: bins [4k-2, 4k+1] around each semitone center 4k
        x = F.pad(x, (2, 0))[..., : x.shape[-1]]
        x = F.max_pool2d(x, (1, 4))
        for conv in self.back:
            x = F.relu(conv(x))
        x = x.permute(0, 2, 3, 1)  # (B, T, f_h, c3)
        return self.norm(self.proj(x)) + self.pos


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_kv: Optional[int] = None, dropout: float = 0.0):
        super().__init__()
        d_kv = d_kv or d_model
        self.h = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_kv, d_model)
        self.v = nn.Linear(d_kv, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mem, blocked=None):
        B, L, D = x.shape
        S = mem.shape[1]
        dh = D // self.h
        q = self.q(x).view(B, L, self.h, dh).transpose(1, 2)
        k = self.k(mem).view(B, S, self.h, dh).transpose(1, 2)
        v = self.v(mem).view(B, S, self.h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if blocked is not None:
            scores = scores.masked_fill(blocked, float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.o(out)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_dec
        self.n1, self.n2, self.n3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.self_attn = Attention(d, cfg.n_heads, dropout=cfg.dropout)
        self.cross_attn = Attention(d, cfg.n_heads, d_kv=cfg.d_enc, dropout=cfg.dropout)
        self.ff = nn.Sequential(nn.Linear(d, cfg.d_mlp), nn.GELU(), nn.Dropout(cfg.dropout),
                                nn.Linear(cfg.d_mlp, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mem, blocked=None):
        h = self.n1(x)
        x = x + self.drop(self.self_attn(h, h, blocked))
        x = x + self.drop(self.cross_attn(self.n2(x), mem))
        return x + self.drop(self.ff(self.n3(x)))


def pitch_code_table(cfg: ModelConfig) -> torch.Tensor:
    """(vocab, d_enc): Onset(p)/Offset(p) rows hold the encoder position code of semitone p - 21."""
    pe = sinusoidal_table(cfg.f_h, cfg.d_enc)
    code = torch.zeros(V.VOCAB_SIZE, cfg.d_enc)
    for k in range(cfg.f_h):
        code[V.onset(21 + k)] = pe[k]
        code[V.offset(21 + k)] = pe[k]
    return code


class Decoder(nn.Module):
    """Token embedding + sinusoidal positions + pre-norm layers + vocabulary head.

    With `pitch_code`, note-token embeddings and head rows get an extra term
    projected from the encoder's frequency-position code through matrices shared
    by all pitches, so what is learned for one pitch transfers to the others.
    """

    def __init__(self, cfg: ModelConfig, max_len: int):
        super().__init__()
        self.embed = nn.Embedding(V.VOCAB_SIZE, cfg.d_dec)
        self.register_buffer("pos", sinusoidal_table(max_len, cfg.d_dec), persistent=False)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.d_dec)
        self.head = nn.Linear(cfg.d_dec, V.VOCAB_SIZE)
        self.drop = nn.Dropout(cfg.dropout)
        self.code_in = self.code_out = None
        if cfg.pitch_code:
            self.register_buffer("code", pitch_code_table(cfg), persistent=False)
            self.code_in = nn.Linear(cfg.d_enc, cfg.d_dec, bias=False)
            self.code_out = nn.Linear(cfg.d_enc, cfg.d_dec, bias=False)

    def forward(self, tokens, mem, blocked=None):
        x = self.embed(tokens) + self.pos[: tokens.shape[1]]
        if self.code_in is not None:
            x = x + self.code_in(self.code[tokens])
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x, mem, blocked)
        h = self.norm(x)
        logits = self.head(h)
        if self.code_out is not None:
            logits = logits + h @ self.code_out(self.code).T
        return logits


def causal_mask(length: int, device=None) -> torch.Tensor:
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)


def slot_mask(valid: torch.Tensor) -> torch.Tensor:
    """(B, S) valid flags -> (B, 1, 1, S) blocked keys; rows with no valid key block nothing."""
    blocked = ~valid
    blocked = blocked & valid.any(dim=1, keepdim=True)
    return blocked[:, None, None, :]


class TranscriptionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.onset_decoder = Decoder(cfg, cfg.n_seq)
        self.offset_decoder = None if cfg.single_decoder else Decoder(cfg, cfg.n_slots + 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
                if getattr(m, "bias", None) is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # vocabulary heads read a unit-variance LayerNorm output; keep initial logits near uniform
        std = 0.02 / math.sqrt(self.config.d_dec)
        for dec in (self.onset_decoder, self.offset_decoder):
            if dec is not None:
                nn.init.trunc_normal_(dec.head.weight, std=std, a=-2 * std, b=2 * std)
                if dec.code_out is not None:
                    nn.init.zeros_(dec.code_out.weight)

    # -- teacher-forced training --------------------------------------------

    def loss(self, batch: Dict[str, torch.Tensor], weights=(1.0, 1.0, 1.0)) -> Dict[str, torch.Tensor]:
        """Cross-entropy terms for a collated batch (see trainer.collate)."""
        cfg = self.config
        mem = self.encoder(batch["features"])
        mem = mem.reshape(-1, cfg.f_h, cfg.d_enc)
        seq_in = batch["onset_in"]
        logits = self.onset_decoder(seq_in, mem, causal_mask(seq_in.shape[1], seq_in.device))
        onset_ce = F.cross_entropy(logits.reshape(-1, V.VOCAB_SIZE), batch["onset_tgt"].reshape(-1),
                                   ignore_index=V.IGNORE)
        out = {"onset": onset_ce}
        total = weights[0] * onset_ce
        if self.offset_decoder is not None:
            slot_in, slot_tgt, valid = batch["slot_in"], batch["slot_tgt"], batch["slot_valid"]
            slot_logits = self.offset_decoder(slot_in, mem, slot_mask(valid))
            first = 1 if cfg.pedal_enabled else 0
            tgt = slot_tgt[:, first:]
            if (tgt != V.IGNORE).any():
                off_ce = F.cross_entropy(slot_logits[:, first:].reshape(-1, V.VOCAB_SIZE),
                                         tgt.reshape(-1), ignore_index=V.IGNORE)
            else:
                off_ce = slot_logits.sum() * 0.0
            out["offset"] = off_ce
            total = total + weights[1] * off_ce
            if cfg.pedal_enabled:
                ped_ce = F.cross_entropy(slot_logits[:, 0], slot_tgt[:, 0])
                out["pedal"] = ped_ce
                total = total + weights[2] * ped_ce
        out["total"] = total
        return out

    # -- inference ------------------------------------------------------------

    def _as_tensor(self, x) -> torch.Tensor:
        p = next(self.parameters())
        return torch.as_tensor(np.asarray(x), dtype=p.dtype, device=p.device)

    @torch.no_grad()
    def encode_window(self, window) -> torch.Tensor:
        """Encoder state (f_h, d_enc) for one (window_m, n_bins) feature window."""
        cfg = self.config
        w = self._as_tensor(window)
        if tuple(w.shape) != (cfg.window_m, cfg.n_bins):
            raise ValueError(f"window shape {tuple(w.shape)} != ({cfg.window_m}, {cfg.n_bins})")
        return self.encoder(w.unsqueeze(0))[0, 0]

    @torch.no_grad()
    def onset_decoder_step(self, enc: torch.Tensor, prefix: Sequence[int],
                           history: Sequence[int] = ()) -> np.ndarray:
        """Next-token logits after [history | prefix]; history is cut from the oldest side."""
        if not prefix or prefix[0] != V.BOS:
            raise ValueError("prefix must start with BOS")
        room = self.config.n_seq - len(prefix)
        if room < 0:
            raise ValueError("prefix longer than n_seq")
        history = list(history)[len(history) - room:] if room < len(history) else list(history)
        if room == 0:
            history = []
        tokens = torch.tensor([history + list(prefix)], dtype=torch.long)
        logits = self.onset_decoder(tokens, enc.unsqueeze(0), causal_mask(tokens.shape[1]))
        return logits[0, -1].cpu().numpy()

    @torch.no_grad()
    def offset_decoder_predict(self, enc: torch.Tensor, slots: Sequence[int]):
        """Per-slot logits (n, vocab) and pedal logits (vocab,) or None."""
        cfg = self.config
        if self.offset_decoder is None:
            raise RuntimeError("single-decoder model has no offset decoder")
        if len(slots) > cfg.n_slots:
            raise ValueError(f"{len(slots)} slots > n_slots={cfg.n_slots}; chunk the active set")
        tokens = ([V.BOS] if cfg.pedal_enabled else []) + list(slots)
        if not tokens:
            return np.zeros((0, V.VOCAB_SIZE), dtype=np.float32), None
        t = torch.tensor([tokens], dtype=torch.long)
        logits = self.offset_decoder(t, enc.unsqueeze(0))[0].cpu().numpy()
        if cfg.pedal_enabled:
            return logits[1:], logits[0]
        return logits, None


# -- checkpoints ------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: TranscriptionModel
    config: ModelConfig
    step: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: Union[str, Path], model: TranscriptionModel, step: int = 0,
                    meta: Optional[dict] = None) -> None:
    """SAMT container: magic, version, header length, JSON index, float32 LE blob."""
    state = {k: v.detach().cpu().to(torch.float32).numpy() for k, v in model.state_dict().items()}
    index, offset = {}, 0
    for name in sorted(state):
        arr = state[name]
        index[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * 4
    header = json.dumps({"config": model.config.to_dict(), "step": int(step), "meta": meta or {},
                         "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
        f.write(header)
        for name in sorted(state):
            f.write(np.ascontiguousarray(state[name], dtype="<f4").tobytes())


def load_checkpoint(path: Union[str, Path], config: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a SAMT checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    stored = ModelConfig.from_dict(header["config"])
    if config is not None:
        mine, theirs = config.to_dict(), stored.to_dict()
        diff = [k for k in mine if mine[k] != theirs.get(k)]
        if diff:
            raise CheckpointError(
                "config mismatch: " + ", ".join(f"{k} (file={theirs.get(k)!r}, expected={mine[k]!r})"
                                                for k in diff))
    model = TranscriptionModel(stored)
    blob = raw[12 + hlen:]
    expected = model.state_dict()
    if set(expected) != set(header["tensors"]):
        raise CheckpointError(f"{path}: tensor names do not match the model")
    state = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = blob[meta["offset"]:meta["offset"] + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError(f"{path}: truncated tensor {name}")
        if tuple(expected[name].shape) != shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        state[name] = torch.from_numpy(np.frombuffer(chunk, dtype="<f4").reshape(shape).copy())
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(model, stored, int(header["step"]), header.get("meta", {}))
