"""Teacher-forced training on random crops, with streaming-path validation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import vocab as V
from .assembler import assemble
from .features import DB_FLOOR, AudioClip, compute_cqt, load_wav
from .metrics import aggregate, evaluate_clip
from .model import ModelConfig, TranscriptionModel, load_checkpoint, save_checkpoint
from .streamer import run_stream

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


@dataclass
class TrainConfig:
    lr: float = 6e-4
    batch: int = 16
    max_steps: int = 200000
    clip_seconds: float = 10.0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    validate_every: int = 250
    patience: int = 8
    log_every: int = 10
    target_onset_f1: Optional[float] = None
    target_onset_offset_f1: Optional[float] = None

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        base = dict(lr=1e-3, batch=2, max_steps=3000, clip_seconds=2.0, validate_every=500)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.clip_seconds <= 0:
            raise ValueError("clip_seconds must be positive")

    @property
    def crop_frames(self) -> int:
        return max(1, int(round(self.clip_seconds * 50)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingError(RuntimeError):
    pass


# -- data ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    audio: Path
    annotation: Path
    split: str


def load_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    path = Path(path)
    root = path.parent
    entries = []
    for i, e in enumerate(json.loads(path.read_text())):
        split = e.get("split", "train")
        if split not in SPLITS:
            raise ValueError(f"manifest entry {i}: unknown split {split!r}")
        audio, ann = root / e["audio"], root / e["annotation"]
        for p in (audio, ann):
            if not p.exists():
                raise FileNotFoundError(f"manifest entry {i}: missing {p}")
        entries.append(ManifestEntry(audio, ann, split))
    return entries


@dataclass
class PreparedClip:
    name: str
    frames: np.ndarray  # (T, n_bins) dB, fixed reference
    targets: List[V.FrameTargets]
    annotation: V.Annotation
    padded: np.ndarray = field(repr=False, default=None)


def prepare_clip(name: str, audio, annotation: V.Annotation, model_cfg: ModelConfig,
                 n_frames: Optional[int] = None) -> PreparedClip:
    """Features (streaming dB convention) and per-frame targets for one clip."""
    clip = audio if isinstance(audio, AudioClip) else AudioClip(np.asarray(audio))
    frames = compute_cqt(clip, reference=1.0).frames
    targets = V.build_targets(annotation, len(frames), model_cfg.n_slots)
    past = model_cfg.window_m - 1 - model_cfg.future_frames
    padded = np.concatenate([np.repeat(frames[:1], past, axis=0), frames,
                             np.full((model_cfg.future_frames, frames.shape[1]), DB_FLOOR, np.float32)])
    return PreparedClip(name, frames, targets, annotation, padded)


def prepare_clips(items, model_cfg: ModelConfig, stats: Optional[dict] = None) -> List[PreparedClip]:
    """items: iterable of (name, audio, annotation). Clips violating target limits are skipped."""
    out = []
    for name, audio, ann in items:
        try:
            out.append(prepare_clip(name, audio, ann, model_cfg))
        except V.AnnotationRejected as e:
            log.warning("skipping %s: %s", name, e)
            if stats is not None:
                stats["skipped_clips"] = stats.get("skipped_clips", 0) + 1
    return out


def manifest_clips(entries: Sequence[ManifestEntry], split: str, model_cfg: ModelConfig,
                   stats: Optional[dict] = None) -> List[PreparedClip]:
    items = ((e.audio.stem, load_wav(e.audio), V.Annotation.load(e.annotation))
             for e in entries if e.split == split)
    return prepare_clips(items, model_cfg, stats)


def frame_sequences(targets: Sequence[V.FrameTargets], t: int, cfg: ModelConfig) -> Tuple[List[int], List[int]]:
    """Decoder input and target token lists for frame t (history is unpredicted context)."""
    mixed = cfg.single_decoder
    seq = targets[t].mixed_seq(cfg.pedal_enabled) if mixed else targets[t].onset_seq
    hist = V.onset_history(targets, t, cfg.history_frames, mixed=mixed, pedal=cfg.pedal_enabled)
    room = cfg.n_seq - len(seq)
    if room < 0:
        raise V.AnnotationRejected(f"frame {t}: sequence of {len(seq)} tokens exceeds n_seq")
    hist = hist[len(hist) - room:] if len(hist) > room else hist
    if room == 0:
        hist = []
    inp = hist + [V.BOS] + seq[:-1]
    tgt = [V.IGNORE] * len(hist) + seq
    return inp, tgt


def collate(crops: Sequence[Tuple[PreparedClip, int]], n: int, cfg: ModelConfig) -> Dict[str, torch.Tensor]:
    """Stack crops (clip, start frame) of n target frames into model.loss inputs."""
    feats, seq_in, seq_tgt, slot_in, slot_tgt = [], [], [], [], []
    M = cfg.window_m
    for clip, s in crops:
        feats.append(clip.padded[s:s + n + M - 1])
        for t in range(s, s + n):
            i, o = frame_sequences(clip.targets, t, cfg)
            seq_in.append(i)
            seq_tgt.append(o)
            ft = clip.targets[t]
            k = len(ft.slot_pitches)
            toks = [V.onset(p) for p in ft.slot_pitches]
            tg = ft.offset_slots[:k]
            if cfg.pedal_enabled:
                toks, tg = [V.BOS] + toks, [ft.pedal_slot] + tg
            slot_in.append(toks)
            slot_tgt.append(tg)
    L = max(len(x) for x in seq_in)
    S = max(1, max(len(x) for x in slot_in))
    batch = {
        "features": torch.from_numpy(np.stack(feats).astype(np.float32)),
        "onset_in": torch.tensor([x + [V.BLANK] * (L - len(x)) for x in seq_in]),
        "onset_tgt": torch.tensor([x + [V.IGNORE] * (L - len(x)) for x in seq_tgt]),
        "slot_in": torch.tensor([x + [V.BLANK] * (S - len(x)) for x in slot_in]),
        "slot_tgt": torch.tensor([x + [V.IGNORE] * (S - len(x)) for x in slot_tgt]),
        "slot_valid": torch.tensor([[True] * len(x) + [False] * (S - len(x)) for x in slot_in]),
    }
    return batch


def sample_batch(clips: Sequence[PreparedClip], rng: np.random.Generator, tcfg: TrainConfig,
                 cfg: ModelConfig) -> Dict[str, torch.Tensor]:
    n = min(tcfg.crop_frames, min(len(c.frames) for c in clips))
    crops = []
    for _ in range(tcfg.batch):
        clip = clips[int(rng.integers(len(clips)))]
        start = int(rng.integers(0, len(clip.frames) - n + 1))
        crops.append((clip, start))
    return collate(crops, n, cfg)


# -- optimization -------------------------------------------------------------------


def deterministic_mode(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def make_optimizer(model: TranscriptionModel, tcfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.dim() > 1 else no_decay).append(p)
    return torch.optim.AdamW([{"params": decay, "weight_decay": tcfg.weight_decay},
                              {"params": no_decay, "weight_decay": 0.0}], lr=tcfg.lr)


def training_step(model: TranscriptionModel, optimizer: torch.optim.Optimizer,
                  batch: Dict[str, torch.Tensor], tcfg: TrainConfig) -> Dict[str, float]:
    """One AdamW update on the weighted cross-entropy; returns the loss terms."""
    model.train()
    losses = model.loss(batch, tcfg.loss_weights)
    total = losses["total"]
    if not torch.isfinite(total):
        detail = {k: float(v.detach()) for k, v in losses.items()}
        raise TrainingError(f"non-finite loss {detail}; batch shapes "
                            f"{ {k: tuple(v.shape) for k, v in batch.items()} }")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if tcfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def decode_clip(model: TranscriptionModel, clip: PreparedClip):
    """Notes from the full streaming path (step/flush) over the clip's frames."""
    model.eval()
    events = run_stream(clip.frames, model)
    return assemble(events, end_time=len(clip.frames) * 0.02)


def evaluate_clips(model: TranscriptionModel, clips: Sequence[PreparedClip]) -> Dict:
    per_clip = []
    for clip in clips:
        est = decode_clip(model, clip)
        scores = evaluate_clip(clip.annotation.notes, est)
        scores["clip"] = clip.name
        per_clip.append(scores)
    report = aggregate([{k: v for k, v in c.items() if k != "clip"} for c in per_clip])
    report["per_clip"] = per_clip
    return report


@dataclass
class TrainResult:
    model: TranscriptionModel
    step: int
    best_step: int
    best_metrics: Optional[dict]
    history: List[dict]


def train(model_cfg: ModelConfig, tcfg: TrainConfig, train_clips: Sequence[PreparedClip],
          val_clips: Optional[Sequence[PreparedClip]] = None, out_dir: Union[str, Path, None] = None,
          resume: Union[str, Path, None] = None) -> TrainResult:
    """Train until max_steps, early stopping on validation onset F1, or the target F1s.

    Validation decodes with the streaming path; the best checkpoint is kept in
    `out_dir/best.ckpt` and every step is logged to `out_dir/log.jsonl`.
    Resuming restores weights and the step counter (optimizer moments restart).
    """
    tcfg.validate()
    if not train_clips:
        raise TrainingError("training dataset is empty")
    val_clips = list(val_clips) if val_clips else list(train_clips)
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    step = 0
    if resume is not None:
        ck = load_checkpoint(resume, model_cfg)
        model, step = ck.model, ck.step
    else:
        model = TranscriptionModel(model_cfg)
    optimizer = make_optimizer(model, tcfg)
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "log.jsonl", "a")

    history: List[dict] = []
    best, best_step, bad = None, step, 0
    best_state = None
    t0 = time.time()
    try:
        while step < tcfg.max_steps:
            batch = sample_batch(train_clips, rng, tcfg, model_cfg)
            losses = training_step(model, optimizer, batch, tcfg)
            step += 1
            rec = {"step": step, "loss": losses["total"], "lr": tcfg.lr,
                   **{f"loss_{k}": v for k, v in losses.items() if k != "total"}}
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
            if step % tcfg.log_every == 0:
                log.info("step %d loss %.4f (%.1fs)", step, losses["total"], time.time() - t0)
            if step % tcfg.validate_every == 0 or step == tcfg.max_steps:
                report = evaluate_clips(model, val_clips)
                vrec = {"step": step, "onset_f1": report["onset_f1"],
                        "onset_offset_f1": report["onset_offset_f1"]}
                log.info("validation %s", vrec)
                if logf:
                    logf.write(json.dumps(vrec) + "\n")
                    logf.flush()
                if best is None or report["onset_f1"] > best["onset_f1"]:
                    best, best_step, bad = report, step, 0
                    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                    if out is not None:
                        save_checkpoint(out / "best.ckpt", model, step)
                else:
                    bad += 1
                if out is not None:
                    save_checkpoint(out / "last.ckpt", model, step)
                if bad >= tcfg.patience:
                    log.info("early stop at step %d", step)
                    break
                if _targets_met(report, tcfg):
                    log.info("target F1 reached at step %d", step)
                    break
    finally:
        if logf:
            logf.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, step, best_step, best, history)


def _targets_met(report: dict, tcfg: TrainConfig) -> bool:
    if tcfg.target_onset_f1 is None:
        return False
    ok = report["onset_f1"] >= tcfg.target_onset_f1
    if tcfg.target_onset_offset_f1 is not None:
        ok = ok and report["onset_offset_f1"] >= tcfg.target_onset_offset_f1
    return ok
