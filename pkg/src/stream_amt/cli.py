"""`stream-amt` command line: transcribe, eval, train, toydata."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .features import CqtConfig, FrameStreamer, compute_cqt, load_wav, write_feature_dump
from .model import ModelConfig
from .trainer import TrainConfig

log = logging.getLogger("stream_amt")

CONFIG_SECTIONS = ("cqt", "model", "train", "paths")
PATH_KEYS = ("data", "out", "checkpoint", "resume")


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def load_config(path: Optional[str]) -> dict:
    raw = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    _check_keys("top level", raw, CONFIG_SECTIONS)
    cqt = raw.get("cqt", {})
    _check_keys("cqt", cqt, [f.name for f in fields(CqtConfig)])
    model = dict(raw.get("model", {}))
    preset = model.pop("preset", None)
    _check_keys("model", model, [f.name for f in fields(ModelConfig)])
    train = raw.get("train", {})
    _check_keys("train", train, [f.name for f in fields(TrainConfig)])
    paths = raw.get("paths", {})
    _check_keys("paths", paths, PATH_KEYS)
    if preset == "tiny":
        model_cfg = ModelConfig.tiny(**model)
    elif preset in (None, "full"):
        model_cfg = ModelConfig(**model)
    else:
        raise ConfigError(f"unknown model preset {preset!r}")
    try:
        cqt_cfg = CqtConfig(**cqt)
        cqt_cfg.validate()
        model_cfg.validate()
        train_cfg = TrainConfig.from_dict(train)
        train_cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return {"cqt": cqt_cfg, "model": model_cfg, "train": train_cfg, "paths": dict(paths)}


def effective_config(cfg: dict) -> dict:
    return {"cqt": asdict(cfg["cqt"]), "model": cfg["model"].to_dict(),
            "train": cfg["train"].to_dict(), "paths": cfg["paths"]}


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(effective_config(cfg), indent=2, sort_keys=True))


def _apply_overrides(cfg: dict, args) -> dict:
    m = cfg["model"]
    if getattr(args, "no_pedal", False):
        m.pedal_enabled = False
    if getattr(args, "single_decoder", False):
        m.single_decoder = True
    ablation = getattr(args, "ablation", None)
    if ablation == "no-pedal":
        m.pedal_enabled = False
    elif ablation == "single-decoder":
        m.single_decoder = True
    if getattr(args, "latency_frames", None) is not None:
        m.future_frames = args.latency_frames
    if getattr(args, "seed", None) is not None:
        cfg["train"].seed = args.seed
    try:
        m.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def _set_threads() -> None:
    threads = os.environ.get("STREAM_AMT_THREADS")
    if threads:
        import torch
        torch.set_num_threads(max(1, int(threads)))


# -- transcribe ---------------------------------------------------------------------


def _load_model(path: str):
    from .model import load_checkpoint
    return load_checkpoint(path).model


def cmd_transcribe(args) -> int:
    from .assembler import assemble, pedal_intervals, write_midi, write_notes_json
    from .streamer import FrameEvents, events_to_records, flush, init_stream, latency, run_offline, step, write_jsonl

    if args.print_latency:
        if args.checkpoint:
            cfg = _load_model(args.checkpoint).config
        else:
            cfg = load_config(args.config)["model"]
        ff = args.latency_frames if args.latency_frames is not None else cfg.future_frames
        print(f"{latency(future_frames=ff):.3f}")
        return 0
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model = _load_model(args.checkpoint)
    ff = args.latency_frames
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    stem = "stream" if args.stream or args.audio in (None, "-") else Path(args.audio).stem

    if args.stream:
        src = sys.stdin.buffer if args.audio in (None, "-") else open(args.audio, "rb")
        sink = open(out / f"{stem}.jsonl", "w") if out else sys.stdout
        fs = FrameStreamer()
        state = init_stream(model, ff)
        events, emitted = [], 0
        frames = []

        def emit(new):
            nonlocal emitted
            events.extend(new)
            recs = events_to_records(events)
            write_jsonl(recs[emitted:], sink)
            sink.flush()
            emitted = len(recs)

        leftover = b""
        while True:
            chunk = src.read(4096)
            if not chunk:
                break
            chunk = leftover + chunk
            cut = len(chunk) - len(chunk) % 4
            leftover = chunk[cut:]
            for row in fs.push(np.frombuffer(chunk[:cut], dtype="<f4")):
                frames.append(row)
                ev = step(state, row)
                if isinstance(ev, FrameEvents):
                    emit([ev])
        for row in fs.finish():
            frames.append(row)
            ev = step(state, row)
            if isinstance(ev, FrameEvents):
                emit([ev])
        emit(flush(state))
        if sink is not sys.stdout:
            sink.close()
        if args.dump_features:
            from .features import FeatureSequence
            write_feature_dump(args.dump_features, FeatureSequence(
                np.stack(frames) if frames else np.zeros((0, 352), np.float32)))
    else:
        clip = load_wav(args.audio)
        feats = compute_cqt(clip, reference=1.0)
        if args.dump_features:
            write_feature_dump(args.dump_features, feats)
        events = run_offline(feats, model, ff)
        if out:
            with open(out / f"{stem}.jsonl", "w") as fh:
                write_jsonl(events_to_records(events), fh)

    end = len(events) * 0.02
    notes = assemble(events, end_time=end)
    pedal = pedal_intervals(events, end)
    if out:
        write_notes_json(out / f"{stem}.json", notes, pedal)
        write_midi(notes, pedal, sink=out / f"{stem}.mid")
    log.info("%d notes", len(notes))
    return 0


# -- eval ---------------------------------------------------------------------------


def _note_files(d: Path) -> dict:
    files = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in (".json", ".mid", ".midi") and p.name != "report.json":
            files.setdefault(p.stem, p)
    return files


def cmd_eval(args) -> int:
    from .metrics import aggregate, evaluate_clip
    from .vocab import Annotation

    ref, est = _note_files(Path(args.ref)), _note_files(Path(args.est))
    missing = sorted(set(ref) ^ set(est))
    if missing:
        for stem in missing:
            side = "estimate" if stem in ref else "reference"
            print(f"unpaired: {stem} (no {side})", file=sys.stderr)
        return 1
    if not ref:
        print("no files to evaluate", file=sys.stderr)
        return 1
    per_clip = []
    for stem in sorted(ref):
        s = evaluate_clip(Annotation.load(ref[stem]).notes, Annotation.load(est[stem]).notes)
        per_clip.append({"clip": stem, **s})
    report = aggregate([{k: v for k, v in c.items() if k != "clip"} for c in per_clip])
    report["per_clip"] = per_clip
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


# -- train / toydata ----------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import deterministic_mode, load_manifest, manifest_clips, train

    cfg = _apply_overrides(load_config(args.config), args)
    paths = cfg["paths"]
    data = args.data or paths.get("data")
    out = args.out or paths.get("out")
    if not data or not out:
        raise ConfigError("training needs a data directory/manifest and an output directory")
    resume = args.resume or paths.get("resume")
    cfg["paths"] = {k: str(v) for k, v in (("data", data), ("out", out), ("resume", resume)) if v}
    out = Path(out)
    echo_config(cfg, out)
    deterministic_mode(int(os.environ.get("STREAM_AMT_THREADS", "1")))
    manifest = Path(data)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    entries = load_manifest(manifest)
    stats = {}
    train_clips = manifest_clips(entries, "train", cfg["model"], stats)
    val_clips = manifest_clips(entries, "validation", cfg["model"], stats)
    result = train(cfg["model"], cfg["train"], train_clips, val_clips or None, out_dir=out, resume=resume)
    report = dict(result.best_metrics or {})
    report.update({"step": result.step, "best_step": result.best_step,
                   "skipped_clips": stats.get("skipped_clips", 0)})
    (out / "metrics.json").write_text(json.dumps(report, indent=2))
    print(json.dumps({k: v for k, v in report.items() if k != "per_clip"}))
    return 0


def cmd_toydata(args) -> int:
    from .toydata import write_toy_dataset

    write_toy_dataset(args.out, args.seed, args.n, polyphony_max=args.polyphony,
                      duration=args.duration, val_clips=args.val_clips)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stream-amt", description="Streaming audio-to-MIDI piano transcription")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("transcribe", help="transcribe a WAV file or a raw float32 stream")
    t.add_argument("audio", nargs="?", help="WAV path, or '-' / omitted for stdin with --stream")
    t.add_argument("--checkpoint")
    t.add_argument("--config")
    t.add_argument("--stream", action="store_true", help="read raw float32 LE mono 16 kHz from stdin")
    t.add_argument("--latency-frames", type=int, default=None)
    t.add_argument("--print-latency", action="store_true")
    t.add_argument("--dump-features")
    t.add_argument("--out")
    t.set_defaults(func=cmd_transcribe)

    e = sub.add_parser("eval", help="score estimated notes against references (paired by file stem)")
    e.add_argument("ref")
    e.add_argument("est")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config")
    tr.add_argument("--data")
    tr.add_argument("--out")
    tr.add_argument("--resume")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--no-pedal", action="store_true")
    tr.add_argument("--single-decoder", action="store_true")
    tr.add_argument("--ablation", choices=["none", "no-pedal", "single-decoder"])
    tr.add_argument("--latency-frames", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    g = sub.add_parser("toydata", help="write a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=32)
    g.add_argument("--polyphony", type=int, default=3)
    g.add_argument("--duration", type=float, default=4.0)
    g.add_argument("--val-clips", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_toydata)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
