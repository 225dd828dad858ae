"""Streaming piano transcription: CQT features, onset/offset transformer decoders, note assembly."""

from .features import AudioClip, CqtConfig, FeatureSequence, FrameStreamer, compute_cqt, load_wav
from .model import ModelConfig, TranscriptionModel, load_checkpoint, save_checkpoint
from .streamer import FrameEvents, Pending, flush, init_stream, latency, run_offline, run_stream, step
from .assembler import NoteEvent, assemble
from .vocab import Annotation, vocab_size

__version__ = "0.1.0"
