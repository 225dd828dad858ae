"""Shared builders for model/trainer tests."""

import functools

import numpy as np
import torch

from stream_amt.model import ModelConfig, TranscriptionModel
from stream_amt.toydata import make_toy_dataset
from stream_amt.trainer import TrainConfig, prepare_clips, sample_batch


@functools.lru_cache(maxsize=None)
def toy_prepared(n_clips=4, seed=0, polyphony=3, **cfg_overrides):
    cfg = ModelConfig.tiny(**dict(cfg_overrides))
    clips = make_toy_dataset(seed, n_clips, polyphony)
    return cfg, prepare_clips([(c.name, c.audio, c.annotation) for c in clips], cfg)


def toy_batch(cfg, prepared, seed=0, batch=2, seconds=0.2):
    tcfg = TrainConfig.toy(batch=batch, clip_seconds=seconds)
    return sample_batch(prepared, np.random.default_rng(seed), tcfg, cfg)


def gradient_check(n_params=100, seed=0, eps=1e-6):
    """Worst relative error between autograd and central differences (float64).

    Parameters are redrawn at std 0.2 so gradients sit well above the
    finite-difference noise floor; the check validates the backward pass, not
    the init. The 100 probes are drawn from entries with a nonzero analytic
    gradient (unused embedding rows have exactly zero gradient).
    """
    cfg, prepared = toy_prepared(n_clips=2, d_dec=16, n_layers=1, n_heads=2, d_mlp=32, d_enc=16,
                                 enc_channels=(2, 4, 4), dropout=0.0)
    batch = toy_batch(cfg, prepared, batch=1, seconds=0.06)
    batch = {k: (v.double() if v.is_floating_point() else v) for k, v in batch.items()}
    torch.manual_seed(seed)
    model = TranscriptionModel(cfg).double().train()
    params = list(model.parameters())
    with torch.no_grad():
        for p in params:
            p.normal_(0.0, 0.2)
    grads = torch.autograd.grad(model.loss(batch)["total"], params)
    candidates = [(i, j) for i, g in enumerate(grads) for j in torch.nonzero(g.reshape(-1)).flatten().tolist()]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=n_params, replace=False)
    errors = []
    with torch.no_grad():
        for k in picks:
            i, j = candidates[k]
            p = params[i].view(-1)
            orig = p[j].item()
            p[j] = orig + eps
            lp = model.loss(batch)["total"].item()
            p[j] = orig - eps
            lm = model.loss(batch)["total"].item()
            p[j] = orig
            num = (lp - lm) / (2 * eps)
            ana = grads[i].view(-1)[j].item()
            scale = max(abs(num), abs(ana))
            # below 1e-6 the difference quotient is dominated by rounding (~1e-9 absolute)
            errors.append(abs(num - ana) / scale if scale > 1e-6 else abs(num - ana) / 1e-6)
    return max(errors), len(errors)


# -- mock decoders for streamer tests ------------------------------------------------
#
# Feature rows carry their frame index in column 0, so a mock can recover the
# frame being decoded from the center row of its window.

from stream_amt import vocab as V  # noqa: E402


def indexed_frames(n, n_bins=352):
    x = np.full((n, n_bins), -80.0, dtype=np.float32)
    x[:, 0] = np.arange(n)
    return x


class MockModel:
    """Scripted decoders: `onsets[t]` / `offsets[t]` / `pedal[t]` drive the outputs."""

    def __init__(self, onsets=None, offsets=None, pedal=None, config=None):
        self.config = config or ModelConfig.tiny()
        self.onsets = onsets or {}
        self.offsets = offsets or {}
        self.pedal = pedal or {}
        self.offset_calls = []

    def _t(self, enc):
        return int(enc)

    def encode_window(self, window):
        past = self.config.window_m - 1 - self.future
        return window[past, 0]

    future = 19

    @staticmethod
    def _onehot(tok):
        z = np.zeros(V.VOCAB_SIZE, dtype=np.float32)
        z[tok] = 1.0
        return z

    def onset_decoder_step(self, enc, prefix, history=()):
        script = self.onsets.get(self._t(enc), [])
        k = len(prefix) - 1
        return self._onehot(script[k] if k < len(script) else V.EOS)

    def offset_decoder_predict(self, enc, slots):
        t = self._t(enc)
        self.offset_calls.append((t, list(slots)))
        ends = self.offsets.get(t, [])
        out = []
        for tok in slots:
            p = V.pitch_of(tok)
            out.append(self._onehot(V.offset(p) if p in ends else V.BLANK))
        ped = None
        if self.config.pedal_enabled:
            ped = self._onehot(V.PEDAL_ON if self.pedal.get(t, False) else V.PEDAL_OFF)
        return np.array(out, dtype=np.float32).reshape(-1, V.VOCAB_SIZE), ped


class AdversarialModel(MockModel):
    """Deterministic pseudo-random logits over the full vocabulary."""

    def __init__(self, seed=0, config=None):
        super().__init__(config=config)
        self.seed = seed

    def _rng(self, *key):
        return np.random.default_rng([self.seed, *[int(k) & 0xFFFFFFFF for k in key]])

    def onset_decoder_step(self, enc, prefix, history=()):
        r = self._rng(self._t(enc), len(prefix), sum(prefix))
        z = np.zeros(V.VOCAB_SIZE, dtype=np.float32)
        u = r.random()
        if u < 0.3:
            z[V.EOS] = 1
        elif u < 0.9:
            z[V.onset(int(r.integers(21, 40)))] = 1  # small pitch pool: frequent repeats
        else:
            z[int(r.integers(0, V.VOCAB_SIZE))] = 1
        return z

    def offset_decoder_predict(self, enc, slots):
        t = self._t(enc)
        r = self._rng(t, len(slots), 7)
        out = []
        for tok in slots:
            u = r.random()
            if u < 0.3:
                out.append(self._onehot(V.offset(V.pitch_of(tok))))
            elif u < 0.4:
                out.append(self._onehot(int(r.integers(0, V.VOCAB_SIZE))))
            else:
                out.append(self._onehot(V.BLANK))
        ped = self._onehot(int(r.choice([V.PEDAL_ON, V.PEDAL_OFF, V.EOS])))
        return np.array(out, dtype=np.float32).reshape(-1, V.VOCAB_SIZE), ped


def check_correspondence(events):
    """Replays events: offsets only for active pitches, |A| == onsets - offsets, dedupe."""
    active, n_on, n_off = set(), 0, 0
    last_on, last_off = {}, {}
    for e in events:
        for p in e.forced_offsets:
            assert p in active
            active.remove(p)
            n_off += 1
            last_off[p] = e.t
        assert len(set(e.onsets)) == len(e.onsets)
        for p in e.onsets:
            assert last_on.get(p, -99) < e.t - 2
            last_on[p] = e.t
            active.add(p)
            n_on += 1
        for p in e.offsets:
            assert p in active
            assert last_off.get(p, -99) < e.t - 2
            last_off[p] = e.t
            active.remove(p)
            n_off += 1
        assert len(active) == n_on - n_off
    return active
