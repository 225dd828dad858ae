import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stream_amt.features import (
    AudioClip, CqtConfig, FeatureSequence, FrameStreamer, RingBuffer, amplitude_to_db,
    build_cqt_kernels, compute_cqt, load_wav, num_frames, read_feature_dump, stream_frames,
    write_feature_dump, write_wav,
)

from conftest import sine


def expected_bin(freq):
    return round(48 * math.log2(freq / 27.5))


def test_bin_center_frequencies():
    cfg = CqtConfig()
    assert cfg.center_frequency(0) == 27.5
    assert cfg.center_frequency(192) == pytest.approx(440.0, abs=1e-9)
    top = cfg.center_frequency(351)
    assert top == pytest.approx(27.5 * 2 ** (351 / 48))
    assert top == pytest.approx(4371.34, abs=0.01)
    assert top < 8000
    bank = build_cqt_kernels(cfg)
    assert bank.frequencies[192] == pytest.approx(440.0)


def test_kernel_bank_shape_and_truncation():
    cfg = CqtConfig()
    bank = build_cqt_kernels(cfg)
    assert bank.matrix.shape == (2 * 352, 2048)
    assert not bank.matrix.flags.writeable
    assert max(bank.lengths) == 2048
    # lowest bins would need ~38k samples untruncated
    assert cfg.kernel_length(0) > 2048
    assert bank.lengths[-1] == cfg.kernel_length(351)


def test_config_rejections():
    with pytest.raises(ValueError, match="n_bins"):
        CqtConfig(n_bins=300).validate()
    with pytest.raises(ValueError, match="hop"):
        CqtConfig(hop=256).validate()
    with pytest.raises(ValueError, match="lowest-bin kernel"):
        CqtConfig(truncate=False).validate()
    CqtConfig().validate()


def test_frame_count_policy():
    assert num_frames(16000) == 51
    assert num_frames(0) == 0
    assert len(compute_cqt(np.zeros(16000))) == 51
    assert len(compute_cqt(np.zeros(319))) == 1


def test_empty_clip_gives_empty_sequence():
    fs = compute_cqt(AudioClip(np.zeros(0)))
    assert fs.frames.shape == (0, 352)


def test_silence_at_floor():
    fs = compute_cqt(np.zeros(8000))
    assert np.all(fs.frames == -80.0)


def test_amplitude_to_db_examples():
    m = np.array([2.0, 0.2, 0.0])
    db = amplitude_to_db(m, ref=2.0)
    assert db[0] == 0.0
    assert db[1] == pytest.approx(-20.0)
    assert db[2] == -80.0
    assert np.all(amplitude_to_db(np.zeros(4)) == -80.0)


def test_440_argmax_and_dft_oracle():
    x = sine(440.0, 1.0)
    fs = compute_cqt(x)
    interior = fs.frames[5:-5]
    assert np.all(np.abs(interior.argmax(axis=1) - 192) <= 1)
    # brute-force DTFT at the bin centers on one interior window
    cfg = CqtConfig()
    seg = x[20 * 320 - 1024:20 * 320 + 1024] * np.hanning(2048)
    n = np.arange(2048)
    freqs = np.array([cfg.center_frequency(b) for b in range(352)])
    dtft = np.abs(np.exp(-2j * np.pi * np.outer(freqs, n) / 16000) @ seg)
    assert abs(int(dtft.argmax()) - int(fs.frames[20].argmax())) <= 1


def test_88_piano_fundamentals():
    for midi in range(21, 109):
        f = 440.0 * 2 ** ((midi - 69) / 12)
        fs = compute_cqt(sine(f, 0.3))
        arg = fs.frames[3:-3].argmax(axis=1)
        assert np.all(np.abs(arg - expected_bin(f)) <= 1), midi


def test_db_range_and_scale_invariance(rng):
    x = rng.uniform(-0.4, 0.4, 5000)
    a = compute_cqt(x).frames
    b = compute_cqt(2 * x).frames
    assert a.min() >= -80 and a.max() <= 0 and a.max() == 0
    np.testing.assert_allclose(a, b, atol=1e-4)


def _stream(x, sizes):
    fs = FrameStreamer()
    rows, pos = [], 0
    for s in sizes:
        rows += fs.push(x[pos:pos + s])
        pos += s
    rows += fs.push(x[pos:])
    rows += fs.finish()
    return np.array(rows).reshape(-1, 352)


def test_streaming_matches_batch_examples(rng):
    x = rng.uniform(-0.5, 0.5, 16000)
    batch = compute_cqt(x, reference=1.0).frames
    one = _stream(x, [16000])
    assert np.array_equal(one, batch)
    assert np.array_equal(_stream(x, [160] * 100), batch)
    assert np.array_equal(_stream(x, [9000, 7000]), batch)


def test_empty_stream():
    assert list(stream_frames([])) == []
    assert list(stream_frames([np.zeros(0)])) == []


def test_stream_frames_final_flag(rng):
    x = rng.uniform(-0.5, 0.5, 3333)
    out = list(stream_frames([x[:1000], x[1000:]]))
    assert [f.index for f in out] == list(range(num_frames(3333)))
    assert out[-1].is_final and not any(f.is_final for f in out[:-1])


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 6000), cuts=st.lists(st.integers(0, 6000), max_size=6), seed=st.integers(0, 99))
def test_chunking_invariance_property(n, cuts, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    cuts = sorted(c for c in set(cuts) if c < n)
    sizes = np.diff([0] + cuts).tolist()
    assert np.array_equal(_stream(x, sizes), compute_cqt(x, reference=1.0).frames)


def test_ring_buffer_wraps():
    rb = RingBuffer(5)
    rb.write(np.arange(3.0))
    rb.write(np.arange(3.0, 7.0))
    assert rb.read(2, 7).tolist() == [2, 3, 4, 5, 6]
    with pytest.raises(IndexError):
        rb.read(0, 3)


def test_audio_clip_rejects_nan_and_resamples():
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, np.nan]))
    clip = AudioClip(np.zeros(44100), 44100)
    assert clip.sample_rate == 16000 and len(clip.samples) == 16000


def test_wav_round_trip(tmp_path, rng):
    x = rng.uniform(-0.5, 0.5, 1600).astype(np.float32)
    write_wav(tmp_path / "a.wav", x)
    clip = load_wav(tmp_path / "a.wav")
    np.testing.assert_array_equal(clip.samples, x.astype(np.float64))
    from scipy.io import wavfile
    stereo = (np.stack([x, x], 1) * 32767).astype(np.int16)
    wavfile.write(str(tmp_path / "b.wav"), 16000, stereo)
    np.testing.assert_allclose(load_wav(tmp_path / "b.wav").samples, x, atol=1e-4)


def test_feature_dump_round_trip(tmp_path, rng):
    fs = FeatureSequence(rng.uniform(-80, 0, (7, 352)).astype(np.float32))
    p = tmp_path / "f.bin"
    write_feature_dump(p, fs)
    raw = p.read_bytes()
    assert raw[:4] == b"CQTF"
    assert struct.unpack("<III", raw[4:16]) == (1, 352, 320)
    assert len(raw) == 16 + 7 * 352 * 4
    assert np.array_equal(read_feature_dump(p).frames, fs.frames)
