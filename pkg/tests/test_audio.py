import struct

import numpy as np
import pytest

from pretextbench.audio import (
    LOG_OFFSET,
    SAMPLE_RATE,
    SEGMENT_FRAMES,
    Waveform,
    decode_wav,
    log_mel,
    mel_center_frequencies,
    mel_filterbank,
    mel_frames,
    sample_view_pair,
    standardize,
    view_pair_offsets,
    write_wav,
)
from pretextbench.errors import DecodeError, EmptyInputError, RangeError, TooShortError


def _wav_bytes(frames: bytes, channels=1, rate=16000, bits=16, tag=1):
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * align, align, bits)
    return (
        b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(frames)) + b"WAVE"
        + b"fmt " + struct.pack("<I", len(fmt)) + fmt
        + b"data" + struct.pack("<I", len(frames)) + frames
    )


def test_decode_16bit_constant(tmp_path):
    p = tmp_path / "c.wav"
    p.write_bytes(_wav_bytes(np.full(100, 16384, dtype="<i2").tobytes()))
    w = decode_wav(p)
    assert w.sample_rate == 16000
    np.testing.assert_allclose(w.samples, 0.5, atol=1e-4)


def test_decode_stereo_is_averaged(tmp_path):
    p = tmp_path / "s.wav"
    frames = np.tile(np.array([32767, -32767], dtype="<i2"), 50).tobytes()
    p.write_bytes(_wav_bytes(frames, channels=2))
    w = decode_wav(p)
    assert len(w.samples) == 50
    np.testing.assert_allclose(w.samples, 0.0, atol=1e-6)


def test_decode_8_24_and_float(tmp_path):
    p8 = tmp_path / "a.wav"
    p8.write_bytes(_wav_bytes(bytes([128, 192, 64]), bits=8))
    np.testing.assert_allclose(decode_wav(p8).samples, [0.0, 0.5, -0.5])
    p24 = tmp_path / "b.wav"
    v = [1 << 22, -(1 << 22)]
    raw = b"".join(int(x & 0xFFFFFF).to_bytes(3, "little") for x in v)
    p24.write_bytes(_wav_bytes(raw, bits=24))
    np.testing.assert_allclose(decode_wav(p24).samples, [0.5, -0.5])
    pf = tmp_path / "f.wav"
    pf.write_bytes(_wav_bytes(np.array([0.25, -0.75], dtype="<f4").tobytes(), bits=32, tag=3))
    np.testing.assert_allclose(decode_wav(pf).samples, [0.25, -0.75])


def test_decode_truncated_file(tmp_path):
    p = tmp_path / "t.wav"
    blob = _wav_bytes(np.zeros(100, dtype="<i2").tobytes())
    p.write_bytes(blob[:-50])
    with pytest.raises(DecodeError) as e:
        decode_wav(p)
    assert e.value.offset > 0


def test_decode_bad_signature_and_codec(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(b"RIFX" + b"\0" * 40)
    with pytest.raises(DecodeError):
        decode_wav(p)
    p.write_bytes(_wav_bytes(b"\0" * 8, bits=16, tag=2))  # ADPCM
    with pytest.raises(DecodeError, match="unsupported codec"):
        decode_wav(p)


def test_write_then_decode_round_trip(tmp_path):
    x = np.sin(np.linspace(0, 20, 1000)) * 0.8
    write_wav(tmp_path / "r.wav", x)
    np.testing.assert_allclose(decode_wav(tmp_path / "r.wav").samples, x, atol=2 / 32767)


def test_standardize_fixed_point():
    x = np.sin(np.arange(1600) / 5.0).astype(np.float32)
    x /= np.abs(x).max()
    out = standardize(Waveform(x, SAMPLE_RATE))
    assert np.array_equal(out.samples, x)


def test_standardize_resamples_and_keeps_pitch():
    t = np.arange(32000 * 2) / 32000
    w = standardize(Waveform((0.3 * np.sin(2 * np.pi * 440 * t)).astype(np.float32), 32000))
    assert w.sample_rate == SAMPLE_RATE
    assert len(w.samples) == 32000
    assert np.abs(w.samples).max() == pytest.approx(1.0)
    spec = np.abs(np.fft.rfft(w.samples))
    freqs = np.fft.rfftfreq(len(w.samples), 1 / SAMPLE_RATE)
    assert freqs[np.argmax(spec)] == pytest.approx(440.0, abs=1.0)


def test_standardize_silence_and_empty():
    out = standardize(Waveform(np.zeros(100, dtype=np.float32), 8000))
    assert np.all(out.samples == 0)
    with pytest.raises(EmptyInputError):
        standardize(Waveform(np.zeros(0, dtype=np.float32), 16000))


def test_log_mel_shape_and_silence():
    w = Waveform(np.zeros(5 * SAMPLE_RATE, dtype=np.float32), SAMPLE_RATE)
    seg = log_mel(w, 0.5)
    assert seg.frames.shape == (398, 128) == (SEGMENT_FRAMES, 128)
    assert np.all(seg.frames == np.float32(np.log(LOG_OFFSET)))
    with pytest.raises(RangeError):
        log_mel(w, 1.5)


def test_log_mel_440_peak_matches_direct_dft():
    t = np.arange(4 * SAMPLE_RATE) / SAMPLE_RATE
    w = Waveform(np.sin(2 * np.pi * 440 * t).astype(np.float32), SAMPLE_RATE)
    frames = log_mel(w, 0.0).frames
    nearest = int(np.argmin(np.abs(mel_center_frequencies() - 440)))
    assert np.all(frames.argmax(axis=1) == nearest)
    # independent evaluation of frame 7: explicit DFT sum, periodic Hann, zero-padded to 512
    n = np.arange(400)
    chunk = w.samples[7 * 160 : 7 * 160 + 400].astype(np.float64) * (0.5 - 0.5 * np.cos(2 * np.pi * n / 400))
    k = np.arange(257)[:, None]
    mag = np.abs((chunk[None, :] * np.exp(-2j * np.pi * k * n[None, :] / 512)).sum(axis=1))
    expected = np.log(mel_filterbank().astype(np.float64) @ mag + 1e-5)
    np.testing.assert_allclose(frames[7], expected, rtol=1e-4, atol=1e-4)


def test_filterbank_is_area_normalized():
    fb = mel_filterbank()
    assert fb.shape == (128, 257)
    bin_hz = SAMPLE_RATE / 512
    # bands spanning several bins integrate to about one; sampling at bin centers adds a few percent of jitter
    areas = fb.sum(axis=1) * bin_hz
    assert np.all(np.abs(areas[40:] - 1.0) < 0.1)
    assert abs(areas[40:].mean() - 1.0) < 0.01


def test_mel_frames_is_deterministic():
    x = np.random.default_rng(0).normal(size=20000).astype(np.float32)
    assert np.array_equal(mel_frames(x), mel_frames(x.copy()))


def _silent(seconds):
    return Waveform(np.zeros(int(seconds * SAMPLE_RATE), dtype=np.float32), SAMPLE_RATE, "t")


def test_eight_second_track_pairs():
    seen = set()
    for seed in range(50):
        p = sample_view_pair(_silent(8), seed)
        seen.add((p.anchor.start_seconds, p.positive.start_seconds))
    assert seen == {(0.0, 4.0), (4.0, 0.0)}


def test_short_track_rejected():
    with pytest.raises(TooShortError):
        sample_view_pair(_silent(6), 0)


def test_view_pairs_fuzz():
    rng = np.random.default_rng(123)
    for _ in range(10_000):
        n = int(rng.integers(8 * SAMPLE_RATE, 90 * SAMPLE_RATE))
        a, p = view_pair_offsets(n, rng)
        gap = abs(a - p) / 100
        assert 4.0 <= gap <= 16.0
        for s in (a, p):
            assert s >= 0 and s * 160 + 64000 <= n


def test_view_pair_segments_match_direct_log_mel():
    rng = np.random.default_rng(4)
    w = Waveform(rng.normal(size=20 * SAMPLE_RATE).astype(np.float32) * 0.1, SAMPLE_RATE, "x")
    full = mel_frames(w.samples)
    a = sample_view_pair(w, 9, frames=full)
    b = sample_view_pair(w, 9)
    assert a.anchor.start_seconds == b.anchor.start_seconds
    np.testing.assert_allclose(a.anchor.frames, b.anchor.frames, atol=1e-5)
    np.testing.assert_allclose(a.positive.frames, b.positive.frames, atol=1e-5)
    assert 4.0 <= a.gap_seconds <= 16.0
