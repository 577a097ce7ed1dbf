"""Audio decoding, standardization, log-mel features and view-pair sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import DecodeError, EmptyInputError, RangeError, SamplingError, TooShortError

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 128
F_MIN = 0.0
F_MAX = 8000.0
LOG_OFFSET = 1e-5
SEGMENT_SECONDS = 4.0
SEGMENT_SAMPLES = int(SEGMENT_SECONDS * SAMPLE_RATE)
SEGMENT_FRAMES = 1 + (SEGMENT_SAMPLES - WIN_LENGTH) // HOP_LENGTH  # 398
MIN_GAP_SECONDS = 4.0
MAX_GAP_SECONDS = 16.0
MIN_TRACK_SECONDS = 8.0

_FRAMES_PER_SECOND = SAMPLE_RATE // HOP_LENGTH  # 100; segment starts live on this grid


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSegment:
    frames: np.ndarray  # T x 128
    start_seconds: float
    duration_seconds: float = SEGMENT_SECONDS


@dataclass
class ViewPair:
    anchor: MelSegment
    positive: MelSegment
    source_id: str

    @property
    def gap_seconds(self) -> float:
        return abs(self.anchor.start_seconds - self.positive.start_seconds)


# -- WAV I/O --------------------------------------------------------------------

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def decode_wav(path) -> Waveform:
    """Read a little-endian PCM (8/16/24/32-bit int) or 32-bit float WAV file.

    Stereo is averaged to mono; the file's sample rate is kept.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12:
        raise DecodeError("file shorter than a RIFF header", len(blob))
    if blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise DecodeError("missing RIFF/WAVE signature", 0)
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = pos + 8
        if body + size > len(blob):
            raise DecodeError(f"chunk {cid!r} declares {size} bytes past end of file", pos)
        if cid == b"fmt ":
            if size < 16:
                raise DecodeError("fmt chunk too small", pos)
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", blob, body)
            if tag == _EXTENSIBLE and size >= 40:
                (tag,) = struct.unpack_from("<H", blob, body + 24)
            fmt = (tag, channels, rate, align, bits, pos)
        elif cid == b"data":
            data = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise DecodeError("no fmt chunk", pos)
    if data is None:
        raise DecodeError("no data chunk", pos)
    tag, channels, rate, align, bits, fmt_pos = fmt
    if channels not in (1, 2):
        raise DecodeError(f"unsupported channel count {channels}", fmt_pos + 10)
    if rate <= 0:
        raise DecodeError("sample rate must be positive", fmt_pos + 12)
    start, size = data
    raw = blob[start : start + size]
    width = bits // 8
    if align != width * channels:
        raise DecodeError(f"block align {align} inconsistent with {bits}-bit x {channels}", fmt_pos + 20)
    usable = len(raw) - len(raw) % align
    raw = raw[:usable]
    if tag == _PCM and bits == 8:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32) - 128.0) / 128.0
    elif tag == _PCM and bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    elif tag == _PCM and bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float32) / float(1 << 23)
    elif tag == _PCM and bits == 32:
        x = (np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)).astype(np.float32)
    elif tag == _FLOAT and bits == 32:
        x = np.clip(np.frombuffer(raw, dtype="<f4").astype(np.float32), -1.0, 1.0)
    else:
        raise DecodeError(f"unsupported codec (format tag {tag}, {bits} bits)", fmt_pos + 8)
    if channels == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    return Waveform(np.ascontiguousarray(x, dtype=np.float32), int(rate), path.stem)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, _PCM, 1, sample_rate, sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# -- standardization ------------------------------------------------------------


def standardize(w: Waveform) -> Waveform:
    """Resample to 16 kHz with a windowed-sinc polyphase filter and peak-normalize."""
    if w.sample_rate <= 0:
        raise ValueError(f"sample rate must be positive, got {w.sample_rate}")
    x = np.asarray(w.samples, dtype=np.float32)
    if x.size == 0:
        raise EmptyInputError(f"waveform {w.source_id!r} is empty")
    if w.sample_rate != SAMPLE_RATE:
        ratio = Fraction(SAMPLE_RATE, w.sample_rate)
        x = resample_poly(x.astype(np.float64), ratio.numerator, ratio.denominator).astype(np.float32)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > 0 and peak != 1.0:
        x = (x / peak).astype(np.float32)
    return Waveform(x, SAMPLE_RATE, w.source_id)


def load_track(path) -> Waveform:
    return standardize(decode_wav(path))


# -- log-mel --------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_band_edges() -> np.ndarray:
    """The 130 HTK-mel spaced edge frequencies; band i peaks at edges[i + 1]."""
    return mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))


def mel_center_frequencies() -> np.ndarray:
    return mel_band_edges()[1:-1]


@lru_cache(maxsize=None)
def _filterbank() -> np.ndarray:
    edges = mel_band_edges()
    freqs = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    tri = np.maximum(0.0, np.minimum(up, down))
    tri *= 2.0 / (hi - lo)  # unit area in Hz
    return tri.astype(np.float32)


def mel_filterbank() -> np.ndarray:
    """128 x 257 triangular filters, 0-8 kHz, area-normalized.

    The lowest band is narrower than the FFT bin spacing and comes out
    all-zero, so its log-mel value is always the silence floor.
    """
    return _filterbank().copy()


@lru_cache(maxsize=None)
def _window() -> np.ndarray:
    # periodic Hann
    n = np.arange(WIN_LENGTH)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / WIN_LENGTH)).astype(np.float32)


def mel_frames(samples: np.ndarray) -> np.ndarray:
    """Log-mel frames for every full 400-sample window at hop 160 (no padding)."""
    x = np.asarray(samples, dtype=np.float32)
    if x.size < WIN_LENGTH:
        return np.zeros((0, N_MELS), dtype=np.float32)
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH]
    spec = np.abs(np.fft.rfft(frames * _window(), n=N_FFT, axis=1)).astype(np.float32)
    mel = spec @ _filterbank().T
    return np.log(mel + np.float32(LOG_OFFSET)).astype(np.float32)


def log_mel(w: Waveform, start_seconds: float) -> MelSegment:
    """Log-mel of the 4 s span beginning at ``start_seconds``; shape 398 x 128."""
    start = int(round(start_seconds * w.sample_rate))
    stop = start + SEGMENT_SAMPLES
    if start < 0 or stop > len(w.samples):
        raise RangeError(
            f"span [{start_seconds:.3f}, {start_seconds + SEGMENT_SECONDS:.3f}] s outside "
            f"track {w.source_id!r} of {w.duration:.3f} s"
        )
    return MelSegment(mel_frames(w.samples[start:stop]), start / w.sample_rate)


# -- view pairs -----------------------------------------------------------------


def _grid_size(n_samples: int) -> int:
    """Number of admissible segment starts on the 10 ms hop grid."""
    return (n_samples - SEGMENT_SAMPLES) // HOP_LENGTH + 1


def view_pair_offsets(n_samples: int, rng: np.random.Generator, source_id: str = "") -> tuple[int, int]:
    """Draw (anchor, positive) start indices on the hop grid.

    The anchor is uniform over starts that admit at least one positive; for
    tracks of 12 s or more that is every start. The positive is uniform over
    starts whose distance to the anchor lies in [4 s, 16 s].
    """
    if n_samples < MIN_TRACK_SECONDS * SAMPLE_RATE:
        raise TooShortError(
            f"track {source_id!r} is {n_samples / SAMPLE_RATE:.3f} s; view pairs need >= {MIN_TRACK_SECONDS} s"
        )
    last = _grid_size(n_samples) - 1
    gmin = int(MIN_GAP_SECONDS * _FRAMES_PER_SECOND)
    gmax = int(MAX_GAP_SECONDS * _FRAMES_PER_SECOND)
    # starts in [last - gmin + 1, gmin - 1] have no partner on either side
    bad_lo, bad_hi = max(0, last - gmin + 1), min(last, gmin - 1)
    n_bad = max(0, bad_hi - bad_lo + 1)
    n_feasible = last + 1 - n_bad
    if n_feasible <= 0:
        raise SamplingError(f"no admissible anchor for track {source_id!r}")
    k = int(rng.integers(n_feasible))
    anchor = k if k < bad_lo or n_bad == 0 else k + n_bad
    left = (max(0, anchor - gmax), anchor - gmin)
    right = (anchor + gmin, min(last, anchor + gmax))
    n_left = max(0, left[1] - left[0] + 1)
    n_right = max(0, right[1] - right[0] + 1)
    j = int(rng.integers(n_left + n_right))
    positive = left[0] + j if j < n_left else right[0] + (j - n_left)
    return anchor, positive


def sample_view_pair(track: Waveform, rng_seed, frames: np.ndarray | None = None) -> ViewPair:
    """Sample an anchor/positive pair from a standardized track.

    ``frames`` may carry precomputed :func:`mel_frames` of the whole track;
    segments are then sliced from it instead of recomputed.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    a, p = view_pair_offsets(len(track.samples), rng, track.source_id)
    return ViewPair(_segment(track, a, frames), _segment(track, p, frames), track.source_id)


def _segment(track: Waveform, index: int, frames: np.ndarray | None) -> MelSegment:
    start = index / _FRAMES_PER_SECOND
    if frames is None:
        return log_mel(track, start)
    return MelSegment(frames[index : index + SEGMENT_FRAMES], start)
