"""Reproducible synthetic tagging datasets.

Each class is a timbral recipe: a harmonic stack with its own fundamental
range, harmonic amplitude profile and noise level. A track plays a sequence
of notes from one class (or, with some probability, two overlaid classes),
so pitch changes from segment to segment while timbre stays fixed.

On top of the voices runs a sequence of nuisance scenes, each lasting a few
seconds: band-limited noise plus a distractor tone at random levels. Scenes
change faster than the 4 to 16 s spacing of a view pair, so two views of a
track rarely share one. A representation has to learn to ignore them, while
fixed random features carry them along.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import next_fast_len

from .audio import SAMPLE_RATE, MIN_TRACK_SECONDS, write_wav
from .errors import ConfigError
from .manifest import DatasetManifest, ManifestEntry

N_HARMONICS = 16


@dataclass(frozen=True)
class SynthSpec:
    n_tracks: int = 400
    n_classes: int = 8
    duration: float = 30.0
    seed: int = 0
    multi_label_prob: float = 0.2
    split_fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)
    f0_low: float = 110.0
    f0_octaves: float = 2.0  # total register shared by all classes
    f0_span_octaves: float = 1.0  # width of one class's range inside the register
    nuisance_level: float = 3.0
    scene_seconds: tuple[float, float] = (2.0, 6.0)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_tracks < 1:
            raise ConfigError(f"n_tracks must be >= 1, got {self.n_tracks}")
        if self.duration < MIN_TRACK_SECONDS:
            raise ConfigError(f"duration must be >= {MIN_TRACK_SECONDS} s, got {self.duration}")
        if not 0.0 <= self.multi_label_prob <= 1.0:
            raise ConfigError("multi_label_prob must lie in [0, 1]")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be three non-negative numbers summing to 1, got {fr}")


@dataclass(frozen=True)
class ClassRecipe:
    f0_range: tuple[float, float]
    harmonic_gains: np.ndarray
    noise_level: float
    noise_smoothing: float
    note_seconds: tuple[float, float]


def class_recipes(spec: SynthSpec) -> list[ClassRecipe]:
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    recipes = []
    for c in range(spec.n_classes):
        frac = c / (spec.n_classes - 1)
        lo = spec.f0_low * 2.0 ** (frac * (spec.f0_octaves - spec.f0_span_octaves))
        hi = lo * 2.0**spec.f0_span_octaves
        h = np.arange(1, N_HARMONICS + 1)
        tilt = rng.uniform(0.5, 2.0)
        mask = rng.random(N_HARMONICS) < 0.6
        mask[0] = True
        gains = mask * h**-tilt * rng.uniform(0.5, 1.0, N_HARMONICS)
        recipes.append(
            ClassRecipe(
                f0_range=(lo, hi),
                harmonic_gains=gains / np.abs(gains).sum(),
                noise_level=float(rng.uniform(0.0, 0.3)),
                noise_smoothing=float(rng.uniform(0.0, 0.95)),
                note_seconds=(float(rng.uniform(0.15, 0.4)), float(rng.uniform(0.5, 1.2))),
            )
        )
    return recipes


def _one_pole(x: np.ndarray, a: float) -> np.ndarray:
    from scipy.signal import lfilter

    return lfilter([1.0 - a], [1.0, -a], x)


def _voice(recipe: ClassRecipe, n: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(n)
    t = 0
    lo_note, hi_note = recipe.note_seconds
    nyquist = SAMPLE_RATE / 2
    while t < n:
        length = min(n - t, int(rng.uniform(lo_note, hi_note) * SAMPLE_RATE))
        f0 = float(np.exp(rng.uniform(np.log(recipe.f0_range[0]), np.log(recipe.f0_range[1]))))
        tt = np.arange(length) / SAMPLE_RATE
        note = np.zeros(length)
        for k, g in enumerate(recipe.harmonic_gains, start=1):
            if g == 0 or k * f0 >= nyquist:
                continue
            note += g * np.sin(2 * np.pi * k * f0 * tt + rng.uniform(0, 2 * np.pi))
        attack = min(length, int(0.01 * SAMPLE_RATE))
        env = np.exp(-tt * rng.uniform(1.0, 4.0))
        env[:attack] *= np.linspace(0.0, 1.0, attack, endpoint=False)
        out[t : t + length] = note * env * rng.uniform(0.6, 1.0)
        t += length
    noise = _one_pole(rng.standard_normal(n), recipe.noise_smoothing)
    noise /= np.max(np.abs(noise)) + 1e-12
    return out + recipe.noise_level * noise


def _band_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """White noise shaped by a random bump in log frequency."""
    # scene lengths are arbitrary; zero-padding to a smooth FFT size avoids prime-length transforms
    size = next_fast_len(n, real=True)
    spec = np.fft.rfft(rng.standard_normal(n), size)
    f = np.fft.rfftfreq(size, 1.0 / SAMPLE_RATE)
    center = np.log(rng.uniform(100.0, 6000.0))
    width = rng.uniform(0.3, 1.5)
    spec *= np.exp(-0.5 * ((np.log(np.maximum(f, 1.0)) - center) / width) ** 2)
    x = np.fft.irfft(spec, size)[:n]
    return x / (np.max(np.abs(x)) + 1e-12)


def _distractor(n: int, rng: np.random.Generator) -> np.ndarray:
    """A harmonic tone whose pitch and timbre belong to no class."""
    f0 = float(np.exp(rng.uniform(np.log(80.0), np.log(1000.0))))
    gains = (rng.random(N_HARMONICS) < 0.5) * rng.uniform(0.0, 1.0, N_HARMONICS)
    gains[0] = 1.0
    t = np.arange(n) / SAMPLE_RATE
    vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(2.0, 7.0) * t)
    phase = 2 * np.pi * f0 * np.cumsum(vib) / SAMPLE_RATE
    x = np.zeros(n)
    for k, g in enumerate(gains, start=1):
        if g > 0 and k * f0 < SAMPLE_RATE / 2:
            x += g * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    return x / (np.max(np.abs(x)) + 1e-12)


def _scenes(n: int, rng: np.random.Generator, level: float, scene_seconds: tuple[float, float]) -> np.ndarray:
    """Nuisance that changes every few seconds: band noise and a distractor tone
    at random levels, cross-faded over 50 ms at scene boundaries."""
    out = np.zeros(n)
    t = 0
    fade = int(0.05 * SAMPLE_RATE)
    while t < n:
        length = min(n - t, int(rng.uniform(*scene_seconds) * SAMPLE_RATE))
        x = rng.uniform(0.0, 1.0) * _band_noise(length, rng) + rng.uniform(0.0, 1.0) * _distractor(length, rng)
        ramp = np.ones(length)
        k = min(fade, length // 2)
        if k > 0:
            ramp[:k] = np.linspace(0.0, 1.0, k)
            ramp[length - k :] = np.linspace(1.0, 0.0, k)
        out[t : t + length] = level * x * ramp
        t += length
    return out


def synth_dataset(spec: SynthSpec, output_dir) -> DatasetManifest:
    """Render ``spec`` into ``output_dir/audio/*.wav`` plus ``output_dir/manifest.jsonl``."""
    spec.validate()
    out = Path(output_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    recipes = class_recipes(spec)
    names = [f"class_{c}" for c in range(spec.n_classes)]
    n = int(round(spec.duration * SAMPLE_RATE))
    order_rng = np.random.default_rng([spec.seed, 0x5B117])
    splits = _assign_splits(spec, order_rng)
    entries = []
    for i in range(spec.n_tracks):
        rng = np.random.default_rng([spec.seed, i])
        primary = i % spec.n_classes
        labels = [primary]
        if spec.n_classes > 1 and rng.random() < spec.multi_label_prob:
            other = int(rng.integers(spec.n_classes - 1))
            labels.append(other + (other >= primary))
        x = sum(_voice(recipes[c], n, rng) for c in labels)
        x = x + _scenes(n, rng, spec.nuisance_level, spec.scene_seconds)
        x = x / (np.max(np.abs(x)) + 1e-12) * rng.uniform(0.3, 0.95)
        track_id = f"track_{i:05d}"
        rel = f"audio/{track_id}.wav"
        write_wav(out / rel, x)
        entries.append(ManifestEntry(rel, track_id, splits[i], sorted(names[c] for c in labels)))
    manifest = DatasetManifest(names, entries, f"synth{spec.n_classes}", out)
    manifest.save(out / "manifest.jsonl")
    return manifest


def _assign_splits(spec: SynthSpec, rng: np.random.Generator) -> list[str]:
    n = spec.n_tracks
    n_train = int(round(spec.split_fractions[0] * n))
    n_val = int(round(spec.split_fractions[1] * n))
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    perm = rng.permutation(n)
    out = [""] * n
    for slot, idx in enumerate(perm):
        out[idx] = labels[slot]
    return out
