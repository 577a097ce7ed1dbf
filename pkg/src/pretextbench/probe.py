"""Frozen-backbone evaluation: track embeddings, linear probes, bootstrap, limited data."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import SEGMENT_FRAMES, SEGMENT_SAMPLES, HOP_LENGTH, Waveform, mel_frames
from .encoder import DEFAULT_TIME_POOL, Params, encode_batch
from .errors import ConfigError, TooShortError
from .metrics import macro_roc_auc, mean_average_precision
from .optim import Adam
from .tensor import DTYPE, Tensor, log, no_grad, relu

log_ = logging.getLogger(__name__)

CSV_FIELDS = ["dataset", "objective", "percentage", "repeat", "roc_mean", "roc_std", "map_mean", "map_std"]
LIMITED_PERCENTAGES = (1, 5, 10, 20)
LIMITED_REPEATS = 4

_WINDOW_FRAMES = SEGMENT_SAMPLES // HOP_LENGTH  # 400 hops per 4 s window


@dataclass
class TrackEmbedding:
    track_id: str
    vector: np.ndarray
    n_segments_averaged: int


def track_embedding(
    track: Waveform, params: Params, time_pool: int = DEFAULT_TIME_POOL, frames: np.ndarray | None = None
) -> TrackEmbedding:
    """Average of the embeddings of consecutive non-overlapping 4 s windows.

    A trailing remainder shorter than 4 s is dropped.
    """
    n_windows = len(track.samples) // SEGMENT_SAMPLES
    if n_windows < 1:
        raise TooShortError(f"track {track.source_id!r} is {track.duration:.3f} s; need >= 4 s")
    if frames is None:
        frames = mel_frames(track.samples[: n_windows * SEGMENT_SAMPLES])
    batch = np.stack([frames[i * _WINDOW_FRAMES : i * _WINDOW_FRAMES + SEGMENT_FRAMES] for i in range(n_windows)])
    with no_grad():
        emb = encode_batch(params, batch, time_pool).data
    return TrackEmbedding(track.source_id, emb.mean(axis=0), n_windows)


@dataclass
class ProbeSchedule:
    epochs: int = 25
    steps_per_epoch: int = 128
    batch_size: int = 256
    lr: float = 1e-3


@dataclass
class ProbeModel:
    weights: np.ndarray  # D x N
    bias: np.ndarray  # N
    label_names: list[str]
    best_epoch: int = 0
    val_losses: list[float] = field(default_factory=list)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=DTYPE) @ self.weights + self.bias


def _bce_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    # relu(z) - z*y + log(1 + exp(-|z|))
    abs_z = relu(z) + relu(z * -1.0)
    return (relu(z) - z * y + log((abs_z * -1.0).exp() + 1.0)).mean()


def _bce_numpy(z: np.ndarray, y: np.ndarray) -> float:
    z = z.astype(np.float64)
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def select_best(val_losses) -> int:
    """Index of the first minimum."""
    return int(np.argmin(np.asarray(val_losses, dtype=np.float64)))


def train_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray | None,
    val_y: np.ndarray | None,
    label_names: list[str] | None = None,
    schedule: ProbeSchedule | None = None,
    seed: int = 0,
) -> ProbeModel:
    """Fit a single linear layer with per-label sigmoid cross-entropy.

    Features are standardized with training statistics during fitting and
    the affine map is folded back into the returned weights. The epoch
    with the lowest validation loss is returned.
    """
    schedule = schedule or ProbeSchedule()
    x = np.asarray(train_x, dtype=DTYPE)
    y = np.asarray(train_y, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("probe needs a non-empty training set")
    if y.ndim != 2 or y.shape[1] == 0 or y.shape[0] != x.shape[0]:
        raise ConfigError(f"probe labels must be {x.shape[0]} x N with N >= 1, got {y.shape}")
    n, d = x.shape
    k = y.shape[1]
    names = list(label_names) if label_names is not None else [str(j) for j in range(k)]
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-6, sd, 1.0).astype(DTYPE)
    xs = (x - mu) / sd
    has_val = val_x is not None and len(val_x) > 0
    if has_val:
        vxs = (np.asarray(val_x, dtype=DTYPE) - mu) / sd
        vy = np.asarray(val_y, dtype=DTYPE)

    w = Tensor(np.zeros((d, k)), requires_grad=True)
    b = Tensor(np.zeros(k), requires_grad=True)
    opt = Adam([w, b], lr=schedule.lr)
    rng = np.random.default_rng([seed, 0xB0BE])
    bs = min(schedule.batch_size, n)
    best = None
    val_losses: list[float] = []
    for epoch in range(schedule.epochs):
        for _ in range(schedule.steps_per_epoch):
            idx = rng.choice(n, size=bs, replace=False)
            opt.zero_grad()
            loss = _bce_with_logits(Tensor(xs[idx]) @ w + b, y[idx])
            loss.backward()
            opt.step()
        if has_val:
            vl = _bce_numpy(vxs @ w.data + b.data, vy)
        else:
            vl = _bce_numpy(xs @ w.data + b.data, y)
        val_losses.append(vl)
        if best is None or vl < best[0]:
            best = (vl, epoch, w.data.copy(), b.data.copy())
    if best is None:
        best = (math.inf, -1, w.data.copy(), b.data.copy())
    _, best_epoch, wb, bb = best
    weights = (wb / sd[:, None]).astype(DTYPE)
    bias = (bb - (mu / sd) @ wb).astype(DTYPE)
    return ProbeModel(weights, bias, names, best_epoch, val_losses)


@dataclass
class BootstrapStats:
    mean_roc: float
    std_roc: float
    mean_map: float
    std_map: float
    n_resamples: int
    resample_fraction: float
    seed: int
    skipped_label_events: int = 0


def bootstrap_eval(
    scores: np.ndarray, labels: np.ndarray, fraction: float = 0.5, n: int = 50, seed: int = 0
) -> BootstrapStats:
    """Repeatedly score a random ``floor(fraction * M)`` subset drawn without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"bootstrap fraction must lie in (0, 1], got {fraction}")
    if n < 1:
        raise ConfigError(f"bootstrap needs n >= 1, got {n}")
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    m = scores.shape[0]
    size = int(math.floor(fraction * m))
    if size < 2:
        raise ConfigError(f"bootstrap subset of {size} rows is too small")
    if size == m:
        # every resample is the full set; averaging n equal floats could drift by an ulp
        roc, _, sk = macro_roc_auc(scores, labels)
        ap, _, sk2 = mean_average_precision(scores, labels)
        return BootstrapStats(roc, 0.0, ap, 0.0, n, float(fraction), int(seed), n * (len(sk) + len(sk2)))
    rng = np.random.default_rng([seed, 0xB007])
    rocs, maps = [], []
    skipped = 0
    for _ in range(n):
        idx = np.sort(rng.choice(m, size=size, replace=False))
        roc, _, sk = macro_roc_auc(scores[idx], labels[idx])
        ap, _, sk2 = mean_average_precision(scores[idx], labels[idx])
        rocs.append(roc)
        maps.append(ap)
        skipped += len(sk) + len(sk2)
    return BootstrapStats(
        float(np.mean(rocs)), float(np.std(rocs)), float(np.mean(maps)), float(np.std(maps)),
        n, float(fraction), int(seed), skipped,
    )


@dataclass
class ProbeReport:
    roc_macro: float
    map_macro: float
    per_label: dict[str, dict[str, float]]
    bootstrap: dict
    metadata: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ProbeReport":
        d = json.loads(text)
        return cls(d["roc_macro"], d["map_macro"], d["per_label"], d["bootstrap"], d["metadata"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ProbeReport":
        return cls.from_json(Path(path).read_text())

    def csv_row(self) -> dict:
        m = self.metadata
        return {
            "dataset": m.get("dataset", ""),
            "objective": m.get("objective", ""),
            "percentage": m.get("train_fraction", 100),
            "repeat": m.get("repeat_index", 0),
            "roc_mean": f"{self.bootstrap['mean_roc']:.6f}",
            "roc_std": f"{self.bootstrap['std_roc']:.6f}",
            "map_mean": f"{self.bootstrap['mean_map']:.6f}",
            "map_std": f"{self.bootstrap['std_map']:.6f}",
        }


def evaluate(
    model: ProbeModel,
    test_x: np.ndarray,
    test_y: np.ndarray,
    bootstrap_fraction: float = 0.5,
    bootstrap_n: int = 50,
    seed: int = 0,
    metadata: dict | None = None,
) -> ProbeReport:
    scores = model.scores(test_x)
    names = model.label_names
    roc, roc_per, roc_skip = macro_roc_auc(scores, test_y, names)
    ap, ap_per, ap_skip = mean_average_precision(scores, test_y, names)
    per_label = {n: {"roc_auc": roc_per.get(n), "average_precision": ap_per.get(n)} for n in names}
    boot = bootstrap_eval(scores, test_y, bootstrap_fraction, bootstrap_n, seed)
    meta = dict(metadata or {})
    meta.setdefault("train_fraction", 100)
    meta.setdefault("repeat_index", 0)
    meta["best_probe_epoch"] = model.best_epoch
    meta["skipped_labels"] = sorted(set(roc_skip) | set(ap_skip))
    return ProbeReport(roc, ap, per_label, asdict(boot), meta)


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray


def limited_data_protocol(
    train: Split,
    val: Split,
    test: Split,
    label_names: list[str],
    percentages=LIMITED_PERCENTAGES,
    repeats: int = LIMITED_REPEATS,
    seed: int = 0,
    schedule: ProbeSchedule | None = None,
    bootstrap_fraction: float = 0.5,
    bootstrap_n: int = 50,
    metadata: dict | None = None,
    include_reference: bool = True,
) -> list[ProbeReport]:
    """Probe on random train subsets; one report per (percentage, repeat) plus the full-train cell."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    n = train.x.shape[0]
    cells: list[tuple[float, int]] = [(float(p), r) for p in percentages for r in range(repeats)]
    if include_reference and not any(p == 100 for p, _ in cells):
        cells.append((100.0, 0))
    reports = []
    for pct, rep in cells:
        if not 0 < pct <= 100:
            raise ConfigError(f"percentage must lie in (0, 100], got {pct}")
        rng = np.random.default_rng([seed, int(round(pct * 1000)), rep])
        size = max(1, int(math.ceil(pct / 100.0 * n)))
        idx = np.sort(rng.choice(n, size=size, replace=False)) if size < n else np.arange(n)
        missing = [label_names[j] for j in np.flatnonzero(train.y[idx].sum(axis=0) == 0)]
        if missing:
            log_.warning("%g%% repeat %d: no positives for %s", pct, rep, missing)
        model = train_probe(train.x[idx], train.y[idx], val.x, val.y, label_names, schedule, seed=seed + rep)
        meta = dict(metadata or {})
        meta.update(
            train_fraction=_clean_pct(pct), repeat_index=rep, n_train=int(size), labels_without_positives=missing
        )
        reports.append(evaluate(model, test.x, test.y, bootstrap_fraction, bootstrap_n, seed, meta))
    return reports


def _clean_pct(p: float):
    return int(p) if float(p).is_integer() else p


def write_csv(reports: list[ProbeReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.csv_row())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

