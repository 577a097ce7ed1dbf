"""Checkpoint-to-report plumbing shared by the CLI and the end-to-end tests."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .audio import HOP_LENGTH, SEGMENT_FRAMES, SEGMENT_SAMPLES
from .encoder import DEFAULT_TIME_POOL, Params, encode_batch
from .errors import ConfigError, TooShortError
from .manifest import DatasetManifest
from .probe import (
    LIMITED_PERCENTAGES,
    LIMITED_REPEATS,
    ProbeReport,
    ProbeSchedule,
    Split,
    evaluate,
    limited_data_protocol,
    train_probe,
    write_csv,
)
from .tensor import no_grad
from .train import Track, load_encoder, load_split

log = logging.getLogger(__name__)

EVAL_SPLITS = ("train", "val", "test")
_WINDOW = SEGMENT_SAMPLES // HOP_LENGTH


def embed_tracks(params: Params, tracks: list[Track], time_pool: int = DEFAULT_TIME_POOL) -> np.ndarray:
    """Track-level embeddings: the mean over non-overlapping 4 s windows."""
    out = []
    with no_grad():
        for t in tracks:
            n = t.n_samples // SEGMENT_SAMPLES
            if n < 1:
                raise TooShortError(f"track {t.track_id!r} is shorter than one 4 s window")
            batch = np.stack([t.frames[i * _WINDOW : i * _WINDOW + SEGMENT_FRAMES] for i in range(n)])
            out.append(encode_batch(params, batch, time_pool).data.mean(axis=0))
    return np.stack(out)


def _manifest_digest(manifest: DatasetManifest) -> str:
    return hashlib.sha256(manifest.dumps().encode("utf-8")).hexdigest()[:16]


def require_splits(manifest: DatasetManifest, splits=EVAL_SPLITS) -> None:
    missing = [s for s in splits if not manifest.has_split(s)]
    if missing:
        raise ConfigError(f"manifest has no tracks in split(s) {missing}")


def checkpoint_embeddings(
    ckpt_path, manifest: DatasetManifest, cache_dir=None
) -> tuple[dict[str, Split], dict]:
    """Embed every evaluation split with the checkpoint's frozen encoder.

    With ``cache_dir`` the arrays are stored under a key made of the
    checkpoint and manifest hashes, and reused on the next call.
    """
    require_splits(manifest)
    params, meta = load_encoder(ckpt_path)
    ckpt_hash = checkpoint.file_hash(ckpt_path)
    key = f"{ckpt_hash[:16]}_{_manifest_digest(manifest)}"
    cache = Path(cache_dir) / f"embeddings_{key}.npz" if cache_dir is not None else None
    info = {"checkpoint_sha256": ckpt_hash, "objective": meta.get("objective", ""), "cache_hit": False}
    if cache is not None and cache.exists():
        log.info("embedding cache hit %s; extraction skipped", cache.name)
        with np.load(cache) as z:
            splits = {s: Split(z[f"{s}_x"], z[f"{s}_y"]) for s in EVAL_SPLITS}
        info["cache_hit"] = True
        return splits, info
    time_pool = int(meta.get("config", {}).get("encoder", {}).get("time_pool", DEFAULT_TIME_POOL))
    splits = {}
    for s in EVAL_SPLITS:
        tracks = load_split(manifest, s)
        splits[s] = Split(embed_tracks(params, tracks, time_pool), manifest.label_matrix(manifest.split(s)))
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"{s}_{k}": getattr(splits[s], k) for s in EVAL_SPLITS for k in ("x", "y")}
        tmp = cache.with_suffix(".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(cache)
    return splits, info


def _metadata(manifest: DatasetManifest, info: dict, extra: dict) -> dict:
    meta = {
        "dataset": manifest.dataset,
        "objective": info["objective"],
        "checkpoint_sha256": info["checkpoint_sha256"],
    }
    meta.update(extra)
    return meta


def probe_checkpoint(
    ckpt_path,
    manifest: DatasetManifest,
    output_dir,
    bootstrap_n: int = 50,
    bootstrap_frac: float = 0.5,
    seed: int = 0,
    schedule: ProbeSchedule | None = None,
    cache_dir=None,
    label: str | None = None,
) -> ProbeReport:
    """Standard protocol: probe on the full train split, report on test."""
    splits, info = checkpoint_embeddings(ckpt_path, manifest, cache_dir)
    schedule = schedule or ProbeSchedule()
    if label:
        info["objective"] = label
    model = train_probe(
        splits["train"].x, splits["train"].y, splits["val"].x, splits["val"].y, manifest.label_names, schedule, seed
    )
    meta = _metadata(
        manifest, info, {"bootstrap_n": bootstrap_n, "bootstrap_fraction": bootstrap_frac, "seed": seed}
    )
    report = evaluate(model, splits["test"].x, splits["test"].y, bootstrap_frac, bootstrap_n, seed, meta)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    write_csv([report], out / "results.csv")
    return report


def limited_checkpoint(
    ckpt_path,
    manifest: DatasetManifest,
    output_dir,
    percentages=LIMITED_PERCENTAGES,
    repeats: int = LIMITED_REPEATS,
    bootstrap_n: int = 50,
    bootstrap_frac: float = 0.5,
    seed: int = 0,
    schedule: ProbeSchedule | None = None,
    cache_dir=None,
    label: str | None = None,
) -> list[ProbeReport]:
    splits, info = checkpoint_embeddings(ckpt_path, manifest, cache_dir)
    if label:
        info["objective"] = label
    meta = _metadata(
        manifest, info, {"bootstrap_n": bootstrap_n, "bootstrap_fraction": bootstrap_frac, "seed": seed}
    )
    reports = limited_data_protocol(
        splits["train"], splits["val"], splits["test"], manifest.label_names, percentages, repeats, seed,
        schedule, bootstrap_frac, bootstrap_n, meta,
    )
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        m = r.metadata
        r.save(out / f"report_p{m['train_fraction']}_r{m['repeat_index']}.json")
    write_csv(reports, out / "limited.csv")
    return reports


# -- comparison -------------------------------------------------------------------

COMPARE_FIELDS = ["dataset", "rank", "objective", "n_reports", "roc_mean", "roc_std", "map_mean", "map_std"]


@dataclass
class CompareRow:
    dataset: str
    objective: str
    n_reports: int
    roc_mean: float
    roc_std: float
    map_mean: float
    map_std: float


def collect_reports(report_dir) -> list[ProbeReport]:
    """Every parseable ``*.json`` report under ``report_dir``; malformed files are skipped."""
    reports = []
    for path in sorted(Path(report_dir).rglob("*.json")):
        try:
            r = ProbeReport.load(path)
            float(r.bootstrap["mean_roc"])
        except (ValueError, KeyError, TypeError, OSError) as e:
            log.warning("skipping %s: not a probe report (%s)", path, e)
            continue
        reports.append(r)
    return reports


def compare_reports(reports: list[ProbeReport], full_train_only: bool = True) -> list[CompareRow]:
    """One row per (dataset, objective), sorted by mean ROC descending within a dataset.

    Equal means are ordered by objective name. Several reports for the same
    pair (for instance repeated runs) are averaged.
    """
    groups: dict[tuple[str, str], list[ProbeReport]] = {}
    for r in reports:
        if full_train_only and float(r.metadata.get("train_fraction", 100)) != 100:
            continue
        key = (str(r.metadata.get("dataset", "")), str(r.metadata.get("objective", "")))
        groups.setdefault(key, []).append(r)
    rows = []
    for (dataset, objective), rs in groups.items():
        b = [r.bootstrap for r in rs]
        rows.append(
            CompareRow(
                dataset, objective, len(rs),
                float(np.mean([x["mean_roc"] for x in b])), float(np.mean([x["std_roc"] for x in b])),
                float(np.mean([x["mean_map"] for x in b])), float(np.mean([x["std_map"] for x in b])),
            )
        )
    rows.sort(key=lambda r: (r.dataset, -r.roc_mean, r.objective))
    return rows


def _ranked(rows: list[CompareRow]):
    rank, prev = 0, None
    for r in rows:
        rank = 1 if r.dataset != prev else rank + 1
        prev = r.dataset
        yield rank, r


def write_compare_csv(rows: list[CompareRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_FIELDS, lineterminator="\n")
        w.writeheader()
        for rank, r in _ranked(rows):
            w.writerow({
                "dataset": r.dataset, "rank": rank, "objective": r.objective, "n_reports": r.n_reports,
                "roc_mean": f"{r.roc_mean:.6f}", "roc_std": f"{r.roc_std:.6f}",
                "map_mean": f"{r.map_mean:.6f}", "map_std": f"{r.map_std:.6f}",
            })


def format_table(rows: list[CompareRow]) -> str:
    header = ["dataset", "#", "objective", "ROC-AUC", "mAP"]
    body = [
        [r.dataset, str(rank), r.objective, f"{r.roc_mean:.4f} ± {r.roc_std:.4f}", f"{r.map_mean:.4f} ± {r.map_std:.4f}"]
        for rank, r in _ranked(rows)
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def compare_dir(report_dir, output_dir=None) -> list[CompareRow]:
    reports = collect_reports(report_dir)
    rows = compare_reports(reports)
    out = Path(output_dir or report_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_compare_csv(rows, out / "compare.csv")
    (out / "compare.txt").write_text(format_table(rows))
    return rows
