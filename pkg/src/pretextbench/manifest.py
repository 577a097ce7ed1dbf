"""Line-delimited JSON dataset manifests.

The first line is a header ``{"label_names": [...], "dataset": name}``;
every following line is one track::

    {"audio_path": "audio/t0001.wav", "track_id": "t0001", "split": "train", "labels": ["c3"]}

Relative audio paths resolve against the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    audio_path: str
    track_id: str
    split: str
    labels: list[str] | None = None


@dataclass
class DatasetManifest:
    label_names: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)
    dataset: str = "dataset"
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen = set()
        known = set(self.label_names)
        for e in self.entries:
            if e.track_id in seen:
                raise ConfigError(f"duplicate track_id {e.track_id!r} in manifest")
            seen.add(e.track_id)
            if e.split not in SPLITS:
                raise ConfigError(f"track {e.track_id!r}: unknown split {e.split!r}")
            for lab in e.labels or ():
                if lab not in known:
                    raise ConfigError(f"track {e.track_id!r}: label {lab!r} not declared in header")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def has_split(self, name: str) -> bool:
        return any(e.split == name for e in self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.audio_path)
        return p if p.is_absolute() else self.root / p

    def label_matrix(self, entries: list[ManifestEntry]) -> np.ndarray:
        index = {n: i for i, n in enumerate(self.label_names)}
        y = np.zeros((len(entries), len(self.label_names)), dtype=np.float32)
        for r, e in enumerate(entries):
            for lab in e.labels or ():
                y[r, index[lab]] = 1.0
        return y

    def dumps(self) -> str:
        lines = [json.dumps({"dataset": self.dataset, "label_names": self.label_names}, sort_keys=True)]
        for e in self.entries:
            rec = {"audio_path": e.audio_path, "track_id": e.track_id, "split": e.split}
            if e.labels is not None:
                rec["labels"] = list(e.labels)
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise ConfigError(f"manifest {path} is empty")
        try:
            header = json.loads(lines[0])
            names = header["label_names"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ConfigError(f"manifest {path}: bad header line ({e})") from None
        entries = []
        for i, ln in enumerate(lines[1:], start=2):
            try:
                rec = json.loads(ln)
                entries.append(
                    ManifestEntry(rec["audio_path"], str(rec["track_id"]), rec["split"], rec.get("labels"))
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ConfigError(f"manifest {path} line {i}: {e}") from None
        return cls(list(names), entries, header.get("dataset", path.stem), path.parent)
