"""Pretext training: run configuration, track store and the shared training loop."""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .audio import SEGMENT_FRAMES, load_track, mel_frames, view_pair_offsets
from .encoder import (
    EncoderConfig,
    Params,
    encode_batch,
    init_predictor,
    init_projector,
    init_weights,
    predict,
    project,
    set_input_stats,
    trainable,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DecodeError,
    DomainError,
    EmptyInputError,
    NonFiniteError,
    NumericAbort,
    TooShortError,
)
from .manifest import DatasetManifest
from .objectives import (
    ObjectiveConfig,
    TeacherState,
    barlow_twins,
    byol_symmetric,
    center_update,
    clustering_symmetric,
    collapse_diagnostics,
    ema_update,
    normalize_rows,
    nt_xent,
    vicreg,
)
from .optim import Adam
from .tensor import DTYPE, Tensor, concat, no_grad

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    # desk scale; a full-size run is 1000 epochs x 512 steps x 256 pairs
    epochs: int = 20
    steps_per_epoch: int = 64
    batch_pairs: int = 32


@dataclass
class OptimConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class DataConfig:
    manifest: str | None = None
    split: str = "train"
    val_fraction: float = 0.05


@dataclass
class RunConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: Schedule = field(default_factory=Schedule)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    output_dir: str = "runs/run"
    # per-epoch checkpoints kept on disk besides last.ckpt (0 keeps all)
    keep_epoch_checkpoints: int = 1

    def validate(self) -> None:
        self.objective.validate()
        self.encoder.validate()
        s = self.schedule
        if s.batch_pairs < 2:
            raise ConfigError(f"batch_pairs must be >= 2, got {s.batch_pairs}")
        if s.epochs < 0 or s.steps_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.optimizer.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if not 0.0 <= self.data.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(d["optimizer"]["betas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"objective", "encoder", "data", "schedule", "optimizer", "seed", "output_dir", "keep_epoch_checkpoints"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            opt = dict(d.get("optimizer", {}))
            if "betas" in opt:
                opt["betas"] = tuple(opt["betas"])
            return cls(
                objective=ObjectiveConfig(**d.get("objective", {})),
                encoder=EncoderConfig(**d.get("encoder", {})),
                data=DataConfig(**d.get("data", {})),
                schedule=Schedule(**d.get("schedule", {})),
                optimizer=OptimConfig(**opt),
                seed=int(d.get("seed", 0)),
                output_dir=str(d.get("output_dir", "runs/run")),
                keep_epoch_checkpoints=int(d.get("keep_epoch_checkpoints", 1)),
            )
        except TypeError as e:
            raise ConfigError(f"bad config: {e}") from None

    def portable_dict(self) -> dict:
        """Config without machine-specific paths; stored inside checkpoints."""
        d = self.to_dict()
        d.pop("output_dir")
        if d["data"]["manifest"]:
            d["data"]["manifest"] = Path(d["data"]["manifest"]).name
        return d


# -- data -----------------------------------------------------------------------


@dataclass
class Track:
    track_id: str
    frames: np.ndarray  # full-track log-mel, hop-grid aligned
    n_samples: int
    labels: np.ndarray | None = None


_FRAME_CACHE: dict[tuple, tuple[np.ndarray, int]] = {}


def _track_features(path: Path) -> tuple[np.ndarray, int]:
    st = path.stat()
    key = (str(path.resolve()), st.st_size, st.st_mtime_ns)
    hit = _FRAME_CACHE.get(key)
    if hit is None:
        w = load_track(path)
        hit = (mel_frames(w.samples), len(w.samples))
        _FRAME_CACHE[key] = hit
    return hit


def clear_feature_cache() -> None:
    _FRAME_CACHE.clear()


def load_split(manifest: DatasetManifest, split: str) -> list[Track]:
    entries = manifest.split(split)
    y = manifest.label_matrix(entries)
    out = []
    for e, row in zip(entries, y):
        try:
            frames, n = _track_features(manifest.resolve(e))
        except FileNotFoundError:
            raise DecodeError(f"track {e.track_id!r}: audio file {manifest.resolve(e)} not found", 0) from None
        except DecodeError as err:
            raise DecodeError(f"track {e.track_id!r}: {err.message}", err.offset) from None
        except (TooShortError, EmptyInputError) as err:
            raise type(err)(f"track {e.track_id!r}: {err}") from None
        out.append(Track(e.track_id, frames, n, row if e.labels is not None else None))
    return out


# -- model state ----------------------------------------------------------------


def _prototypes(cfg: ObjectiveConfig, seed: int) -> Params:
    rng = np.random.default_rng([seed, 4])
    w = rng.standard_normal((2048, cfg.n_prototypes)).astype(DTYPE)
    w /= np.linalg.norm(w, axis=0, keepdims=True)
    return {"head/prototypes": Tensor(w, requires_grad=True)}


def build_student(config: RunConfig) -> Params:
    seed = config.encoder.seed
    p = init_weights(config.encoder)
    p.update(init_projector(seed))
    if config.objective.kind == "byol" and config.objective.use_predictor:
        p.update(init_predictor(seed))
    if config.objective.kind == "clustering":
        p.update(_prototypes(config.objective, seed))
    return p


def _teacher_names(params: Params) -> list[str]:
    return [k for k in params if not k.startswith("predictor/")]


@dataclass
class TrainState:
    config: RunConfig
    student: Params
    optimizer: Adam
    teacher: TeacherState | None = None
    global_step: int = 0
    epoch: int = 0

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"student/{k}": v.data for k, v in self.student.items()}
        if self.teacher is not None:
            out.update({f"teacher/{k}": v.data for k, v in self.teacher.params.items()})
            if self.teacher.center is not None:
                out["teacher/center"] = self.teacher.center
        names = [k for k, _ in trainable(self.student)]
        st = self.optimizer.state
        for k, m, v in zip(names, st.first_moment, st.second_moment):
            out[f"optimizer/m/{k}"] = m
            out[f"optimizer/v/{k}"] = v
        out["optimizer/step"] = np.array([st.step_count], dtype=DTYPE)
        return out

    def save(self, path, last: bool = False) -> None:
        meta = {
            "format": "pretextbench-checkpoint/1",
            "objective": self.config.objective.kind,
            "config": self.config.portable_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "last": last,
        }
        checkpoint.save(path, self.tensors(), meta)


def load_encoder(path) -> tuple[Params, dict]:
    """Student encoder parameters and metadata from a pretext checkpoint."""
    tensors, meta = checkpoint.load(path)
    if "config" not in meta:
        raise CheckpointError("meta.config: missing")
    params = {k[len("student/") :]: Tensor(v) for k, v in tensors.items() if k.startswith("student/encoder/")}
    if not params:
        raise CheckpointError("tensors: no student/encoder/* entries")
    return params, meta


# -- training loop --------------------------------------------------------------


def _crc(s: str) -> int:
    return zlib.crc32(s.encode("utf-8"))


def sample_batch(tracks: list[Track], batch_pairs: int, seed: int, step: int) -> tuple[np.ndarray, np.ndarray, list]:
    """Anchor and positive frame stacks (``B x 398 x 128`` each) for one step."""
    rng = np.random.default_rng([seed, 1, step])
    idx = rng.choice(len(tracks), size=batch_pairs, replace=len(tracks) < batch_pairs)
    a, p, meta = [], [], []
    for slot, i in enumerate(idx):
        t = tracks[int(i)]
        # a track drawn twice in one batch still gets independent pairs
        pr = np.random.default_rng([seed, _crc(t.track_id), step, slot])
        ia, ip = view_pair_offsets(t.n_samples, pr, t.track_id)
        a.append(t.frames[ia : ia + SEGMENT_FRAMES])
        p.append(t.frames[ip : ip + SEGMENT_FRAMES])
        meta.append((t.track_id, ia, ip))
    return np.stack(a), np.stack(p), meta


def _fixed_batch(tracks: list[Track], batch_pairs: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    a, p, _ = sample_batch(tracks, batch_pairs, seed ^ 0x5A5A5A, 0)
    return a, p


class Runner:
    """Forward pass shared by every objective; only the loss and the
    post-step teacher hooks differ between objectives."""

    def __init__(self, state: TrainState):
        self.state = state
        self.cfg = state.config.objective
        self.time_pool = state.config.encoder.time_pool

    def _embed_project(self, params: Params, a: np.ndarray, p: np.ndarray, mode: str):
        b = a.shape[0]
        emb = encode_batch(params, np.concatenate([a, p]), self.time_pool)
        za = project(emb[:b], params, mode)
        zb = project(emb[b:], params, mode)
        return emb, za, zb

    def _logits(self, params: Params, z: Tensor) -> Tensor:
        return normalize_rows(z) @ params["head/prototypes"]

    def loss(self, a: np.ndarray, p: np.ndarray, mode: str = "train") -> tuple[Tensor, dict]:
        st, cfg = self.state, self.cfg
        emb, za, zb = self._embed_project(st.student, a, p, mode)
        extras: dict = {"embeddings": emb.data, "projections": za.data}
        if cfg.kind == "contrastive":
            return nt_xent(za, zb, cfg.temperature), extras
        if cfg.kind == "barlow_twins":
            return barlow_twins(za, zb, cfg.bt_lambda), extras
        if cfg.kind == "vicreg":
            return vicreg(za, zb, cfg), extras
        with no_grad():
            _, ta, tb = self._embed_project(st.teacher.params, a, p, "frozen_stats")
        if cfg.kind == "byol":
            if cfg.use_predictor:
                pa, pb = predict(za, st.student, mode), predict(zb, st.student, mode)
            else:
                pa, pb = za, zb
            return byol_symmetric(pa, pb, ta, tb), extras
        # clustering
        with no_grad():
            la_t, lb_t = self._logits(st.teacher.params, ta), self._logits(st.teacher.params, tb)
        la, lb = self._logits(st.student, za), self._logits(st.student, zb)
        center = st.teacher.center if cfg.use_centering else None
        extras["teacher_logits"] = np.concatenate([la_t.data, lb_t.data])
        return clustering_symmetric(la, lb, la_t, lb_t, center, cfg.student_temp, cfg.teacher_temp), extras

    def after_step(self, extras: dict) -> None:
        st, cfg = self.state, self.cfg
        if st.teacher is None:
            return
        ema_update(st.teacher, st.student, cfg.ema_momentum)
        if cfg.kind == "clustering" and cfg.use_centering:
            st.teacher.center = center_update(st.teacher.center, extras["teacher_logits"], cfg.center_momentum)

    def diagnostics(self, a: np.ndarray, p: np.ndarray) -> dict:
        with no_grad():
            loss, extras = self.loss(a, p, mode="frozen_stats")
        out = {"val_loss": float(loss.data)}
        d = collapse_diagnostics(extras["embeddings"])
        out["embedding_std"] = d["embedding_std"]
        out["projection_std"] = collapse_diagnostics(extras["projections"])["embedding_std"]
        if "teacher_logits" in extras:
            k = self.cfg.n_prototypes
            assign = extras["teacher_logits"].argmax(axis=1)
            out["cluster_usage_entropy"] = collapse_diagnostics(
                extras["embeddings"], assign, k
            )["cluster_usage_entropy"]
        return out


@dataclass
class PretrainResult:
    run_dir: Path
    last_checkpoint: Path
    diagnostics: list[dict]
    losses: list[float]


def _split_val(tracks: list[Track], frac: float, seed: int) -> tuple[list[Track], list[Track]]:
    if frac <= 0 or len(tracks) < 3:
        return tracks, []
    n_val = max(1, int(round(frac * len(tracks))))
    perm = np.random.default_rng([seed, 7]).permutation(len(tracks))
    val_idx = set(perm[:n_val].tolist())
    return [t for i, t in enumerate(tracks) if i not in val_idx], [t for i, t in enumerate(tracks) if i in val_idx]


def init_state(config: RunConfig, tracks: list[Track]) -> TrainState:
    student = build_student(config)
    sample = np.concatenate([t.frames for t in tracks[:64]])
    set_input_stats(student, sample)
    opt = Adam([v for _, v in trainable(student)], lr=config.optimizer.lr, betas=config.optimizer.betas,
               eps=config.optimizer.eps)
    teacher = None
    if config.objective.uses_teacher:
        names = _teacher_names(student)
        k = config.objective.n_prototypes if config.objective.kind == "clustering" else None
        teacher = TeacherState.from_student({n: student[n] for n in names}, k)
    return TrainState(config, student, opt, teacher)


def pretrain(
    config: RunConfig,
    tracks: list[Track] | None = None,
    on_epoch: Callable[[int, dict], bool | None] | None = None,
) -> PretrainResult:
    """Run the pretext schedule and write checkpoints, config and a JSONL log.

    ``tracks`` may be passed to reuse decoded features; otherwise they are
    loaded from ``config.data.manifest``. ``on_epoch`` receives each epoch's
    diagnostics.
    """
    config.validate()
    run_dir = Path(config.output_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    if tracks is None:
        if not config.data.manifest:
            raise ConfigError("no data: set data.manifest")
        tracks = load_split(DatasetManifest.load(config.data.manifest), config.data.split)
    if not tracks:
        raise ConfigError(f"split {config.data.split!r} has no tracks")
    train_tracks, val_tracks = _split_val(tracks, config.data.val_fraction, config.seed)
    val_tracks = val_tracks or train_tracks
    state = init_state(config, train_tracks)
    runner = Runner(state)
    sched = config.schedule
    va, vp = _fixed_batch(val_tracks, sched.batch_pairs, config.seed)
    params = [v for _, v in trainable(state.student)]
    kind = config.objective.kind
    diagnostics: list[dict] = []
    losses: list[float] = []
    with open(run_dir / "log.jsonl", "w") as logf:

        def emit(rec: dict) -> None:
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()

        d0 = runner.diagnostics(va, vp)
        d0["epoch"] = -1
        diagnostics.append(d0)
        emit({"type": "diagnostics", **d0})
        for epoch in range(sched.epochs):
            state.epoch = epoch
            for _ in range(sched.steps_per_epoch):
                t0 = time.perf_counter()
                a, p, _ = sample_batch(train_tracks, sched.batch_pairs, config.seed, state.global_step)
                try:
                    state.optimizer.zero_grad()
                    loss, extras = runner.loss(a, p)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise NonFiniteError("loss is not finite")
                    loss.backward()
                    state.optimizer.step()
                    for prm in params:
                        if not np.isfinite(prm.data).all():
                            raise NonFiniteError("parameter update produced non-finite values")
                    runner.after_step(extras)
                except (NonFiniteError, DomainError) as e:
                    emit({"type": "abort", "objective": kind, "step": state.global_step, "detail": str(e)})
                    raise NumericAbort(kind, state.global_step, str(e)) from e
                losses.append(value)
                emit({
                    "type": "step", "epoch": epoch, "step": state.global_step, "loss": value,
                    "seconds": round(time.perf_counter() - t0, 4),
                })
                state.global_step += 1
            d = runner.diagnostics(va, vp)
            d["epoch"] = epoch
            diagnostics.append(d)
            emit({"type": "diagnostics", **d})
            log.info("%s epoch %d: %s", kind, epoch, d)
            state.save(run_dir / "checkpoints" / f"epoch_{epoch:04d}.ckpt")
            keep = config.keep_epoch_checkpoints
            if keep > 0 and epoch >= keep:
                (run_dir / "checkpoints" / f"epoch_{epoch - keep:04d}.ckpt").unlink(missing_ok=True)
            if on_epoch is not None and on_epoch(epoch, d):
                break
        last = run_dir / "checkpoints" / "last.ckpt"
        state.save(last, last=True)
        emit({"type": "done", "last_checkpoint": "checkpoints/last.ckpt", "global_step": state.global_step})
    return PretrainResult(run_dir, last, diagnostics, losses)
