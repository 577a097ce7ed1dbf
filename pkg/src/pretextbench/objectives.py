"""The five pretext losses, teacher updates and collapse monitors."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .errors import BatchSizeError, ConfigError, DimensionError, DomainError, NonFiniteError
from .tensor import DTYPE, Tensor, concat, log_softmax, matmul, relu, sqrt

KINDS = ("contrastive", "byol", "clustering", "barlow_twins", "vicreg")


@dataclass
class ObjectiveConfig:
    kind: str = "contrastive"
    temperature: float = 0.1
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    n_prototypes: int = 512
    bt_lambda: float = 5e-3
    vicreg_inv: float = 25.0
    vicreg_var: float = 25.0
    vicreg_cov: float = 1.0
    vicreg_gamma: float = 1.0
    vicreg_eps: float = 1e-4
    # ablation switches used by the collapse demonstrations
    use_predictor: bool = True
    use_centering: bool = True

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        for name in ("temperature", "teacher_temp", "student_temp"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("ema_momentum", "center_momentum"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.n_prototypes < 2:
            raise ConfigError("n_prototypes must be >= 2")
        for name in ("bt_lambda", "vicreg_inv", "vicreg_var", "vicreg_cov", "vicreg_gamma", "vicreg_eps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def uses_teacher(self) -> bool:
        return self.kind in ("byol", "clustering")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TeacherState:
    params: dict[str, Tensor]
    center: np.ndarray | None = None

    @classmethod
    def from_student(cls, student: Mapping[str, Tensor], n_prototypes: int | None = None) -> "TeacherState":
        params = {k: Tensor(v.data.copy()) for k, v in student.items()}
        center = None if n_prototypes is None else np.zeros(n_prototypes, dtype=DTYPE)
        return cls(params, center)


def _require_batch(z: Tensor, what: str) -> int:
    if z.ndim != 2:
        raise DimensionError(f"{what}: expected a B x D matrix, got shape {z.shape}")
    if z.shape[0] < 2:
        raise BatchSizeError(f"{what} needs B >= 2, got {z.shape[0]}")
    return z.shape[0]


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: views have shapes {a.shape} and {b.shape}")


def normalize_rows(x: Tensor) -> Tensor:
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1))
    if np.any(norms == 0):
        raise DomainError(f"cannot L2-normalize zero-norm rows {np.flatnonzero(norms == 0).tolist()}")
    return x / sqrt((x * x).sum(axis=1, keepdims=True))


def nt_xent(z_a: Tensor, z_b: Tensor, temperature: float = 0.1) -> Tensor:
    """Normalized temperature-scaled cross-entropy with in-batch negatives.

    Each of the 2B views is classified against the other 2B - 1: its pair
    is the positive, the remaining 2B - 2 are negatives.
    """
    _same_shape(z_a, z_b, "nt_xent")
    b = _require_batch(z_a, "nt_xent")
    if temperature <= 0:
        raise ConfigError("temperature must be > 0")
    z = normalize_rows(concat([z_a, z_b], axis=0))
    logits = matmul(z, z.T) * (1.0 / temperature)
    n = 2 * b
    self_mask = np.zeros((n, n), dtype=DTYPE)
    np.fill_diagonal(self_mask, -1e9)
    logp = log_softmax(logits + self_mask, axis=1)
    partner = np.zeros((n, n), dtype=DTYPE)
    idx = np.arange(n)
    partner[idx, (idx + b) % n] = 1.0
    return (logp * partner).sum() * (-1.0 / n)


def byol_loss(student_pred: Tensor, teacher_proj: Tensor) -> Tensor:
    """Mean over rows of ``||p/|p| - t/|t|||^2 = 2 - 2 cos(p, t)``; the teacher side is detached."""
    _same_shape(student_pred, teacher_proj, "byol_loss")
    p = normalize_rows(student_pred)
    t = normalize_rows(teacher_proj.detach())
    d = p - t
    return (d * d).sum(axis=1).mean()


def byol_symmetric(pred_a: Tensor, pred_b: Tensor, target_a: Tensor, target_b: Tensor) -> Tensor:
    """Average of the two cross-view directions (a predicts b, b predicts a)."""
    return (byol_loss(pred_a, target_b) + byol_loss(pred_b, target_a)) * 0.5


def teacher_targets(teacher_logits: np.ndarray, center: np.ndarray | None, teacher_temp: float) -> np.ndarray:
    """Centered, sharpened teacher distribution ``softmax((t - c) / tau_t)``."""
    t = np.asarray(teacher_logits, dtype=np.float64)
    if center is not None:
        if np.shape(center) != t.shape[1:]:
            raise DimensionError(f"center has shape {np.shape(center)}, logits {t.shape}")
        t = t - center
    t = t / teacher_temp
    t = t - t.max(axis=1, keepdims=True)
    q = np.exp(t)
    return (q / q.sum(axis=1, keepdims=True)).astype(DTYPE)


def clustering_loss(
    student_logits: Tensor,
    teacher_logits,
    center,
    student_temp: float = 0.1,
    teacher_temp: float = 0.04,
) -> Tensor:
    """Cross-entropy from the teacher's centered/sharpened distribution to the student's."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=DTYPE)
    if student_logits.shape != t.shape:
        raise DimensionError(f"clustering_loss: logits {student_logits.shape} vs {t.shape}")
    if not (np.isfinite(student_logits.data).all() and np.isfinite(t).all()):
        raise NonFiniteError("clustering_loss: non-finite logits")
    q = teacher_targets(t, center, teacher_temp)
    logp = log_softmax(student_logits * (1.0 / student_temp), axis=1)
    return (logp * q).sum(axis=1).mean() * -1.0


def clustering_symmetric(
    student_a: Tensor, student_b: Tensor, teacher_a, teacher_b, center, student_temp: float, teacher_temp: float
) -> Tensor:
    return (
        clustering_loss(student_a, teacher_b, center, student_temp, teacher_temp)
        + clustering_loss(student_b, teacher_a, center, student_temp, teacher_temp)
    ) * 0.5


def _standardize(z: Tensor, eps: float) -> Tensor:
    centered = z - z.mean(axis=0, keepdims=True)
    var = (centered * centered).mean(axis=0, keepdims=True)
    return centered / sqrt(var, eps=eps)


def cross_correlation(z_a: Tensor, z_b: Tensor, eps: float = 1e-5) -> Tensor:
    b = _require_batch(z_a, "cross_correlation")
    return matmul(_standardize(z_a, eps).T, _standardize(z_b, eps)) * (1.0 / b)


def _sum_sq_cross(x: Tensor, y: Tensor) -> Tensor:
    """``sum((x^T y)^2)``, via B x B Gram matrices when the batch is the smaller side."""
    b, d = x.shape
    if d <= b:
        c = matmul(x.T, y)
        return (c * c).sum()
    return (matmul(x, x.T) * matmul(y, y.T)).sum()


def barlow_twins(z_a: Tensor, z_b: Tensor, lam: float = 5e-3, eps: float = 1e-5) -> Tensor:
    """``sum_d (1 - C_dd)^2 + lam * sum_{d != d'} C_dd'^2`` for the batch cross-correlation C."""
    _same_shape(z_a, z_b, "barlow_twins")
    b = _require_batch(z_a, "barlow_twins")
    s_a, s_b = _standardize(z_a, eps), _standardize(z_b, eps)
    diag = (s_a * s_b).sum(axis=0) * (1.0 / b)
    on = ((1.0 - diag) ** 2).sum()
    off = _sum_sq_cross(s_a, s_b) * (1.0 / (b * b)) - (diag * diag).sum()
    return on + off * lam


def _vicreg_terms(z: Tensor, gamma: float, eps: float) -> tuple[Tensor, Tensor]:
    b, d = z.shape
    centered = z - z.mean(axis=0, keepdims=True)
    var = (centered * centered).mean(axis=0)
    variance = relu(gamma - sqrt(var, eps=eps)).mean()
    # squared off-diagonal covariance = all squared entries minus the diagonal (the variances)
    off = _sum_sq_cross(centered, centered) * (1.0 / (b * b)) - (var * var).sum()
    return variance, off * (1.0 / d)


def vicreg_terms(z_a: Tensor, z_b: Tensor, cfg: ObjectiveConfig | None = None) -> dict[str, Tensor]:
    cfg = cfg or ObjectiveConfig(kind="vicreg")
    _same_shape(z_a, z_b, "vicreg")
    _require_batch(z_a, "vicreg")
    diff = z_a - z_b
    invariance = (diff * diff).mean()
    var_a, cov_a = _vicreg_terms(z_a, cfg.vicreg_gamma, cfg.vicreg_eps)
    var_b, cov_b = _vicreg_terms(z_b, cfg.vicreg_gamma, cfg.vicreg_eps)
    return {"invariance": invariance, "variance": var_a + var_b, "covariance": cov_a + cov_b}


def vicreg(z_a: Tensor, z_b: Tensor, cfg: ObjectiveConfig | None = None) -> Tensor:
    """Weighted invariance + variance hinge + off-diagonal covariance penalty."""
    cfg = cfg or ObjectiveConfig(kind="vicreg")
    t = vicreg_terms(z_a, z_b, cfg)
    return t["invariance"] * cfg.vicreg_inv + t["variance"] * cfg.vicreg_var + t["covariance"] * cfg.vicreg_cov


def ema_update(teacher: TeacherState, student: Mapping[str, Tensor], m: float) -> TeacherState:
    """In place: ``teacher <- m * teacher + (1 - m) * student`` for every shared name."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"EMA momentum must lie in [0, 1], got {m}")
    for name, t in teacher.params.items():
        if name not in student:
            raise DimensionError(f"ema_update: student has no tensor {name!r}")
        s = student[name].data
        if s.shape != t.data.shape:
            raise DimensionError(f"ema_update: {name!r} teacher {t.data.shape} vs student {s.shape}")
        if m == 1.0:
            continue
        if m == 0.0:
            t.data = s.copy()
        else:
            mixed = np.multiply(s, DTYPE(1.0 - m))
            t.data *= DTYPE(m)
            t.data += mixed
    return teacher


def center_update(center: np.ndarray, teacher_logits: np.ndarray, m_c: float) -> np.ndarray:
    if not 0.0 <= m_c <= 1.0:
        raise ConfigError(f"center momentum must lie in [0, 1], got {m_c}")
    batch_mean = np.asarray(teacher_logits, dtype=DTYPE).mean(axis=0)
    if batch_mean.shape != np.shape(center):
        raise DimensionError(f"center_update: center {np.shape(center)} vs logits mean {batch_mean.shape}")
    return (DTYPE(m_c) * np.asarray(center, dtype=DTYPE) + DTYPE(1.0 - m_c) * batch_mean).astype(DTYPE)


def collapse_diagnostics(
    embeddings: np.ndarray, assignments: np.ndarray | None = None, n_clusters: int | None = None
) -> dict[str, float | None]:
    """Mean per-dimension batch std, and normalized entropy of cluster usage.

    The entropy is divided by ``log K``: 1 means all ``K`` clusters are used
    equally, 0 means every row lands in a single cluster.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise BatchSizeError(f"collapse_diagnostics needs a B x D batch with B >= 2, got {e.shape}")
    out: dict[str, float | None] = {"embedding_std": float(e.std(axis=0).mean()), "cluster_usage_entropy": None}
    if assignments is not None:
        a = np.asarray(assignments, dtype=np.int64)
        k = n_clusters if n_clusters is not None else int(a.max()) + 1
        if k < 2:
            raise ConfigError("cluster usage entropy needs K >= 2")
        counts = np.bincount(a, minlength=k).astype(np.float64)
        p = counts[counts > 0] / counts.sum()
        out["cluster_usage_entropy"] = float(-(p * np.log(p)).sum() / np.log(k))
    return out
