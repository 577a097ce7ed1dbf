"""Ranking metrics for multi-label tagging."""

from __future__ import annotations

import logging

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

log = logging.getLogger(__name__)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic.

    Tied scores receive their average rank, which counts a tied
    positive/negative pair as one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k of the positives.

    Scores are sorted descending; equal scores keep their input order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    return float((np.arange(1, n_pos + 1) / ranks).mean())


def _macro(metric, scores: np.ndarray, labels: np.ndarray, names=None):
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    per_label: dict[str, float] = {}
    skipped: list[str] = []
    for j in range(labels.shape[1]):
        name = names[j] if names is not None else str(j)
        try:
            per_label[name] = metric(scores[:, j], labels[:, j])
        except UndefinedMetricError:
            skipped.append(name)
    if skipped:
        log.debug("%s: skipped labels without both classes: %s", metric.__name__, skipped)
    if not per_label:
        raise UndefinedMetricError(f"{metric.__name__}: no label has both classes present")
    return float(np.mean(list(per_label.values()))), per_label, skipped


def macro_roc_auc(scores, labels, names=None):
    """Unweighted mean over labels; returns ``(macro, per_label, skipped_labels)``."""
    return _macro(roc_auc, scores, labels, names)


def mean_average_precision(scores, labels, names=None):
    return _macro(average_precision, scores, labels, names)
