"""Binary evaluation statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    """Raised when a statistic has no value for the given input."""


@dataclass(frozen=True)
class BinaryEval:
    scores: np.ndarray
    labels: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel().astype(np.int64)
        if scores.shape != labels.shape or scores.size == 0:
            raise ValueError(f"scores ({scores.size}) and labels ({labels.size}) must be equal-length and non-empty")
        if not np.all(np.isfinite(scores)):
            raise ValueError("non-finite score")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0/1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)


def _coerce(scores, labels=None, threshold=0.5) -> BinaryEval:
    if isinstance(scores, BinaryEval):
        return scores
    return BinaryEval(scores, labels, threshold)


def auc(scores, labels=None) -> float:
    """Mann-Whitney AUC with average ranks, i.e. P(s+ > s-) + P(s+ == s-)/2."""
    ev = _coerce(scores, labels)
    pos = ev.labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes present")
    ranks = rankdata(ev.scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels=None, threshold: float = 0.5) -> float:
    ev = _coerce(scores, labels, threshold)
    pred = (ev.scores >= ev.threshold).astype(np.int64)
    return float(np.mean(pred == ev.labels))


def precision_per_class(scores, labels=None, threshold: float = 0.5) -> tuple[float | None, float | None]:
    """(TP/(TP+FP), TN/(TN+FN)); ``None`` where nothing was predicted in that class."""
    ev = _coerce(scores, labels, threshold)
    pred = ev.scores >= ev.threshold
    truth = ev.labels == 1
    n_pred_pos, n_pred_neg = int(pred.sum()), int((~pred).sum())
    prec_pos = float(np.sum(pred & truth) / n_pred_pos) if n_pred_pos else None
    prec_neg = float(np.sum(~pred & ~truth) / n_pred_neg) if n_pred_neg else None
    return prec_pos, prec_neg


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors with at least 2 entries")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(dx * dx)), np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise UndefinedMetric("correlation undefined for a constant vector")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


def summarize(ev: BinaryEval) -> dict:
    """AUC, accuracy and per-class precision in one dict (AUC ``None`` if single-class)."""
    try:
        a = auc(ev)
    except UndefinedMetric:
        a = None
    prec_pos, prec_neg = precision_per_class(ev)
    return {
        "auc": a,
        "accuracy": accuracy(ev),
        "precision_pos": prec_pos,
        "precision_neg": prec_neg,
        "n": int(ev.labels.size),
        "n_pos": int(ev.labels.sum()),
    }
