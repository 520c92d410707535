"""Utility and attack-performance metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "CalibrationReport",
    "ece",
    "auroc_ovr_macro",
    "accuracy",
    "f1_macro",
    "mse",
    "l2_feature_distance",
]

log = logging.getLogger(__name__)


def _pair(pred, labels):
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape[0] != labels.shape[0]:
        raise ValueError(f"length mismatch: {pred.shape[0]} predictions vs {labels.shape[0]} labels")
    if labels.shape[0] < 1:
        raise ValueError("metrics need at least one sample")
    return pred, labels


@dataclass(frozen=True)
class CalibrationReport:
    num_bins: int
    counts: np.ndarray
    confidence: np.ndarray  # mean confidence per bin (0 for empty bins)
    accuracy: np.ndarray  # accuracy per bin (0 for empty bins)
    ece: float

    def rows(self):
        for m in range(self.num_bins):
            yield m + 1, int(self.counts[m]), float(self.confidence[m]), float(self.accuracy[m])


def ece(confidences, correct, num_bins: int = 10) -> CalibrationReport:
    """Expected calibration error over bins ``((m-1)/M, m/M]``.

    A confidence of exactly 0 goes to the first bin.
    """
    conf = np.asarray(confidences, dtype=float)
    corr = np.asarray(correct, dtype=bool)
    if conf.size == 0:
        raise ValueError("ece of an empty sample")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correct must have equal length")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    # bin m (1-based) holds (m-1)/M < c <= m/M
    idx = np.clip(np.ceil(conf * num_bins).astype(np.int64), 1, num_bins) - 1
    counts = np.bincount(idx, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=corr.astype(float), minlength=num_bins)
    nz = counts > 0
    mean_conf = np.where(nz, conf_sum / np.maximum(counts, 1), 0.0)
    mean_acc = np.where(nz, acc_sum / np.maximum(counts, 1), 0.0)
    value = float(np.sum(counts / conf.size * np.abs(mean_acc - mean_conf)))
    return CalibrationReport(num_bins, counts, mean_conf, mean_acc, value)


def _binary_auc(score: np.ndarray, positive: np.ndarray) -> float:
    ranks = rankdata(score)  # midranks for ties
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_ovr_macro(scores, labels, return_skipped: bool = False):
    """One-vs-rest AUROC averaged over classes that have both positives and negatives."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape[0] != labels.shape[0]:
        raise ValueError("scores and labels must have equal length")
    aucs, skipped = [], []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            skipped.append(c)
            continue
        aucs.append(_binary_auc(scores[:, c], pos))
    if len(aucs) < 1 or len(set(labels.tolist())) < 2:
        raise ValueError("AUROC needs at least two classes present")
    if skipped:
        log.debug("auroc: skipped classes %s (no positives or no negatives)", skipped)
    value = float(np.mean(aucs))
    return (value, skipped) if return_skipped else value


def accuracy(pred, labels) -> float:
    pred, labels = _pair(pred, labels)
    return float(np.mean(pred == labels))


def f1_macro(pred, labels, classes=None) -> float:
    """Macro F1 over ``classes`` (default: union of predicted and true codes).

    A class with no true and no predicted members scores 0.
    """
    pred, labels = _pair(pred, labels)
    pred = pred.astype(np.int64)
    labels = labels.astype(np.int64)
    if classes is None:
        classes = np.union1d(np.unique(pred), np.unique(labels))
    scores = []
    for c in classes:
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores))


def mse(pred, labels) -> float:
    pred, labels = _pair(pred, labels)
    r = pred.astype(float) - labels.astype(float)
    return float(np.mean(r * r))


def l2_feature_distance(
    recon,
    reference,
    embed: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[float, float]:
    """(min, mean) Euclidean distance from ``recon`` to the reference rows.

    ``embed`` maps rows to a feature space first; identity by default.
    """
    ref = np.atleast_2d(np.asarray(reference, dtype=float))
    if ref.shape[0] == 0 or ref.size == 0:
        raise ValueError("empty reference set")
    r = np.asarray(recon, dtype=float).reshape(1, -1)
    if embed is not None:
        r, ref = embed(r), embed(ref)
    if r.shape[1] != ref.shape[1]:
        raise ValueError(f"dimension mismatch: {r.shape[1]} vs {ref.shape[1]}")
    dist = np.sqrt(np.sum((ref - r) ** 2, axis=1))
    return float(dist.min()), float(dist.mean())
