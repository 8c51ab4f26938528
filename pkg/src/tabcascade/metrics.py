"""Fold assignment and classification metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, MetricError, StratificationError


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold: np.ndarray

    def split(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(train indices, held-out indices) for fold ``i``."""
        if not 0 <= i < self.k:
            raise InputError(f"fold index {i} outside [0, {self.k})")
        return np.flatnonzero(self.fold != i), np.flatnonzero(self.fold == i)

    def __iter__(self):
        return (self.split(i) for i in range(self.k))


def stratified_kfold(labels, k: int, seed: int = 0) -> FoldAssignment:
    """Shuffle each class and deal its rows round-robin into ``k`` folds.

    The dealing position carries over from one class to the next so that
    remainders spread across folds instead of piling onto fold 0.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise InputError("labels must be one-dimensional")
    if k < 1:
        raise InputError(f"k must be at least 1, got {k}")
    rng = np.random.default_rng(seed)
    fold = np.empty(labels.shape[0], dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        if rows.size < k:
            raise StratificationError(f"class {c!r} has {rows.size} rows, fewer than k={k}")
        rows = rows[rng.permutation(rows.size)]
        fold[rows] = (offset + np.arange(rows.size)) % k
        offset = (offset + rows.size) % k
    return FoldAssignment(k, fold)


def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise InputError(f"label arrays differ in shape: {y_true.shape} vs {y_pred.shape}")
    for arr in (y_true, y_pred):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise InputError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def precision(cm, c: int) -> float:
    return _ratio(cm[c, c], cm[:, c].sum())


def recall(cm, c: int) -> float:
    return _ratio(cm[c, c], cm[c, :].sum())


def class_f1(cm, c: int) -> float:
    # 2TP / (2TP + FP + FN) equals 2PR/(P+R) and is 0 when nothing is predicted or present
    tp = cm[c, c]
    return _ratio(2 * tp, cm[:, c].sum() + cm[c, :].sum())


def accuracy(cm) -> float:
    return _ratio(np.trace(cm), cm.sum())


def macro_f1(cm) -> float:
    return float(np.mean([class_f1(cm, c) for c in range(cm.shape[0])]))


def sens_spec(cm) -> tuple[float, float]:
    """Sensitivity and specificity with class 1 as the positive class."""
    cm = np.asarray(cm)
    if cm.shape != (2, 2):
        raise InputError(f"sensitivity/specificity need a 2x2 matrix, got {cm.shape}")
    (tn, fp), (fn, tp) = cm
    return _ratio(tp, tp + fn), _ratio(tn, tn + fp)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores get average ranks (half credit per tied pair)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError("scores and labels must be 1-D arrays of equal length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_summary(y_true, y_pred, n_classes: int) -> dict:
    cm = confusion(y_true, y_pred, n_classes)
    return {
        "confusion": cm.tolist(),
        "accuracy": accuracy(cm),
        "macro_f1": macro_f1(cm),
        "f1": [class_f1(cm, c) for c in range(n_classes)],
        "precision": [precision(cm, c) for c in range(n_classes)],
        "recall": [recall(cm, c) for c in range(n_classes)],
    }


def binary_summary(y_true, y_pred, scores) -> dict:
    """Stage-level metrics; AUC is None when the evaluated rows hold one class."""
    out = classification_summary(y_true, y_pred, 2)
    sens, spec = sens_spec(np.asarray(out["confusion"]))
    out.update(sensitivity=sens, specificity=spec, f1_positive=out["f1"][1])
    try:
        out["auc"] = roc_auc(scores, y_true)
    except MetricError:
        out["auc"] = None
    return out
