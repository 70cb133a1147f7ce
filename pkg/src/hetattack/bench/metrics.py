"""Classification metrics over attacked victims."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    micro_f1: float
    macro_f1: float


def confusion(preds, labels, num_classes: int) -> np.ndarray:
    """``m[true, pred]`` counts."""
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return m


def classification_metrics(preds, labels, num_classes: int | None = None) -> Metrics:
    """Accuracy, micro-F1 from pooled counts, and macro-F1 over every declared class (absent class F1 = 0)."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise InputError("predictions and labels must be 1-D and of equal length")
    if len(preds) == 0:
        raise InputError("no predictions to score")
    c = int(max(preds.max(), labels.max()) + 1) if num_classes is None else int(num_classes)
    if preds.min() < 0 or labels.min() < 0 or max(preds.max(), labels.max()) >= c:
        raise InputError(f"class ids must lie in [0, {c})")
    m = confusion(preds, labels, c)
    tp = np.diag(m)
    fp = m.sum(axis=0) - tp
    fn = m.sum(axis=1) - tp
    # single-label data: every error is one FP and one FN, so pooled F1 reduces to the hit rate
    correct = int(tp.sum())
    n = len(preds)
    micro = 2 * correct / (2 * correct + int(fp.sum()) + int(fn.sum()))
    denom = 2 * tp + fp + fn
    per_class = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return Metrics(correct / n, float(micro), float(per_class.mean()))
