"""Macro precision / recall / F1 and Matthews correlation.

Conventions:

* any ratio whose denominator is zero is 0 (per-class P, R, F1 and MCC);
* single-label tasks are scored one-vs-rest per class and macro-averaged;
* multi-label tasks are scored per label (positive class) and
  macro-averaged; their MCC is the mean of per-label binary MCCs;
* multi-class MCC uses the R_k statistic on the full confusion matrix.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import InputError


class Task(str, enum.Enum):
    BINARY = "BINARY"
    MULTILABEL = "MULTILABEL"
    MULTICLASS = "MULTICLASS"


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    num_classes: int
    task: Task
    matrix: np.ndarray | None = None  # rows = truth, cols = prediction (single-label only)

    @property
    def n_samples(self) -> int:
        if self.matrix is not None:
            return int(self.matrix.sum())
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]) if self.num_classes else 0


@dataclass(frozen=True)
class MetricReport:
    precision_macro: float
    recall_macro: float
    f1_macro: float
    mcc: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def _as_single_label(y: Sequence, name: str) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a 1-d array of class indices")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise InputError(f"{name} contains non-integer labels")
        arr = arr.astype(np.int64)
    return arr.astype(np.int64)


def _check_pair(y_true, y_pred, task: Task, num_classes: int | None):
    task = Task(task)
    if task == Task.MULTILABEL:
        t = np.asarray(y_true)
        p = np.asarray(y_pred)
        if t.ndim != 2 or p.ndim != 2:
            raise InputError("multi-label targets must be 2-d (n_samples, n_labels)")
        if t.shape != p.shape:
            raise InputError(f"shape mismatch: {t.shape} vs {p.shape}")
        if not (np.isin(t, (0, 1)).all() and np.isin(p, (0, 1)).all()):
            raise InputError("multi-label entries must be 0 or 1")
        if num_classes is not None and t.shape[1] != num_classes:
            raise InputError(f"expected {num_classes} labels, got {t.shape[1]}")
        return task, t.astype(np.int64), p.astype(np.int64), t.shape[1]
    t = _as_single_label(y_true, "y_true")
    p = _as_single_label(y_pred, "y_pred")
    if t.shape != p.shape:
        raise InputError(f"length mismatch: {t.shape[0]} vs {p.shape[0]}")
    if num_classes is None:
        num_classes = 2 if task == Task.BINARY else int(max(t.max(initial=0), p.max(initial=0)) + 1)
    if task == Task.BINARY and num_classes != 2:
        raise InputError("binary task needs exactly 2 classes")
    for arr, name in ((t, "y_true"), (p, "y_pred")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(f"{name} has labels outside [0, {num_classes})")
    return task, t, p, num_classes


def confusion(y_true, y_pred, task: Task | str, num_classes: int | None = None) -> ConfusionCounts:
    task, t, p, k = _check_pair(y_true, y_pred, task, num_classes)
    if task == Task.MULTILABEL:
        tp = ((t == 1) & (p == 1)).sum(0)
        fp = ((t == 0) & (p == 1)).sum(0)
        fn = ((t == 1) & (p == 0)).sum(0)
        tn = ((t == 0) & (p == 0)).sum(0)
        return ConfusionCounts(tp, fp, fn, tn, k, task)
    matrix = np.zeros((k, k), dtype=np.int64)
    np.add.at(matrix, (t, p), 1)
    tp = np.diag(matrix).copy()
    fp = matrix.sum(0) - tp
    fn = matrix.sum(1) - tp
    tn = matrix.sum() - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn, k, task, matrix)


def _div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def per_class_prf(counts: ConfusionCounts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = _div(counts.tp, counts.tp + counts.fp)
    r = _div(counts.tp, counts.tp + counts.fn)
    f = _div(2 * p * r, p + r)
    return p, r, f


def macro_prf(counts: ConfusionCounts) -> tuple[float, float, float]:
    if counts.num_classes == 0:
        return 0.0, 0.0, 0.0
    p, r, f = per_class_prf(counts)
    return float(p.mean()), float(r.mean()), float(f.mean())


def mcc_binary_counts(tp: float, fp: float, fn: float, tn: float) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(den))


def mcc_from_matrix(matrix: np.ndarray) -> float:
    """Gorodkin's R_k for a KxK confusion matrix (rows truth, cols prediction)."""
    c = np.asarray(matrix, dtype=np.float64)
    s = c.sum()
    correct = np.trace(c)
    pred = c.sum(0)
    true = c.sum(1)
    cov_tp = correct * s - pred @ true
    cov_pp = s * s - pred @ pred
    cov_tt = s * s - true @ true
    den = cov_pp * cov_tt
    if den == 0:
        return 0.0
    return float(cov_tp / math.sqrt(den))


def mcc(y_true, y_pred, task: Task | str, num_classes: int | None = None) -> float:
    counts = confusion(y_true, y_pred, task, num_classes)
    return mcc_from_counts(counts)


def mcc_from_counts(counts: ConfusionCounts) -> float:
    if counts.task == Task.MULTILABEL:
        if counts.num_classes == 0:
            return 0.0
        vals = [mcc_binary_counts(*map(int, (counts.tp[j], counts.fp[j], counts.fn[j], counts.tn[j])))
                for j in range(counts.num_classes)]
        return float(np.mean(vals))
    if counts.task == Task.BINARY:
        return mcc_binary_counts(*map(int, (counts.tp[1], counts.fp[1], counts.fn[1], counts.tn[1])))
    return mcc_from_matrix(counts.matrix)


def evaluate(y_true, y_pred, task: Task | str, num_classes: int | None = None) -> MetricReport:
    counts = confusion(y_true, y_pred, task, num_classes)
    p, r, f = macro_prf(counts)
    return MetricReport(p, r, f, mcc_from_counts(counts))
