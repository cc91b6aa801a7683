"""Uncertainty-aware evaluation metrics.

The headline numbers are accuracy and the multiclass correlation
coefficient mapped onto [0, 1]; the correlation form equals the Pearson
correlation of flattened column-centered one-hot indicator matrices,
which the tests use as an independent oracle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def confusion_matrix(
    y_true: np.ndarray, y_pred: np.ndarray, n_classes: int
) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError("y_true and y_pred must have equal length")
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n_classes):
        raise ValueError("labels out of range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def mcc_from_confusion(cm: np.ndarray) -> float:
    """Multiclass correlation from a confusion matrix; 0 when degenerate.

    With c = correct, s = total, p_k = predicted counts, t_k = true
    counts: (c*s - sum p_k t_k) / sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2)).
    Either factor hitting zero (all one class on either side) yields 0.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    s = cm.sum()
    c = np.trace(cm)
    p_k = cm.sum(axis=0)
    t_k = cm.sum(axis=1)
    cov = c * s - float(p_k @ t_k)
    var_p = s * s - float(p_k @ p_k)
    var_t = s * s - float(t_k @ t_k)
    denom = var_p * var_t
    if denom <= 0:
        return 0.0
    return float(cov / np.sqrt(denom))


def normalized_mcc(mcc: float) -> float:
    """Map [-1, 1] correlation onto [0, 1]."""
    return (mcc + 1.0) / 2.0


@dataclass(frozen=True)
class EvalResult:
    n: int
    accuracy: float
    mcc: float
    nmcc: float
    confusion: np.ndarray


def evaluate_predictions(
    y_true: np.ndarray, y_pred: np.ndarray, n_classes: int
) -> EvalResult:
    cm = confusion_matrix(y_true, y_pred, n_classes)
    n = int(cm.sum())
    acc = float(np.trace(cm) / n) if n else 0.0
    mcc = mcc_from_confusion(cm)
    return EvalResult(
        n=n, accuracy=acc, mcc=mcc, nmcc=normalized_mcc(mcc), confusion=cm
    )
