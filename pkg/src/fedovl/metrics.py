"""Accuracy and macro-averaged precision/recall/F1, plus multi-seed summaries.

Zero-division convention: a class with no predictions (or no true samples)
contributes P = R = F1 = 0, and macro averages run over every test class, so
heavily imbalanced outcomes can push macro F1 below both macro P and macro R.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("accuracy", "macro_precision", "macro_recall", "macro_f1")


@dataclass
class ConfusionMatrix:
    """Square count matrix over test classes: rows are truth, columns are
    predictions."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion matrix entries must be nonnegative")

    @classmethod
    def from_labels(cls, truth, predicted, num_classes: int) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        if truth.shape != predicted.shape:
            raise ValueError("truth and prediction lengths differ")
        if np.any(truth < 0) or np.any(truth >= num_classes):
            raise ValueError("truth label out of range")
        if np.any(predicted < 0) or np.any(predicted >= num_classes):
            raise ValueError("predicted label out of range")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (truth, predicted), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def compute_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Accuracy plus unweighted macro precision/recall/F1 over all classes."""
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(cm.counts).astype(np.float64)
    precision = _safe_div(diag, cm.counts.sum(axis=0).astype(np.float64))
    recall = _safe_div(diag, cm.counts.sum(axis=1).astype(np.float64))
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    return {
        "accuracy": float(diag.sum() / cm.total),
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
    }


def aggregate_runs(runs: list[dict[str, float]]) -> dict[str, dict[str, float]]:
    """Mean and sample (n-1) standard deviation per metric; std is 0 for a
    single run."""
    if not runs:
        raise ValueError("need at least one run")
    out: dict[str, dict[str, float]] = {}
    for name in runs[0]:
        values = [r[name] for r in runs]
        mean = sum(values) / len(values)
        if len(values) > 1:
            std = math.sqrt(sum((v - mean) ** 2 for v in values) / (len(values) - 1))
        else:
            std = 0.0
        out[name] = {"mean": mean, "std": std}
    return out
