"""Pixel-overlap metrics for masks and case-level classification metrics.

Undefined ratios (zero denominators) are reported as None and rendered "n/a"
in CSV output, never silently coerced to 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import LABELS, POSITIVE
from .groundtruth import mask_pixels


def _check_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks agree perfectly (1.0)."""
    a, b = mask_pixels(a), mask_pixels(b)
    _check_shapes(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    inter = int((a & b).sum())
    return 2.0 * inter / total


def iou(a, b) -> float:
    """|A∩B| / |A∪B|; two empty masks agree perfectly (1.0)."""
    a, b = mask_pixels(a), mask_pixels(b)
    _check_shapes(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    inter = int((a & b).sum())
    return inter / union


def pixel_accuracy(a, b) -> float:
    a, b = mask_pixels(a), mask_pixels(b)
    _check_shapes(a, b)
    return int((a == b).sum()) / a.size


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred_labels, true_labels) -> ConfusionCounts:
    """Tally case-level counts; positive means treatment required."""
    pred_labels = list(pred_labels)
    true_labels = list(true_labels)
    if len(pred_labels) != len(true_labels):
        raise ValueError(
            f"got {len(pred_labels)} predictions for {len(true_labels)} labels"
        )
    tp = fp = fn = tn = 0
    for p, t in zip(pred_labels, true_labels):
        if p not in LABELS or t not in LABELS:
            raise ValueError(f"labels must be positive/negative, got ({p!r}, {t!r})")
        if t == POSITIVE:
            if p == POSITIVE:
                tp += 1
            else:
                fn += 1
        else:
            if p == POSITIVE:
                fp += 1
            else:
                tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass(frozen=True)
class ClassificationMetrics:
    """Each field is None when its denominator is zero."""

    precision: float | None
    recall: float | None
    fpr: float | None
    f1: float | None
    f2: float | None


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def _f_beta(precision: float | None, recall: float | None, beta: float) -> float | None:
    if precision is None or recall is None:
        return None
    b2 = beta * beta
    den = b2 * precision + recall
    if den == 0:
        return None
    return (1 + b2) * precision * recall / den


def classification_metrics(c: ConfusionCounts, beta: float = 2.0) -> ClassificationMetrics:
    if c.total < 1:
        raise ValueError("cannot derive metrics from empty counts")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    return ClassificationMetrics(
        precision=precision,
        recall=recall,
        fpr=_ratio(c.fp, c.fp + c.tn),
        f1=_f_beta(precision, recall, 1.0),
        f2=_f_beta(precision, recall, beta),
    )


def format_metric(value: float | None) -> str:
    """Fixed 6-decimal formatting for CSV export; undefined renders as n/a."""
    return "n/a" if value is None else f"{value:.6f}"
