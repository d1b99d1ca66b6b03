"""Opacity area quantification and cutoff-based treatment classification.

Candidate cutoffs come from the manually labelled masks of clinically
negative cases; each candidate is swept into a confusion matrix and the
operating point is the one with maximum recall (false negatives are the
costly error), ties broken by lower FPR, then higher precision, then
smaller cutoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import NEGATIVE, POSITIVE, Roi
from .groundtruth import mask_pixels
from .metrics import ConfusionCounts, classification_metrics


@dataclass(frozen=True)
class AreaRecord:
    image_id: str
    area_percent: float
    model: str  # "model1" (manual-GT training) or "model2" (automated-GT training)

    def __post_init__(self):
        if not 0.0 <= self.area_percent <= 100.0:
            raise ValueError(f"area_percent out of range: {self.area_percent}")


@dataclass(frozen=True)
class CutoffPoint:
    cutoff: float
    counts: ConfusionCounts
    precision: float | None
    recall: float | None
    fpr: float | None


@dataclass
class CutoffCurve:
    points: list[CutoffPoint]

    def __post_init__(self):
        cutoffs = [p.cutoff for p in self.points]
        if any(b <= a for a, b in zip(cutoffs, cutoffs[1:])):
            raise ValueError("cutoffs must be strictly increasing")


def area_percent(mask, roi: Roi) -> float:
    """Opacified percentage of the ROI disk (mask aligned to the ROI frame)."""
    pixels = mask_pixels(mask)
    disk = roi.disk_mask(pixels.shape)
    denom = int(disk.sum())
    if denom == 0:
        raise ValueError("ROI disk contains no pixels")
    return 100.0 * int((pixels.astype(bool) & disk).sum()) / denom


def candidate_cutoffs(gt1_negative_areas) -> list[float]:
    """Sorted, deduplicated area values of the clinically negative cases."""
    areas = [float(a) for a in gt1_negative_areas]
    if not areas:
        raise ValueError("no negative-case areas; cannot form candidate cutoffs")
    return sorted(set(areas))


def classify_case(area: float, cutoff: float) -> str:
    """Positive iff area is strictly greater than the cutoff."""
    for name, v in (("area", area), ("cutoff", cutoff)):
        if not math.isfinite(v) or v < 0:
            raise ValueError(f"{name} must be finite and >= 0, got {v}")
    return POSITIVE if area > cutoff else NEGATIVE


def sweep_cutoffs(areas, clinical: dict[str, str], candidates) -> CutoffCurve:
    """Confusion matrix per candidate cutoff, as an ordered operating curve."""
    areas = list(areas)
    for rec in areas:
        label = clinical.get(rec.image_id)
        if label is None:
            raise KeyError(f"no clinical label for id {rec.image_id!r}")
        if label not in (POSITIVE, NEGATIVE):
            raise ValueError(f"bad clinical label {label!r} for id {rec.image_id!r}")
    values = np.array([rec.area_percent for rec in areas], dtype=np.float64)
    is_pos = np.array([clinical[rec.image_id] == POSITIVE for rec in areas])
    points = []
    for cutoff in candidate_cutoffs(candidates):
        pred = values > cutoff  # same strict rule as classify_case
        counts = ConfusionCounts(
            tp=int((pred & is_pos).sum()),
            fp=int((pred & ~is_pos).sum()),
            fn=int((~pred & is_pos).sum()),
            tn=int((~pred & ~is_pos).sum()),
        )
        m = classification_metrics(counts)
        points.append(CutoffPoint(cutoff, counts, m.precision, m.recall, m.fpr))
    return CutoffCurve(points)


def _selection_key(p: CutoffPoint):
    # undefined components rank worst; lower fpr and lower cutoff are preferred
    recall = p.recall if p.recall is not None else -np.inf
    fpr = p.fpr if p.fpr is not None else np.inf
    precision = p.precision if p.precision is not None else -np.inf
    return (recall, -fpr, precision, -p.cutoff)


def select_cutoff(curve: CutoffCurve) -> CutoffPoint:
    """Operating point with maximal recall (then lowest FPR, highest precision,
    smallest cutoff)."""
    if not curve.points:
        raise ValueError("curve has no points")
    return max(curve.points, key=_selection_key)
