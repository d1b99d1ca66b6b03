"""Ground-truth masks: manual mask ingestion and automated generation.

The automated route clusters in-ROI pixel intensities with 1-D k-means,
keeps the bright clusters, then grows and closes the result with a 3x3
structuring element to cover small gaps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .dataset import RetroImage

GT1 = "GT1"
GT2 = "GT2"
PREDICTED = "PREDICTED"
MASK_SOURCES = (GT1, GT2, PREDICTED)


class MaskFormatError(ValueError):
    """Mask file contains values other than {0, 255} or has the wrong shape."""


class DegenerateIntensityError(ValueError):
    """Too few distinct intensities to form the requested clusters."""


class KMeansConvergenceError(RuntimeError):
    def __init__(self, iterations: int):
        super().__init__(f"k-means did not converge within {iterations} iterations")
        self.iterations = iterations


@dataclass
class Mask:
    """Binary pixel mask aligned to its image; values are {0, 1}."""

    pixels: np.ndarray
    source: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.isin(self.pixels, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        if self.source not in MASK_SOURCES:
            raise ValueError(f"unknown mask source {self.source!r}")

    def area(self) -> int:
        return int(self.pixels.sum())


def mask_pixels(m) -> np.ndarray:
    """Accept a Mask or a bare binary array and return uint8 {0,1} pixels."""
    if isinstance(m, Mask):
        return m.pixels
    arr = np.asarray(m)
    return (arr > 0).astype(np.uint8)


def load_manual_mask(path, paired_image: RetroImage) -> Mask:
    """Read a hand-drawn mask PNG and check it against its image.

    Files must be strictly {0, 255}; any other grayscale value is rejected
    with a histogram of the offending values.
    """
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if arr.shape != paired_image.pixels.shape:
        raise MaskFormatError(
            f"mask {path} is {arr.shape[0]}x{arr.shape[1]} but image "
            f"{paired_image.id} is {paired_image.pixels.shape[0]}x{paired_image.pixels.shape[1]}"
        )
    values, counts = np.unique(arr, return_counts=True)
    bad = [(int(v), int(n)) for v, n in zip(values, counts) if v not in (0, 255)]
    if bad:
        hist = ", ".join(f"{v}: {n} px" for v, n in bad)
        raise MaskFormatError(f"mask {path} has non-binary grayscale values ({hist})")
    return Mask((arr != 0).astype(np.uint8), source=GT1)


# ---------------------------------------------------------------------------
# 1-D k-means on pixel intensities


def _kmeans_1d(values: np.ndarray, k: int, rng, max_iter=300, tol=1e-6):
    """Lloyd's algorithm on scalars with k-means++ seeding.

    Returns (centroids, labels).  Raises KMeansConvergenceError if centroid
    movement never drops below tol.
    """
    values = values.astype(np.float64)
    centers = np.empty(k)
    centers[0] = values[rng.integers(values.size)]
    d2 = (values - centers[0]) ** 2
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = values[rng.integers(values.size)]
        else:
            centers[j] = values[rng.choice(values.size, p=d2 / total)]
        d2 = np.minimum(d2, (values - centers[j]) ** 2)

    for _ in range(max_iter):
        labels = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = values[labels == j]
            if members.size:
                new_centers[j] = members.mean()
            else:
                # relocate an empty cluster to the worst-fit value
                worst = np.argmax(np.abs(values - centers[labels]))
                new_centers[j] = values[worst]
        moved = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if moved < tol:
            break
    else:
        raise KMeansConvergenceError(max_iter)

    labels = np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)
    return centers, labels


def kmeans_segment(
    image: RetroImage, clusters: int = 3, seed: int = 0, min_contrast: float = 0.1
) -> Mask:
    """Cluster in-ROI intensities and keep the bright (opacified) clusters.

    A cluster counts as opacity when its centroid is above the median
    centroid and exceeds the darkest (background) centroid by at least
    min_contrast.
    """
    if clusters < 2:
        raise ValueError(f"clusters must be >= 2, got {clusters}")
    disk = image.roi.disk_mask(image.pixels.shape)
    values = image.pixels[disk].astype(np.float64)
    if np.unique(values).size < clusters:
        raise DegenerateIntensityError(
            f"image {image.id} has fewer than {clusters} distinct in-ROI intensities"
        )
    rng = np.random.default_rng(seed)
    centers, labels = _kmeans_1d(values, clusters, rng)
    median = float(np.median(centers))
    background = float(centers.min())
    keep = (centers > median) & (centers - background >= min_contrast)
    pixels = np.zeros(image.pixels.shape, dtype=np.uint8)
    pixels[disk] = keep[labels].astype(np.uint8)
    return Mask(pixels, source=GT2)


# ---------------------------------------------------------------------------
# binary morphology


@dataclass(frozen=True)
class StructuringElement:
    """Odd-sided binary neighborhood with its anchor at the center."""

    shape: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        arr = self.array()
        if arr.ndim != 2 or arr.shape[0] % 2 == 0 or arr.shape[1] % 2 == 0:
            raise ValueError("structuring element sides must be odd")
        ar, ac = arr.shape[0] // 2, arr.shape[1] // 2
        if arr[ar, ac] != 1:
            raise ValueError("structuring element anchor must be set")

    def array(self) -> np.ndarray:
        return np.asarray(self.shape, dtype=np.uint8)

    def offsets(self):
        arr = self.array()
        ar, ac = arr.shape[0] // 2, arr.shape[1] // 2
        rows, cols = np.nonzero(arr)
        return [(int(r) - ar, int(c) - ac) for r, c in zip(rows, cols)]

    @staticmethod
    def square(side: int = 3) -> "StructuringElement":
        return StructuringElement(tuple(tuple(1 for _ in range(side)) for _ in range(side)))


def _shifted(pixels: np.ndarray, dr: int, dc: int, fill: int) -> np.ndarray:
    """pixels translated so that out[r, c] = pixels[r + dr, c + dc]."""
    h, w = pixels.shape
    out = np.full((h, w), fill, dtype=pixels.dtype)
    src_r = slice(max(dr, 0), min(h + dr, h))
    src_c = slice(max(dc, 0), min(w + dc, w))
    dst_r = slice(max(-dr, 0), max(-dr, 0) + (src_r.stop - src_r.start))
    dst_c = slice(max(-dc, 0), max(-dc, 0) + (src_c.stop - src_c.start))
    if src_r.stop > src_r.start and src_c.stop > src_c.start:
        out[dst_r, dst_c] = pixels[src_r, src_c]
    return out


def dilate(mask, se: StructuringElement | None = None) -> Mask:
    """Binary dilation: a pixel is set iff the element placed there touches a 1.

    Pixels outside the image count as 0.
    """
    se = se or StructuringElement.square(3)
    src = mask_pixels(mask)
    out = np.zeros_like(src)
    for dr, dc in se.offsets():
        out |= _shifted(src, dr, dc, fill=0)
    source = mask.source if isinstance(mask, Mask) else GT2
    return Mask(out, source=source)


def _erode(src: np.ndarray, se: StructuringElement) -> np.ndarray:
    # border treated as 1 so that closing stays extensive at the image edge
    out = np.ones_like(src)
    for dr, dc in se.offsets():
        out &= _shifted(src, dr, dc, fill=1)
    return out


def morph_close(mask, se: StructuringElement | None = None) -> Mask:
    """Dilation followed by erosion with the same element; never removes pixels."""
    se = se or StructuringElement.square(3)
    src = mask_pixels(mask)
    closed = _erode(dilate(src, se).pixels, se)
    source = mask.source if isinstance(mask, Mask) else GT2
    return Mask(closed, source=source)


def generate_gt2(
    image: RetroImage, seed: int = 0, clusters: int = 3, min_contrast: float = 0.1
) -> Mask:
    """Automated mask: k-means clustering, then 3x3 dilation and closing."""
    raw = kmeans_segment(image, clusters=clusters, seed=seed, min_contrast=min_contrast)
    se = StructuringElement.square(3)
    return Mask(morph_close(dilate(raw, se), se).pixels, source=GT2)
