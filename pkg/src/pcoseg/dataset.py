"""Retroillumination images, ROI geometry, fold plans and the synthetic dataset."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

POSITIVE = "positive"
NEGATIVE = "negative"
LABELS = (POSITIVE, NEGATIVE)


class RoiBoundsError(ValueError):
    """ROI circle (or its bounding box) falls outside the pixel grid."""


class ManifestError(ValueError):
    """Manifest is malformed or references missing files."""


@dataclass(frozen=True)
class Roi:
    """Circular region of interest (the central zone of the eye).

    A pixel (r, c) belongs to the disk iff (r-center_row)^2 + (c-center_col)^2
    < radius^2.  The bounding square has side 2*radius and must lie inside the
    image the ROI refers to.
    """

    center_row: int
    center_col: int
    radius: int

    def __post_init__(self):
        if self.radius < 8:
            raise ValueError(f"roi radius must be >= 8, got {self.radius}")

    def validate_for(self, shape):
        h, w = shape
        r0, c0 = self.center_row - self.radius, self.center_col - self.radius
        r1, c1 = self.center_row + self.radius, self.center_col + self.radius
        if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
            raise RoiBoundsError(
                f"roi box rows [{r0},{r1}) cols [{c0},{c1}) exceeds image {h}x{w}"
            )

    def disk_mask(self, shape) -> np.ndarray:
        """Boolean array marking the pixels strictly inside the ROI circle."""
        h, w = shape
        rr, cc = np.ogrid[:h, :w]
        d2 = (rr - self.center_row) ** 2 + (cc - self.center_col) ** 2
        return d2 < self.radius**2


@dataclass
class RetroImage:
    """A single-channel retroillumination image with ROI metadata."""

    id: str
    pixels: np.ndarray  # float32 HxW in [0, 1]
    roi: Roi
    clinical_label: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be a 2-D array")
        h, w = self.pixels.shape
        if h < 32 or w < 32:
            raise ValueError(f"image must be at least 32x32, got {h}x{w}")
        if float(self.pixels.min()) < 0.0 or float(self.pixels.max()) > 1.0:
            raise ValueError("pixel intensities must lie in [0, 1]")
        self.roi.validate_for(self.pixels.shape)
        if self.clinical_label is not None and self.clinical_label not in LABELS:
            raise ValueError(f"unknown clinical label {self.clinical_label!r}")


def crop_roi(image: RetroImage) -> RetroImage:
    """Cut the square bounding box of the ROI and zero everything outside the disk.

    Output side is exactly 2*radius; the ROI is recentered at (radius, radius).
    Re-cropping the output is a no-op.
    """
    roi = image.roi
    roi.validate_for(image.pixels.shape)
    r0 = roi.center_row - roi.radius
    c0 = roi.center_col - roi.radius
    side = 2 * roi.radius
    out = image.pixels[r0 : r0 + side, c0 : c0 + side].copy()
    new_roi = Roi(roi.radius, roi.radius, roi.radius)
    out[~new_roi.disk_mask(out.shape)] = 0.0
    return RetroImage(image.id, out, new_roi, image.clinical_label)


# ---------------------------------------------------------------------------
# k-fold cross validation


@dataclass
class FoldPlan:
    """Fold assignment plus the per-iteration train/valid/test roles."""

    k: int
    seed: int
    assignments: dict[str, int]
    subsplits: list[dict[str, str]]  # one map id -> {train,valid,test} per iteration

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def ids_with_role(self, iteration: int, role: str) -> list[str]:
        return sorted(i for i, r in self.subsplits[iteration].items() if r == role)


def split_train_valid(train_pool, seed: int):
    """Split a pool 9:1 into (train, valid); |valid| = ceil(|pool| / 10)."""
    pool = list(train_pool)
    if len(pool) < 10:
        raise ValueError(f"pool of {len(pool)} ids is too small to split 9:1")
    n_valid = math.ceil(len(pool) / 10)
    rng = np.random.default_rng(seed)
    order = rng.permutation(sorted(pool))
    valid = [str(x) for x in order[:n_valid]]
    train = [str(x) for x in order[n_valid:]]
    return train, valid


def make_folds(ids, k: int, seed: int, labels: dict[str, str] | None = None) -> FoldPlan:
    """Partition ids into k folds of near-equal size, deterministically.

    When ``labels`` is given the folds are stratified by clinical label so
    negative cases spread evenly across folds.  Per iteration i the held-out
    fold is the test set and the remainder is split 9:1 into train/valid.
    """
    ids = [str(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise ValueError(f"need at least k={k} ids, got {len(ids)}")

    rng = np.random.default_rng(seed)
    shuffled = [str(x) for x in rng.permutation(sorted(ids))]

    assignments: dict[str, int] = {}
    if labels is None:
        for pos, item in enumerate(shuffled):
            assignments[item] = pos % k
    else:
        negatives = [i for i in shuffled if labels[i] == NEGATIVE]
        positives = [i for i in shuffled if labels[i] != NEGATIVE]
        for pos, item in enumerate(negatives):
            assignments[item] = pos % k
        sizes = [sum(1 for f in assignments.values() if f == j) for j in range(k)]
        for item in positives:
            target = min(range(k), key=lambda j: (sizes[j], j))
            assignments[item] = target
            sizes[target] += 1

    seed_root = np.random.SeedSequence([seed, k])
    child_seeds = [int(s.generate_state(1)[0]) for s in seed_root.spawn(k)]
    subsplits = []
    for i in range(k):
        roles = {}
        pool = []
        for item in shuffled:
            if assignments[item] == i:
                roles[item] = "test"
            else:
                pool.append(item)
        if len(pool) >= 10:
            train, valid = split_train_valid(pool, child_seeds[i])
        else:
            train, valid = pool, []  # too few ids to carve out a 9:1 validation set
        for item in train:
            roles[item] = "train"
        for item in valid:
            roles[item] = "valid"
        subsplits.append(roles)

    return FoldPlan(k=k, seed=seed, assignments=assignments, subsplits=subsplits)


# ---------------------------------------------------------------------------
# synthetic data


class SynthesisError(RuntimeError):
    """Target opacity area could not be realized."""


@dataclass(frozen=True)
class SynthSpec:
    """Controls one synthetic ROI-shaped eye image.

    area_fraction is the opacified fraction of the ROI disk; the clinical
    label is positive when the realized mask covers more than
    label_threshold percent of the disk.
    """

    area_fraction: float
    radius: int = 64
    label_threshold: float = 4.0  # percent of the ROI disk
    background_level: float = 0.20
    contrast: float = 0.35
    noise_sigma: float = 0.015
    gradient_amplitude: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.area_fraction <= 0.9:
            raise ValueError(
                f"area_fraction must be in [0, 0.9], got {self.area_fraction}"
            )


def _texture_field(shape, disk, rng) -> np.ndarray:
    """Smooth random field whose superlevel sets look like pearl clusters and bands."""
    h, w = shape
    rr, cc = np.mgrid[:h, :w]
    field = np.zeros(shape, dtype=np.float64)
    in_rows, in_cols = np.nonzero(disk)
    n_blobs = int(rng.integers(3, 9))
    for _ in range(n_blobs):
        j = int(rng.integers(len(in_rows)))
        cy, cx = float(in_rows[j]), float(in_cols[j])
        sy = rng.uniform(h / 12, h / 4)
        sx = rng.uniform(w / 12, w / 4)
        theta = rng.uniform(0, np.pi)
        amp = rng.uniform(0.5, 1.0)
        dy, dx = rr - cy, cc - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        field += amp * np.exp(-0.5 * ((u / sy) ** 2 + (v / sx) ** 2))
    if rng.random() < 0.5:  # streaked fibrosis band
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.4, 0.4) * min(h, w)
        width = rng.uniform(h / 16, h / 8)
        d = (rr - h / 2) * np.cos(theta) + (cc - w / 2) * np.sin(theta) - offset
        field += rng.uniform(0.4, 0.8) * np.exp(-0.5 * (d / width) ** 2)
    return field


def _box_blur(a: np.ndarray) -> np.ndarray:
    """3x3 box blur with zero padding; used to soften opacity borders."""
    p = np.pad(a, 1)
    out = np.zeros_like(a, dtype=np.float64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out += p[1 + dr : 1 + dr + a.shape[0], 1 + dc : 1 + dc + a.shape[1]]
    return out / 9.0


def synthesize_sample(spec: SynthSpec, seed: int, sample_id: str = "synth"):
    """Render one ROI-shaped eye image with an exact opacity mask.

    Returns (RetroImage, mask pixels uint8 {0,1}, clinical label).  The mask
    is exactly the painted region and its area fraction is within 0.01 of
    spec.area_fraction; the label is derived from the returned mask.
    """
    radius = spec.radius
    side = 2 * radius
    roi = Roi(radius, radius, radius)
    disk = roi.disk_mask((side, side))
    n_disk = int(disk.sum())

    last_err = None
    for attempt in range(3):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        mask = np.zeros((side, side), dtype=np.uint8)
        if spec.area_fraction > 0.0:
            target = int(round(spec.area_fraction * n_disk))
            field = _texture_field((side, side), disk, rng)
            vals = field[disk]
            idx = np.nonzero(disk)
            # deterministic top-`target` selection, ties broken by pixel index
            order = np.lexsort((np.arange(vals.size), vals))
            chosen = order[vals.size - target :]
            mask[idx[0][chosen], idx[1][chosen]] = 1

        actual = mask.sum() / n_disk
        if abs(actual - spec.area_fraction) <= 0.01:
            break
        last_err = f"realized fraction {actual:.4f} vs target {spec.area_fraction:.4f}"
    else:
        raise SynthesisError(f"could not reach requested area fraction: {last_err}")

    rr, cc = np.ogrid[:side, :side]
    radial = np.sqrt((rr - radius) ** 2 + (cc - radius) ** 2) / radius
    img = spec.background_level + spec.gradient_amplitude * (1.0 - radial)
    img = img + rng.normal(0.0, spec.noise_sigma, size=(side, side))
    if mask.any():
        norm = _box_blur(mask.astype(np.float64))
        soft = 0.5 * mask + 0.5 * norm
        fill = spec.contrast * (0.9 + 0.1 * norm)
        img = img + np.where(mask > 0, fill, spec.contrast * 0.6 * soft)
    img = np.clip(img, 0.0, 1.0)
    img[~disk] = 0.0
    mask[~disk] = 0

    area_percent = 100.0 * mask.sum() / n_disk
    label = POSITIVE if area_percent > spec.label_threshold else NEGATIVE
    image = RetroImage(sample_id, img.astype(np.float32), roi, label)
    return image, mask, label


# ---------------------------------------------------------------------------
# PNG + manifest persistence


def save_image_png(path, pixels: np.ndarray):
    arr = np.clip(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5, 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def save_mask_png(path, mask: np.ndarray):
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


@dataclass
class ManifestItem:
    id: str
    image: str
    gt1: str
    label: str | None = None
    gt2: str | None = None
    excluded: bool = False
    roi: Roi | None = None


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate ids in manifest")

    def active_items(self) -> list[ManifestItem]:
        return [it for it in self.items if not it.excluded]

    def label_counts(self) -> dict[str, int]:
        counts = {POSITIVE: 0, NEGATIVE: 0}
        for it in self.items:
            if it.label in counts:
                counts[it.label] += 1
        return counts

    def path(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    doc = {"label_counts": manifest.label_counts(), "items": []}
    for it in manifest.items:
        entry = {
            "id": it.id,
            "image": it.image,
            "gt1": it.gt1,
            "gt2": it.gt2,
            "label": it.label,
            "excluded": it.excluded,
        }
        if it.roi is not None:
            entry["roi"] = {
                "center_row": it.roi.center_row,
                "center_col": it.roi.center_col,
                "radius": it.roi.radius,
            }
        doc["items"].append(entry)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    items = []
    for entry in doc.get("items", []):
        roi = None
        if entry.get("roi"):
            r = entry["roi"]
            roi = Roi(int(r["center_row"]), int(r["center_col"]), int(r["radius"]))
        items.append(
            ManifestItem(
                id=str(entry["id"]),
                image=entry["image"],
                gt1=entry["gt1"],
                gt2=entry.get("gt2"),
                label=entry.get("label"),
                excluded=bool(entry.get("excluded", False)),
                roi=roi,
            )
        )
    manifest = DatasetManifest(items=items, root=path.parent)
    for it in manifest.items:
        for rel in (it.image, it.gt1, it.gt2):
            if rel is not None and not manifest.path(rel).exists():
                raise ManifestError(f"manifest item {it.id}: missing file {rel}")
    return manifest


@dataclass(frozen=True)
class SynthDatasetSpec:
    """Shape of a whole synthetic dataset (counts and area ranges)."""

    count: int
    radius: int = 64
    label_threshold: float = 4.0
    negative_fraction: float = 0.15
    negative_area_range: tuple[float, float] = (0.0, 0.035)
    positive_area_range: tuple[float, float] = (0.05, 0.45)


def synthesize_dataset(spec: SynthDatasetSpec, seed: int, out_dir) -> DatasetManifest:
    """Write `count` synthetic images + masks as PNGs and return the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt1").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD5]))
    n_negative = int(round(spec.count * spec.negative_fraction))
    is_negative = np.zeros(spec.count, dtype=bool)
    is_negative[:n_negative] = True
    rng.shuffle(is_negative)
    items = []
    for i in range(spec.count):
        lo, hi = (
            spec.negative_area_range if is_negative[i] else spec.positive_area_range
        )
        frac = float(rng.uniform(lo, hi))
        sample_id = f"case{i:04d}"
        sample_spec = SynthSpec(
            area_fraction=frac,
            radius=spec.radius,
            label_threshold=spec.label_threshold,
        )
        image, mask, label = synthesize_sample(
            sample_spec, int(rng.integers(2**31)), sample_id
        )
        img_rel = f"images/{sample_id}.png"
        gt1_rel = f"gt1/{sample_id}.png"
        save_image_png(out_dir / img_rel, image.pixels)
        save_mask_png(out_dir / gt1_rel, mask)
        items.append(
            ManifestItem(
                id=sample_id, image=img_rel, gt1=gt1_rel, label=label, roi=image.roi
            )
        )
    manifest = DatasetManifest(items=items, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
