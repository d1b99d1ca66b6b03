"""Paired geometric augmentation for image/mask pairs.

One affine transform is drawn per pair and applied to both arrays: the image
is resampled bilinearly, the mask by nearest neighbor, and anything mapped
from outside the frame is filled with 0.  Default magnitudes follow the
training recipe verbatim (0.2 deg rotation, 0.05 shift fractions, 0.05 deg
shear); note the rotation/shear values are read as degrees even though they
are unusually small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: float = 0.2
    width_shift_frac: float = 0.05
    height_shift_frac: float = 0.05
    shear_deg: float = 0.05
    horizontal_flip: bool = True

    def __post_init__(self):
        for name in ("rotation_deg", "width_shift_frac", "height_shift_frac", "shear_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @staticmethod
    def identity() -> "AugmentSpec":
        return AugmentSpec(0.0, 0.0, 0.0, 0.0, horizontal_flip=False)


@dataclass(frozen=True)
class AffineParams:
    """One sampled transform; enough to reproduce the warp exactly."""

    rotation_deg: float
    shift_row_frac: float
    shift_col_frac: float
    shear_deg: float
    flip: bool

    def is_identity(self) -> bool:
        return (
            self.rotation_deg == 0.0
            and self.shift_row_frac == 0.0
            and self.shift_col_frac == 0.0
            and self.shear_deg == 0.0
            and not self.flip
        )


def sample_affine(spec: AugmentSpec, rng: np.random.Generator) -> AffineParams:
    """Draw each component uniformly from [-magnitude, +magnitude]."""

    def draw(mag):
        return float(rng.uniform(-mag, mag)) if mag > 0 else 0.0

    rotation = draw(spec.rotation_deg)
    shift_row = draw(spec.height_shift_frac)
    shift_col = draw(spec.width_shift_frac)
    shear = draw(spec.shear_deg)
    flip = bool(rng.random() < 0.5) if spec.horizontal_flip else False
    return AffineParams(rotation, shift_row, shift_col, shear, flip)


def _forward_matrix(params: AffineParams, shape) -> np.ndarray:
    """3x3 matrix mapping input (col,row,1) to output coordinates."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    def translation(tx, ty):
        return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])

    m = np.eye(3)
    if params.flip:
        m = np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ m
    theta = math.radians(params.rotation_deg)
    if theta:
        rot = np.array(
            [
                [math.cos(theta), -math.sin(theta), 0.0],
                [math.sin(theta), math.cos(theta), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        m = rot @ m
    shear = math.radians(params.shear_deg)
    if shear:
        m = np.array([[1.0, -math.tan(shear), 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ m
    m = translation(cx, cy) @ m @ translation(-cx, -cy)
    m = translation(params.shift_col_frac * w, params.shift_row_frac * h) @ m
    return m


def _sample_coords(params: AffineParams, shape):
    """Input-space (row, col) coordinates for every output pixel."""
    h, w = shape
    if params.is_identity():
        rows, cols = np.mgrid[:h, :w]
        return rows.astype(np.float64), cols.astype(np.float64)
    inv = np.linalg.inv(_forward_matrix(params, shape))
    rows, cols = np.mgrid[:h, :w]
    x = inv[0, 0] * cols + inv[0, 1] * rows + inv[0, 2]
    y = inv[1, 0] * cols + inv[1, 1] * rows + inv[1, 2]
    return y, x


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    dr = rows - r0
    dc = cols - c0
    out = np.zeros(rows.shape, dtype=np.float64)
    for oy, ox, wgt in (
        (0, 0, (1 - dr) * (1 - dc)),
        (0, 1, (1 - dr) * dc),
        (1, 0, dr * (1 - dc)),
        (1, 1, dr * dc),
    ):
        rr, cc = r0 + oy, c0 + ox
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = np.where(inside, img[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)], 0.0)
        out += wgt * vals
    return out


def _nearest(mask: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    rr = np.rint(rows).astype(np.int64)
    cc = np.rint(cols).astype(np.int64)
    inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    out = np.where(inside, mask[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)], 0)
    return out.astype(mask.dtype)


def apply_affine_image(image: np.ndarray, params: AffineParams) -> np.ndarray:
    rows, cols = _sample_coords(params, image.shape)
    return _bilinear(np.asarray(image, dtype=np.float64), rows, cols).astype(np.float32)


def apply_affine_mask(mask: np.ndarray, params: AffineParams) -> np.ndarray:
    rows, cols = _sample_coords(params, mask.shape)
    return _nearest(np.asarray(mask, dtype=np.uint8), rows, cols)


def _pixels(obj) -> np.ndarray:
    return np.asarray(obj.pixels if hasattr(obj, "pixels") else obj)


def augment_pair(image, mask, spec: AugmentSpec, seed: int):
    """Apply one seeded random transform to an image and its mask.

    Accepts bare arrays or objects with a .pixels attribute.  Returns
    (image, mask, params); the params reproduce the warp exactly via
    apply_affine_image / apply_affine_mask.
    """
    image = _pixels(image)
    mask = _pixels(mask)
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in shape")
    params = sample_affine(spec, np.random.default_rng(seed))
    return apply_affine_image(image, params), apply_affine_mask(mask, params), params


def augment_stream(
    pairs,
    spec: AugmentSpec,
    epochs: int,
    steps_per_epoch: int,
    batch_size: int,
    seed: int,
    param_log: list | None = None,
):
    """Lazily yield epochs*steps_per_epoch batches of batch_size augmented pairs.

    The stream is byte-deterministic for a given seed; pass param_log to
    collect (pair_index, AffineParams) per draw.
    """
    pairs = [(_pixels(image), _pixels(mask)) for image, mask in pairs]
    if not pairs:
        raise ValueError("augment_stream needs at least one image/mask pair")
    for image, mask in pairs:
        if image.shape != mask.shape:
            raise ValueError("image/mask shape mismatch in stream input")

    def generate():
        rng = np.random.default_rng(seed)
        for _ in range(epochs * steps_per_epoch):
            imgs, masks = [], []
            for _ in range(batch_size):
                idx = int(rng.integers(len(pairs)))
                params = sample_affine(spec, rng)
                image, mask = pairs[idx]
                imgs.append(apply_affine_image(image, params))
                masks.append(apply_affine_mask(mask, params))
                if param_log is not None:
                    param_log.append((idx, params))
            yield np.stack(imgs), np.stack(masks)

    return generate()


def resize_bilinear(image: np.ndarray, shape) -> np.ndarray:
    """Half-pixel-centered bilinear resize; identity when shapes match."""
    image = np.asarray(image, dtype=np.float64)
    h_in, w_in = image.shape
    h_out, w_out = shape
    rows = (np.arange(h_out, dtype=np.float64) + 0.5) * (h_in / h_out) - 0.5
    cols = (np.arange(w_out, dtype=np.float64) + 0.5) * (w_in / w_out) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr = np.clip(rr, 0, h_in - 1)
    cc = np.clip(cc, 0, w_in - 1)
    return _bilinear(image, rr, cc).astype(np.float32)


def resize_nearest(mask: np.ndarray, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.uint8)
    h_in, w_in = mask.shape
    h_out, w_out = shape
    rows = (np.arange(h_out, dtype=np.float64) + 0.5) * (h_in / h_out) - 0.5
    cols = (np.arange(w_out, dtype=np.float64) + 0.5) * (w_in / w_out) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr = np.clip(rr, 0, h_in - 1)
    cc = np.clip(cc, 0, w_in - 1)
    return _nearest(mask, rr, cc)
