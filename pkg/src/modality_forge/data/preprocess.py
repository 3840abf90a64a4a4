"""Intensity normalization, resizing and seeded augmentation."""

from __future__ import annotations

import numpy as np

from modality_forge.data.types import LabelMap, SliceImage

EPS = 1e-8


def normalize_array(x, axes=(-2, -1)) -> np.ndarray:
    """Z-score over ``axes`` (population std); constant inputs map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return np.where(std < EPS, 0.0, (x - mean) / np.where(std < EPS, 1.0, std))


def normalize(image: SliceImage) -> SliceImage:
    """Zero mean, unit (population) variance. Constant images map to zeros."""
    out = normalize_array(image.pixels, axes=None)
    dtype = np.float32 if image.pixels.dtype == np.float32 else np.float64
    return image.with_pixels(out.astype(dtype))


def _bilinear_axis(n_in: int, n_out: int):
    # align_corners=False source coordinates, clamped at the edges
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_array(x, target_h: int, target_w: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    if (h, w) == (target_h, target_w):
        return x.copy()
    r0, r1, fr = _bilinear_axis(h, target_h)
    c0, c1, fc = _bilinear_axis(w, target_w)
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bottom = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def resize_labels(labels, target_h: int, target_w: int) -> np.ndarray:
    labels = np.asarray(labels)
    h, w = labels.shape
    rows = np.minimum(((np.arange(target_h) + 0.5) * h / target_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(target_w) + 0.5) * w / target_w).astype(int), w - 1)
    return labels[rows][:, cols]


def resize(image: SliceImage, target_h: int, target_w: int) -> SliceImage:
    """Bilinear resize with half-pixel (align-corners-off) sampling."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be positive")
    out = resize_array(image.pixels, target_h, target_w)
    return image.with_pixels(out.astype(np.float32) if image.pixels.dtype == np.float32 else out)


def draw_augmentation(shape, crop, rng: np.random.Generator):
    h, w = shape
    ch, cw = crop
    if ch > h or cw > w:
        raise ValueError(f"crop {crop} larger than image {shape}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.integers(0, 2))
    return top, left, flip


def apply_augmentation(x: np.ndarray, top: int, left: int, crop, flip: bool) -> np.ndarray:
    out = x[top:top + crop[0], left:left + crop[1]]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(image: SliceImage, labels: LabelMap | None = None, seed=0, crop=(216, 216)):
    """Random crop plus random horizontal flip; the same transform hits ``labels``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(crop, int):
        crop = (crop, crop)
    top, left, flip = draw_augmentation(image.pixels.shape, crop, rng)
    out = image.with_pixels(apply_augmentation(image.pixels, top, left, crop, flip))
    if labels is None:
        return out, None
    lab = LabelMap(apply_augmentation(labels.labels, top, left, crop, flip), labels.num_classes)
    return out, lab
