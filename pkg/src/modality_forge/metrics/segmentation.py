from __future__ import annotations

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure


class EmptyMaskError(ValueError):
    code = "empty_mask"


def dice(pred, truth, k: int | None = None) -> float:
    """Dice overlap of class ``k`` (or of boolean masks when ``k`` is None).

    Both masks empty gives 1.0.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    a = pred == k if k is not None else pred.astype(bool)
    b = truth == k if k is not None else truth.astype(bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


def boundary(mask) -> np.ndarray:
    """Mask pixels with at least one face-adjacent background neighbor."""
    mask = np.asarray(mask, dtype=bool)
    cross = generate_binary_structure(mask.ndim, 1)
    return mask & ~binary_erosion(mask, structure=cross, border_value=0)


def asd(pred, truth, spacing=1.0) -> float:
    """Symmetric average surface distance between two binary masks."""
    a, b = np.asarray(pred, dtype=bool), np.asarray(truth, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise EmptyMaskError("average surface distance needs two non-empty masks")
    ba, bb = boundary(a), boundary(b)
    sampling = np.broadcast_to(np.asarray(spacing, dtype=float), (a.ndim,))
    d_to_b = distance_transform_edt(~bb, sampling=sampling)
    d_to_a = distance_transform_edt(~ba, sampling=sampling)
    total = d_to_b[ba].sum() + d_to_a[bb].sum()
    return float(total / (ba.sum() + bb.sum()))
