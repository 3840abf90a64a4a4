from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def default_range(truth) -> float:
    truth = np.asarray(truth)
    rng = float(truth.max() - truth.min())
    return rng if rng > 0 else 1.0


def psnr(x, y, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    x, y = _pair(x, y)
    data_range = default_range(y) if data_range is None else data_range
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return float("inf")
    return float(10 * np.log10(data_range ** 2 / mse))


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, win):
    """Separable filtering over the last two axes; leading axes are a slice stack."""
    out = img
    pad = len(win) // 2
    for axis in (-2, -1):
        out = correlate1d(out, win, axis=axis, mode="reflect")
    # windows fully inside the image only
    return out[..., pad:img.shape[-2] - pad, pad:img.shape[-1] - pad]


def _ssim_maps(x, y, data_range):
    win = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    vx = _filter_valid(x * x, win) - mx * mx
    vy = _filter_valid(y * y, win) - my * my
    cxy = _filter_valid(x * y, win) - mx * my
    cs = (2 * cxy + c2) / (vx + vy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return lum * cs, cs


def ssim(x, y, data_range: float | None = None) -> float:
    """Gaussian-window (11x11, sigma 1.5) SSIM averaged over valid windows.

    A (S, H, W) stack averages over the windows of every slice.
    """
    x, y = _pair(x, y)
    if x.ndim < 2 or min(x.shape[-2:]) < WIN_SIZE:
        raise ValueError(f"image smaller than the {WIN_SIZE}x{WIN_SIZE} window")
    data_range = default_range(y) if data_range is None else data_range
    s, _ = _ssim_maps(x, y, data_range)
    return float(s.mean())


def _downsample(img):
    h, w = (img.shape[-2] // 2) * 2, (img.shape[-1] // 2) * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2]
                   + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def ms_ssim_scales(shape) -> int:
    side, scales = min(shape[-2:]), 0
    while scales < len(MS_WEIGHTS) and side >= WIN_SIZE:
        scales += 1
        side //= 2
    return scales


def ms_ssim(x, y, data_range: float | None = None, return_scales: bool = False):
    """Multi-scale SSIM with the canonical five-scale weights.

    Images too small for five scales use as many as fit, with the weights
    renormalized; ``return_scales=True`` also returns the count used.
    """
    x, y = _pair(x, y)
    scales = ms_ssim_scales(x.shape)
    if scales == 0:
        raise ValueError(f"image smaller than the {WIN_SIZE}x{WIN_SIZE} window")
    data_range = default_range(y) if data_range is None else data_range
    weights = MS_WEIGHTS[:scales] / MS_WEIGHTS[:scales].sum()
    value = 1.0
    for s in range(scales):
        full, cs = _ssim_maps(x, y, data_range)
        term = full.mean() if s == scales - 1 else cs.mean()
        value *= max(term, 0.0) ** weights[s]
        if s < scales - 1:
            x, y = _downsample(x), _downsample(y)
    value = float(value)
    return (value, scales) if return_scales else value
