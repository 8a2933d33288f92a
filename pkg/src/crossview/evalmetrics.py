"""PSNR and windowed SSIM on [0, 1] images, with optional region masks."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 7
C1 = 0.01 ** 2
C2 = 0.03 ** 2
PSNR_IDENTICAL = math.inf


class MetricError(ValueError):
    pass


def _prep(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise MetricError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
        if not mask.any():
            raise MetricError("mask is empty")
    return a, b, mask


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) over (masked) pixels; ``inf`` for identical inputs."""
    a, b, mask = _prep(a, b, mask)
    d = (a - b) ** 2
    mse = d[mask].mean() if mask is not None else d.mean()
    if mse == 0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(1.0 / mse))


def ssim_map(a, b) -> np.ndarray:
    """SSIM of every fully contained 7x7 window, per channel: (H-6, W-6, C)."""
    a, b, _ = _prep(a, b, None)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise MetricError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW), axis=(0, 1))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    # population (1/N) moments over the window
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a, b, mask=None) -> float:
    """Mean SSIM over windows (and channels); with a mask, only windows fully inside it."""
    a, b, mask = _prep(a, b, mask)
    if np.array_equal(a, b):
        return 1.0
    m = ssim_map(a, b)
    if mask is None:
        return float(m.mean())
    inside = sliding_window_view(mask, (SSIM_WINDOW, SSIM_WINDOW)).all(axis=(-2, -1))
    if not inside.any():
        raise MetricError("no SSIM window lies fully inside the mask")
    return float(m[inside].mean())
