"""PSNR and single-scale SSIM on (C, H, W) arrays in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _values(img) -> np.ndarray:
    return np.asarray(getattr(img, "values", img), dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` over all entries; ``inf`` when identical."""
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable weighted window mean over every fully contained window."""
    k = g.size
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def _ssim_plane(a: np.ndarray, b: np.ndarray, g: np.ndarray, peak: float) -> float:
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.

    With ``a`` identical to ``b`` every window evaluates the same expression
    in numerator and denominator, so the result is exactly 1.0.
    """
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[1:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    return float(np.mean([_ssim_plane(a[c], b[c], g, peak) for c in range(a.shape[0])]))
