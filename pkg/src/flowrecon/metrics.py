"""Image quality metrics: PSNR and SSIM (Gaussian 11x11 window, sigma 1.5)."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

K1, K2 = 0.01, 0.03
WINDOW, SIGMA = 11, 1.5


def data_range(reference, range_mode="minmax"):
    """``"minmax"`` uses max - min of the reference, ``"max"`` its maximum;
    a number is used as given."""
    if isinstance(range_mode, str):
        ref = np.asarray(reference, dtype=np.float64)
        if range_mode == "minmax":
            return float(ref.max() - ref.min())
        if range_mode == "max":
            return float(ref.max())
        raise ValueError(f"unknown range mode {range_mode!r}")
    return float(range_mode)


def psnr(estimate, reference, range_mode="minmax"):
    """10 log10(L^2 / MSE) in dB; identical images give +inf."""
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    L = data_range(b, range_mode)
    return 10.0 * math.log10(L * L / mse)


def gaussian_window(size=WINDOW, sigma=SIGMA):
    """Normalized 1D Gaussian taps; the 2D window is their outer product."""
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r * r) / (2 * sigma * sigma))
    return w / w.sum()


def _filter(img, w):
    """Valid-mode separable weighted average."""
    k = len(w)
    rows = sliding_window_view(img, k, axis=0) @ w
    return sliding_window_view(rows, k, axis=1) @ w


def ssim_map(estimate, reference, range_mode="minmax", size=WINDOW, sigma=SIGMA):
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("SSIM needs two 2D images of equal shape")
    if min(a.shape) < size:
        raise ValueError(f"image extents must be at least the window size {size}")
    L = data_range(b, range_mode)
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    w = gaussian_window(size, sigma)
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    var_a = _filter(a * a, w) - mu_a * mu_a
    var_b = _filter(b * b, w) - mu_b * mu_b
    cov = _filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(estimate, reference, range_mode="minmax", size=WINDOW, sigma=SIGMA):
    """Mean of the local SSIM map over all valid window positions."""
    return float(np.mean(ssim_map(estimate, reference, range_mode, size, sigma)))


def summarize(values):
    """(mean, population std); an all-infinite list gives (inf, 0)."""
    arr = np.asarray(values, dtype=np.float64)
    if np.all(np.isinf(arr)) and arr.size:
        return math.inf, 0.0
    return float(arr.mean()), float(arr.std())
