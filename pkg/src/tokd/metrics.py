"""Image quality metrics."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, DimensionError

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all ``window`` x ``window`` positions of the channel-mean grayscale.

    Uniform window weights, data range 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if a.ndim != 2:
        raise DimensionError(f"ssim expects H x W or H x W x C images, got {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ArgumentError(f"image {a.shape} is smaller than the {window}x{window} window")
    c1, c2 = k1 ** 2, k2 ** 2

    def local_mean(x):
        return sliding_window_view(x, (window, window)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
