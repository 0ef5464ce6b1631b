"""Full-reference image quality metrics on [0, 1] rasters."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .io import Image

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _px(x) -> np.ndarray:
    return x.pixels if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return ``PSNR_CAP``."""
    a, b = _px(a), _px(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = (a - b).ravel()
    mse = math.fsum(d * d) / d.size  # exactly rounded sum, no accumulation drift
    if mse == 0.0:
        return PSNR_CAP
    # 20*log10(range/rmse) equals 10*log10(range^2/mse) but avoids squaring
    # round-off, so e.g. a uniform 0.1 error gives exactly 20 dB
    return min(20.0 * math.log10(data_range / math.sqrt(mse)), PSNR_CAP)


def gaussian_window_1d(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, keeping only windows that lie fully inside the image
    r = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="reflect")
    y = ndimage.correlate1d(y, g, axis=1, mode="reflect")
    return y[r:-r or None, r:-r or None]


def ssim_map(a, b, data_range: float = 1.0, win_size: int = SSIM_WIN, sigma: float = SSIM_SIGMA,
             k1: float = SSIM_K1, k2: float = SSIM_K2) -> np.ndarray:
    """Local SSIM over every fully contained Gaussian window (population statistics)."""
    a, b = _px(a), _px(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    g = gaussian_window_1d(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0, **kw) -> float:
    return float(np.mean(ssim_map(a, b, data_range, **kw)))


def ssim_settings() -> dict:
    return {"win_size": SSIM_WIN, "sigma": SSIM_SIGMA, "k1": SSIM_K1, "k2": SSIM_K2,
            "data_range": 1.0, "psnr_cap_db": PSNR_CAP}
