"""Reconstruction quality scores for spectral cubes.

Both scores treat the cube as a stack of independent bands and report the
band mean.  Peak signal ratio is capped at 100 dB so identical inputs
produce a finite number.  The structural similarity follows the standard
windowed form: 11x11 Gaussian weights, sigma 1.5, stabilizers
(0.01*peak)^2 and (0.03*peak)^2, mirror-extended borders.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

__all__ = ["MetricsError", "psnr", "ssim", "PSNR_CAP_DB"]

PSNR_CAP_DB = 100.0


class MetricsError(ValueError):
    pass


def _pair(pred, truth):
    a = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    b = np.asarray(getattr(truth, "data", truth), dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3:
        raise MetricsError(f"expected rank 2 or 3 arrays, got rank {a.ndim}")
    return a, b


def psnr(pred, truth, peak: float = 1.0) -> float:
    """Mean over bands of 10*log10(peak^2/MSE), capped at 100 dB."""
    a, b = _pair(pred, truth)
    vals = []
    for lam in range(a.shape[2]):
        mse = float(((a[:, :, lam] - b[:, :, lam]) ** 2).mean())
        if mse == 0.0:
            vals.append(PSNR_CAP_DB)
        else:
            vals.append(min(10.0 * np.log10(peak * peak / mse),
                            PSNR_CAP_DB))
    return float(np.mean(vals))


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    g = np.exp(-0.5 * (np.arange(size) - half) ** 2 / sigma ** 2)
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _win_mean(img: np.ndarray) -> np.ndarray:
    return ndimage.convolve(img, _KERNEL, mode="reflect")


def ssim(pred, truth, peak: float = 1.0) -> float:
    """Mean structural similarity over bands, in [-1, 1]."""
    a, b = _pair(pred, truth)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    vals = []
    for lam in range(a.shape[2]):
        x = a[:, :, lam]
        y = b[:, :, lam]
        mx = _win_mean(x)
        my = _win_mean(y)
        vx = _win_mean(x * x) - mx * mx
        vy = _win_mean(y * y) - my * my
        cov = _win_mean(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))
