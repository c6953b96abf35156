"""Image quality metrics: PSNR and single-scale SSIM.

Both operate on images with values in [0, 1], internally mapped to the
0..255 scale so numbers are comparable to 8-bit conventions.
"""

from __future__ import annotations

import numpy as np

__all__ = ["psnr", "ssim", "PSNR_CAP_DB"]

PSNR_CAP_DB = 100.0

_SSIM_WIN = 7
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_L = 255.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on the 0..255 scale.

    Identical images (MSE = 0) return the 100 dB cap.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = ((a * 255.0 - b * 255.0) ** 2).mean()
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0 ** 2 / mse))


def _gaussian_kernel(win: int, sigma: float) -> np.ndarray:
    half = (win - 1) / 2.0
    xs = np.arange(win) - half
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windows(x: np.ndarray, win: int) -> np.ndarray:
    """All win x win sliding windows of a 2-D array: (H', W', win, win)."""
    from numpy.lib.stride_tricks import sliding_window_view
    return sliding_window_view(x, (win, win))


def _ssim_channel(a: np.ndarray, b: np.ndarray, kernel: np.ndarray) -> float:
    wa = _windows(a, _SSIM_WIN)
    wb = _windows(b, _SSIM_WIN)
    mu_a = (wa * kernel).sum(axis=(-2, -1))
    mu_b = (wb * kernel).sum(axis=(-2, -1))
    var_a = (wa ** 2 * kernel).sum(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb ** 2 * kernel).sum(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb * kernel).sum(axis=(-2, -1)) - mu_a * mu_b
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM: 7x7 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, L=255, averaged over channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[0], a.shape[1]) < _SSIM_WIN:
        raise ValueError(f"image smaller than the {_SSIM_WIN}x{_SSIM_WIN} window")
    kernel = _gaussian_kernel(_SSIM_WIN, _SSIM_SIGMA)
    scores = [_ssim_channel(a[:, :, c] * 255.0, b[:, :, c] * 255.0, kernel)
              for c in range(a.shape[2])]
    return float(np.mean(scores))
