"""Image fidelity metrics on [0, 1] images shaped (..., H, W, 3) or (H, W)."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import convolve1d

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim >= 3 and img.shape[-1] == 3:
        return img @ LUMA
    return img


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def ssim(a, b, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over valid (unpadded) window positions on the luma channel."""
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    g = gaussian_kernel(win, sigma)

    def blur(img):
        out = convolve1d(img, g, axis=-2, mode="constant")
        out = convolve1d(out, g, axis=-1, mode="constant")
        pad = win // 2
        return out[..., pad:img.shape[-2] - pad, pad:img.shape[-1] - pad]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    # unbiased local covariances, matching the common reference implementation
    n = win * win
    cov_norm = n / (n - 1)
    vx = cov_norm * (blur(x * x) - mx * mx)
    vy = cov_norm * (blur(y * y) - my * my)
    cxy = cov_norm * (blur(x * y) - mx * my)
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return float(s.mean())


def batch_psnr(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    return np.array([psnr(x, y) for x, y in zip(a.reshape(-1, *a.shape[-3:]), b.reshape(-1, *b.shape[-3:]))])


def batch_ssim(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    return np.array([ssim(x, y) for x, y in zip(a.reshape(-1, *a.shape[-3:]), b.reshape(-1, *b.shape[-3:]))])
