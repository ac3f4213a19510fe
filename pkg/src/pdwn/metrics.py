"""Image quality metrics on float images in [0, 1].

Images are ``(C, H, W)`` or ``(H, W)`` arrays; a leading batch axis is not
accepted, callers loop over samples.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0  # reported when the images are identical
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    if pred.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W) images, got shape {pred.shape}")
    return pred, target


def psnr(pred, target) -> float:
    pred, target = _pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _local_mean(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian filtering over H and W, keeping only windows that
    lie fully inside the image."""
    half = len(g) // 2
    out = correlate1d(img, g, axis=-2, mode="constant")
    out = correlate1d(out, g, axis=-1, mode="constant")
    return out[..., half:img.shape[-2] - half, half:img.shape[-1] - half]


def ssim(pred, target) -> float:
    """Mean structural similarity, averaged over channels."""
    pred, target = _pair(pred, target)
    h, w = pred.shape[1:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    mx, my = _local_mean(pred, g), _local_mean(target, g)
    sxx = _local_mean(pred * pred, g) - mx * mx
    syy = _local_mean(target * target, g) - my * my
    sxy = _local_mean(pred * target, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    per_channel = (num / den).mean(axis=(1, 2))
    return float(per_channel.mean())


def interpolation_error(pred, target) -> float:
    """Mean absolute colour error on the 0-255 scale."""
    pred, target = _pair(pred, target)
    return float(255.0 * np.mean(np.abs(pred - target)))


def frame_average(frame0, frame2) -> np.ndarray:
    """The naive interpolation baseline (I0 + I2) / 2."""
    return 0.5 * (np.asarray(frame0, dtype=np.float64) + np.asarray(frame2, dtype=np.float64))
