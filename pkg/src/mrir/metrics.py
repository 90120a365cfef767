"""Reference metrics on the luma channel.

Y uses the BT.601 studio-swing convention (Y = 65.481 R + 128.553 G +
24.966 B + 16 with RGB in [0, 1]), so PSNR/SSIM numbers line up with the
usual super-resolution toolboxes.
"""

from __future__ import annotations

import cv2
import numpy as np

SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


def bt601_y(img: np.ndarray) -> np.ndarray:
    """[H, W, 3] RGB in [0, 1] -> Y in [16, 235]."""
    x = img.astype(np.float64, copy=False)
    return 65.481 * x[..., 0] + 128.553 * x[..., 1] + 24.966 * x[..., 2] + 16.0


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] images, got {a.shape}")
    for name, img in (("a", a), ("b", b)):
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(f"{name} has values outside [0, 1]")


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio on Y, in dB; float('inf') for identical inputs."""
    _check_pair(a, b)
    mse = float(np.mean((bt601_y(a) - bt601_y(b)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(255.0**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_y(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM on Y with a Gaussian window, mean over positions
    where the window fits entirely inside the image."""
    _check_pair(a, b)
    h, w = a.shape[:2]
    if min(h, w) < size:
        raise ValueError(f"image {h}x{w} smaller than the {size}x{size} window")
    y1, y2 = bt601_y(a), bt601_y(b)
    win = gaussian_window(size, sigma)
    p = size // 2

    def blur(x):
        return cv2.filter2D(x, -1, win, borderType=cv2.BORDER_REFLECT_101)[p:-p, p:-p]

    mu1, mu2 = blur(y1), blur(y2)
    s11 = blur(y1 * y1) - mu1 * mu1
    s22 = blur(y2 * y2) - mu2 * mu2
    s12 = blur(y1 * y2) - mu1 * mu2
    num = (2 * mu1 * mu2 + SSIM_C1) * (2 * s12 + SSIM_C2)
    den = (mu1**2 + mu2**2 + SSIM_C1) * (s11 + s22 + SSIM_C2)
    return float(np.mean(num / den))
