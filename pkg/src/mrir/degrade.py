"""Seed-deterministic two-order degradation synthesis.

Each order applies blur -> resize -> additive Gaussian noise -> JPEG-style
compression, then a terminal area resize pins the LQ output to exactly
hq_size / final_scale. Every stage is a pure function of its inputs, so a
(hq, params) pair always reproduces the same LQ image bit for bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import cv2
import numpy as np

from .config import DegradeConfig, StageRanges
from .errors import ConfigError

CV2_MODES = {
    "nearest": cv2.INTER_NEAREST,
    "bilinear": cv2.INTER_LINEAR,
    "area": cv2.INTER_AREA,
}

# JPEG Annex-K base quantization tables (luminance, chrominance).
LUMA_QUANT = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_QUANT = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class StageParams:
    blur_kernel_size: int
    blur_sigma: float
    resize_scale: float
    resize_mode: str
    noise_sigma: float
    noise_gray: bool
    jpeg_quality: int


@dataclass(frozen=True)
class DegradationParams:
    order1: StageParams
    order2: StageParams
    final_scale: int
    rng_seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        return cls(
            order1=StageParams(**d["order1"]),
            order2=StageParams(**d["order2"]),
            final_scale=d["final_scale"],
            rng_seed=d["rng_seed"],
        )


@dataclass(frozen=True)
class ImagePair:
    """Aligned HQ/LQ images with the exact parameters that produced them."""

    hq: np.ndarray
    lq: np.ndarray
    params: DegradationParams

    def __post_init__(self):
        s = self.params.final_scale
        hh, hw = self.hq.shape[:2]
        lh, lw = self.lq.shape[:2]
        if (lh, lw) != (hh // s, hw // s):
            raise ValueError(f"lq is {lh}x{lw}, expected {hh // s}x{hw // s}")
        for name, img in (("hq", self.hq), ("lq", self.lq)):
            if not np.isfinite(img).all():
                raise ValueError(f"{name} contains non-finite pixels")
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValueError(f"{name} has pixels outside [0, 1]")


def _sample_stage(rng: np.random.Generator, ranges: StageRanges, name: str) -> StageParams:
    klo, khi = ranges.blur_kernel_size
    if klo % 2 == 0 or khi % 2 == 0 or klo > khi:
        raise ConfigError(f"{name}.blur_kernel_size: invalid odd range {ranges.blur_kernel_size}")
    candidates = np.arange(klo, khi + 1, 2)
    # Draw order is fixed (declaration order) so a seed pins every value.
    kernel = int(candidates[rng.integers(len(candidates))])
    sigma = float(rng.uniform(*ranges.blur_sigma))
    scale = float(rng.uniform(*ranges.resize_scale))
    mode = ranges.resize_modes[int(rng.integers(len(ranges.resize_modes)))]
    noise = float(rng.uniform(*ranges.noise_sigma))
    gray = bool(rng.random() < ranges.noise_gray_prob)
    quality = int(rng.integers(ranges.jpeg_quality[0], ranges.jpeg_quality[1] + 1))
    return StageParams(kernel, sigma, scale, mode, noise, gray, quality)


def sample_degradation_params(config: DegradeConfig, seed: int) -> DegradationParams:
    """Draw one parameter set from the configured ranges.

    The generator is PCG64 seeded directly with `seed`; the draw order is the
    field declaration order of order 1 followed by order 2, which makes the
    result a pure function of (config, seed).
    """
    rng = np.random.Generator(np.random.PCG64(seed & (2**64 - 1)))
    return DegradationParams(
        order1=_sample_stage(rng, config.order1, "degrade.order1"),
        order2=_sample_stage(rng, config.order2, "degrade.order2"),
        final_scale=config.final_scale,
        rng_seed=seed,
    )


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian kernel, normalized to sum 1."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, size: int, sigma: float) -> np.ndarray:
    if size == 1:
        return img
    kernel = gaussian_kernel(size, sigma)
    return cv2.filter2D(img, -1, kernel, borderType=cv2.BORDER_REFLECT_101)


def resize(img: np.ndarray, out_hw: tuple[int, int], mode: str) -> np.ndarray:
    if mode not in CV2_MODES:
        raise ValueError(f"unknown resize mode '{mode}'")
    h, w = out_hw
    if (h, w) == img.shape[:2]:
        return img
    return cv2.resize(img, (w, h), interpolation=CV2_MODES[mode])


def area_downsample(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    return resize(img, out_hw, "area")


def add_noise(img: np.ndarray, sigma: float, gray: bool, rng: np.random.Generator) -> np.ndarray:
    if sigma <= 0.0:
        return img
    h, w = img.shape[:2]
    noise = rng.standard_normal((h, w, 1) if gray else (h, w, 3)) * sigma
    return np.clip(img + noise, 0.0, 1.0)


def _dct_matrix(n: int = 8) -> np.ndarray:
    # Orthonormal DCT-II; JPEG's FDCT normalization coincides with it.
    k = np.arange(n)[:, None].astype(np.float64)
    x = np.arange(n)[None, :].astype(np.float64)
    mat = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0, :] = np.sqrt(1.0 / n)
    return mat

DCT8 = _dct_matrix(8)


def block_dct2(channel: np.ndarray) -> np.ndarray:
    """8x8 block 2-D DCT-II of a single channel (dims must be multiples of 8)."""
    h, w = channel.shape
    blocks = channel.reshape(h // 8, 8, w // 8, 8)
    return np.einsum("ui,aibj,vj->aubv", DCT8, blocks, DCT8).reshape(h, w)


def block_idct2(coeffs: np.ndarray) -> np.ndarray:
    h, w = coeffs.shape
    blocks = coeffs.reshape(h // 8, 8, w // 8, 8)
    return np.einsum("iu,aubv,jv->aibj", DCT8.T, blocks, DCT8.T).reshape(h, w)


def quality_scaled_table(base: np.ndarray, quality: int) -> np.ndarray:
    """Scale an Annex-K table by the libjpeg quality law (baseline, clip 1..255)."""
    if quality < 50:
        scale = 5000.0 / quality
    else:
        scale = 200.0 - 2.0 * quality
    table = np.floor((base * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


_RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ],
    dtype=np.float64,
)
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)


def jpeg_approx(img: np.ndarray, quality: int) -> np.ndarray:
    """Block-DCT quantization round trip standing in for a JPEG codec.

    Per channel after RGB->YCbCr: 8x8 DCT-II, divide by the quality-scaled
    Annex-K table, round, de-quantize, inverse DCT, convert back, clip.
    No chroma subsampling. Deterministic.
    """
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise ValueError(f"quality must be an integer in 1..100, got {quality!r}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] image, got shape {img.shape}")

    x = img.astype(np.float64, copy=False) * 255.0
    h, w = x.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        pad_mode = "reflect" if min(h, w) > 1 else "edge"
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode=pad_mode)

    ycc = x @ _RGB_TO_YCC.T
    ycc[..., 0] -= 128.0  # level shift; the matrix already centers chroma at 0

    tables = (
        quality_scaled_table(LUMA_QUANT, quality),
        quality_scaled_table(CHROMA_QUANT, quality),
        quality_scaled_table(CHROMA_QUANT, quality),
    )
    out = np.empty_like(ycc)
    hh, ww = ycc.shape[:2]
    for c in range(3):
        coeffs = block_dct2(ycc[..., c])
        q = np.tile(tables[c], (hh // 8, ww // 8))
        coeffs = np.round(coeffs / q) * q
        out[..., c] = block_idct2(coeffs)

    out[..., 0] += 128.0
    rgb = out @ _YCC_TO_RGB.T
    rgb = rgb[:h, :w] / 255.0
    return np.clip(rgb, 0.0, 1.0)


def _apply_order(img: np.ndarray, p: StageParams, rng: np.random.Generator) -> np.ndarray:
    x = gaussian_blur(img, p.blur_kernel_size, p.blur_sigma)
    h, w = x.shape[:2]
    nh = max(8, int(round(h * p.resize_scale)))
    nw = max(8, int(round(w * p.resize_scale)))
    x = resize(x, (nh, nw), p.resize_mode)
    x = add_noise(x, p.noise_sigma, p.noise_gray, rng)
    return jpeg_approx(x, p.jpeg_quality)


def synthesize_pair(hq: np.ndarray, params: DegradationParams) -> ImagePair:
    """Degrade an HQ image into its LQ counterpart, deterministically."""
    if hq.ndim != 3 or hq.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] image, got shape {hq.shape}")
    if not np.isfinite(hq).all():
        raise ValueError("hq contains non-finite pixels")
    s = params.final_scale
    h, w = hq.shape[:2]
    if h % s or w % s:
        raise ValueError(f"hq dims {h}x{w} not divisible by final_scale={s}")
    if h < 8 * s or w < 8 * s:
        raise ValueError(f"hq dims {h}x{w} below minimum {8 * s}x{8 * s}")

    x = np.clip(hq.astype(np.float64, copy=False), 0.0, 1.0)
    for order_index, stage in enumerate((params.order1, params.order2)):
        seed = np.random.SeedSequence([params.rng_seed & (2**64 - 1), order_index])
        x = _apply_order(x, stage, np.random.Generator(np.random.PCG64(seed)))
    lq = area_downsample(x, (h // s, w // s))
    lq = np.clip(lq, 0.0, 1.0)
    return ImagePair(hq=hq.astype(np.float32), lq=lq.astype(np.float32), params=params)
