"""Exact latent codec: space-to-depth rearrangement plus the affine map 2x - 1.

Stands in for a learned autoencoder. A factor-f rearrangement turns a
[3, H, W] image into a [3*f*f, H/f, W/f] latent with no information loss,
so every downstream test can demand exact round trips. The affine map is
evaluated in float64; on float64 inputs whose doubled values are
representable (8-bit pixel grids, torch.rand lattices) the round trip is
bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LatentCode:
    z: torch.Tensor  # [C_z, H/f, W/f], C_z = 3*f*f
    factor: int
    source_dims: tuple[int, int]

    def __post_init__(self):
        f = self.factor
        c, h, w = self.z.shape
        if c != 3 * f * f:
            raise ValueError(f"latent has {c} channels, expected {3 * f * f} for factor {f}")
        sh, sw = self.source_dims
        if (h * f, w * f) != (sh, sw):
            raise ValueError(f"latent grid {h}x{w} inconsistent with source dims {sh}x{sw}")
        if not torch.isfinite(self.z).all():
            raise ValueError("latent contains non-finite entries")


class SpaceToDepthCodec:
    """Parameter-free exact codec between [0,1] images and latents."""

    def __init__(self, factor: int = 8):
        if factor < 1:
            raise ValueError(f"factor must be >= 1, got {factor}")
        self.factor = factor

    @property
    def latent_channels(self) -> int:
        return 3 * self.factor * self.factor

    def encode_tensor(self, img: torch.Tensor) -> torch.Tensor:
        """[..., 3, H, W] image in [0,1] -> [..., 3*f*f, H/f, W/f] latent."""
        f = self.factor
        h, w = img.shape[-2], img.shape[-1]
        if img.shape[-3] != 3:
            raise ValueError(f"expected 3 channels, got {img.shape[-3]}")
        if h % f or w % f:
            raise ValueError(f"image dims {h}x{w} not divisible by factor {f}")
        centered = (2.0 * img.to(torch.float64) - 1.0).to(img.dtype)
        squeeze = centered.ndim == 3
        if squeeze:
            centered = centered.unsqueeze(0)
        z = F.pixel_unshuffle(centered, f)
        return z.squeeze(0) if squeeze else z

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        """Inverse of encode_tensor, clipped to [0, 1]."""
        f = self.factor
        if z.shape[-3] != 3 * f * f:
            raise ValueError(f"latent has {z.shape[-3]} channels, expected {3 * f * f}")
        squeeze = z.ndim == 3
        if squeeze:
            z = z.unsqueeze(0)
        x = F.pixel_shuffle(z, f)
        img = ((x.to(torch.float64) + 1.0) / 2.0).to(z.dtype).clamp(0.0, 1.0)
        return img.squeeze(0) if squeeze else img

    def encode(self, img: torch.Tensor) -> LatentCode:
        if img.ndim != 3:
            raise ValueError(f"expected [3, H, W] image, got shape {tuple(img.shape)}")
        h, w = img.shape[1], img.shape[2]
        return LatentCode(z=self.encode_tensor(img), factor=self.factor, source_dims=(h, w))

    def decode(self, code: LatentCode) -> torch.Tensor:
        if code.factor != self.factor:
            raise ValueError(f"latent factor {code.factor} != codec factor {self.factor}")
        return self.decode_tensor(code.z)


def make_codec(kind: str = "s2d", factor: int = 8) -> SpaceToDepthCodec:
    if kind != "s2d":
        raise ValueError(f"unknown codec kind '{kind}'")
    return SpaceToDepthCodec(factor)
