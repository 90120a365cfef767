"""Pixel-level control: feature processor, RGB supervision heads, control branch.

The processor distills the (upsampled) LQ image down to the latent grid with
four convolutions, keeping the stride-2 intermediates for multi-scale RGB
supervision. The control branch mirrors the denoiser's encoder trunk and
emits one control map per U-Net scale through zero-initialized projections,
so a fresh branch is exactly inert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .fusion_unet import MultiheadCrossAttention, ResidualBlock, timestep_embedding


@dataclass
class ProcessorFeatures:
    f_half: torch.Tensor     # [B, c1, H/2, W/2]
    f_quarter: torch.Tensor  # [B, c2, H/4, W/4]
    f_eighth: torch.Tensor   # [B, c3, H/8, W/8]
    F: torch.Tensor          # [B, c_F, H/8, W/8]


@dataclass
class SupervisionImages:
    i_half: torch.Tensor
    i_quarter: torch.Tensor
    i_eighth: torch.Tensor
    gt_half: torch.Tensor
    gt_quarter: torch.Tensor
    gt_eighth: torch.Tensor

    def pairs(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [
            (self.i_half, self.gt_half),
            (self.i_quarter, self.gt_quarter),
            (self.i_eighth, self.gt_eighth),
        ]


@dataclass
class PixelControlSet:
    maps: list[torch.Tensor]  # maps[i] at latent_dims / 2**i
    conditioned_on_t: bool = True

    def __post_init__(self):
        for i in range(1, len(self.maps)):
            prev, cur = self.maps[i - 1], self.maps[i]
            if (prev.shape[-2] + 1) // 2 != cur.shape[-2] or (prev.shape[-1] + 1) // 2 != cur.shape[-1]:
                raise ValueError(
                    f"control map {i} has dims {tuple(cur.shape[-2:])}, "
                    f"expected half of {tuple(prev.shape[-2:])}"
                )


class PixelProcessor(nn.Module):
    """Four 3x3 convolutions with strides (2, 2, 2, 1); SiLU after the first three."""

    def __init__(self, widths: tuple[int, int, int] = (32, 64, 128), c_f: int = 128):
        super().__init__()
        c1, c2, c3 = widths
        self.conv1 = nn.Conv2d(3, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(c3, c_f, 3, stride=1, padding=1)

    def forward(self, lq_up: torch.Tensor) -> ProcessorFeatures:
        h, w = lq_up.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"input dims {h}x{w} not divisible by 8")
        f_half = F.silu(self.conv1(lq_up))
        f_quarter = F.silu(self.conv2(f_half))
        f_eighth = F.silu(self.conv3(f_quarter))
        feat = self.conv4(f_eighth)
        return ProcessorFeatures(f_half, f_quarter, f_eighth, feat)


def area_pool(img: torch.Tensor, factor: int) -> torch.Tensor:
    """Alias-free downsample by an integer factor (block average)."""
    return F.avg_pool2d(img, factor) if factor > 1 else img


class RgbHeads(nn.Module):
    """One 1x1 convolution per scale projecting features back to RGB."""

    def __init__(self, widths: tuple[int, int, int] = (32, 64, 128)):
        super().__init__()
        self.head_half = nn.Conv2d(widths[0], 3, 1)
        self.head_quarter = nn.Conv2d(widths[1], 3, 1)
        self.head_eighth = nn.Conv2d(widths[2], 3, 1)

    def forward(self, feats: ProcessorFeatures, hq: torch.Tensor) -> SupervisionImages:
        if hq.shape[-2:] != (feats.f_half.shape[-2] * 2, feats.f_half.shape[-1] * 2):
            raise ValueError(
                f"hq dims {tuple(hq.shape[-2:])} do not match processor input "
                f"{feats.f_half.shape[-2] * 2}x{feats.f_half.shape[-1] * 2}"
            )
        return SupervisionImages(
            i_half=self.head_half(feats.f_half),
            i_quarter=self.head_quarter(feats.f_quarter),
            i_eighth=self.head_eighth(feats.f_eighth),
            gt_half=area_pool(hq, 2),
            gt_quarter=area_pool(hq, 4),
            gt_eighth=area_pool(hq, 8),
        )


class ControlBranch(nn.Module):
    """Encoder-trunk copy emitting per-scale control maps.

    Residual blocks with their own timestep embedding, downsampling between
    scales, and a zero-initialized 1x1 projection per scale: a freshly built
    branch contributes exactly zero everywhere. Optionally text-conditioned
    via one cross-attention sub-layer per scale (off by default).
    """

    def __init__(
        self,
        c_f: int,
        widths: tuple[int, ...],
        out_widths: tuple[int, ...],
        time_dim: int = 64,
        groups: int = 8,
        d_txt: int | None = None,
        n_heads: int = 4,
    ):
        super().__init__()
        self.time_dim = time_dim
        time_emb = time_dim * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_emb), nn.SiLU(), nn.Linear(time_emb, time_emb)
        )
        self.stem = nn.Conv2d(c_f, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.projections = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.text_attns = nn.ModuleList() if d_txt is not None else None
        self.text_norms = nn.ModuleList() if d_txt is not None else None
        for s, width in enumerate(widths):
            c_in = widths[0] if s == 0 else widths[s - 1]
            self.blocks.append(ResidualBlock(c_in, width, time_emb, groups))
            if d_txt is not None:
                self.text_norms.append(nn.LayerNorm(width))
                self.text_attns.append(MultiheadCrossAttention(width, d_txt, n_heads))
            proj = nn.Conv2d(width, out_widths[s], 1)
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)
            self.projections.append(proj)
            if s < len(widths) - 1:
                self.downs.append(nn.Conv2d(width, width, 3, stride=2, padding=1))

    def forward(
        self, feat: torch.Tensor, t: torch.Tensor, text: torch.Tensor | None = None
    ) -> PixelControlSet:
        if self.text_attns is None and text is not None:
            raise ValueError("branch was built without text conditioning")
        emb = self.time_mlp(timestep_embedding(t, self.time_dim).to(feat.dtype))
        x = self.stem(feat)
        maps = []
        for s, block in enumerate(self.blocks):
            x = block(x, emb)
            if self.text_attns is not None and text is not None:
                b, c, h, w = x.shape
                tokens = x.flatten(2).transpose(1, 2)
                tokens = tokens + self.text_attns[s](self.text_norms[s](tokens), text)
                x = tokens.transpose(1, 2).reshape(b, c, h, w)
            maps.append(self.projections[s](x))
            if s < len(self.blocks) - 1:
                x = self.downs[s](x)
        return PixelControlSet(maps=maps, conditioned_on_t=True)
