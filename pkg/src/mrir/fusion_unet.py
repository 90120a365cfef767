"""Denoising U-Net with multi-source attention fusion.

Encoder and mid blocks fuse self-attention with image and text cross
attention; decoder blocks additionally attend over the per-scale pixel
control maps. All cross-attention output projections for the added branches
(image, pixel) start at zero so a fresh model reproduces its backbone
exactly.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

SUBLAYERS = ("self", "image", "text", "pixel")


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal features with wavelengths geometrically spaced over [1, 10000].

    Scalar t -> [dim]; tensor t of shape [B] -> [B, dim]. Computed in float64.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t_in = torch.as_tensor(t)
    scalar = t_in.ndim == 0
    tt = t_in.reshape(-1).to(torch.float64)
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        exponents = torch.arange(half, dtype=torch.float64) / (half - 1)
        freqs = torch.exp(-math.log(10000.0) * exponents)
    args = tt[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if scalar else emb


class MultiheadCrossAttention(nn.Module):
    """Scaled dot-product attention; queries from the model stream, keys and
    values from an arbitrary-width source. Output projection applied, residual
    left to the caller."""

    def __init__(self, d_model: int, d_kv: int, n_heads: int, zero_init_out: bool = False):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.d_kv = d_kv
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_kv, d_model)
        self.v_proj = nn.Linear(d_kv, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        if zero_init_out:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    def forward(self, q_src: torch.Tensor, kv_src: torch.Tensor) -> torch.Tensor:
        squeeze = q_src.ndim == 2
        if squeeze:
            q_src = q_src.unsqueeze(0)
        if kv_src.ndim == 2:
            kv_src = kv_src.unsqueeze(0)
        if q_src.shape[-1] != self.d_model:
            raise ValueError(f"query width {q_src.shape[-1]} != d_model {self.d_model}")
        if kv_src.shape[-1] != self.d_kv:
            raise ValueError(f"key/value width {kv_src.shape[-1]} != d_kv {self.d_kv}")
        b, n, _ = q_src.shape
        if kv_src.shape[0] == 1 and b > 1:
            kv_src = kv_src.expand(b, -1, -1)
        m = kv_src.shape[1]

        q = self.q_proj(q_src).view(b, n, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(kv_src).view(b, m, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(kv_src).view(b, m, self.n_heads, self.d_head).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, self.d_model)
        out = self.out_proj(out)
        return out.squeeze(0) if squeeze else out


class ResidualBlock(nn.Module):
    """GroupNorm - SiLU - conv twice, timestep injected after the first conv."""

    def __init__(self, c_in: int, c_out: int, time_emb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_group_count(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_group_count(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, time_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(time_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


def _group_count(groups: int, channels: int) -> int:
    return groups if channels % groups == 0 else math.gcd(groups, channels)


class FusionBlock(nn.Module):
    """Residual attention stack on flattened spatial tokens.

    Pre-layer-norm sub-layers in configurable order: self-attention, image
    cross attention, text cross attention, and (decoder blocks only) pixel
    attention over the flattened control map. Image and pixel output
    projections are zero-initialized.
    """

    def __init__(
        self,
        d_model: int,
        d_txt: int,
        d_cross: int,
        n_heads: int,
        kind: str = "down",
        d_pix: int | None = None,
        order: tuple[str, ...] = SUBLAYERS,
    ):
        super().__init__()
        if kind not in ("down", "up"):
            raise ValueError(f"kind must be 'down' or 'up', got '{kind}'")
        if kind == "up" and d_pix is None:
            raise ValueError("up blocks need the control channel width d_pix")
        self.kind = kind
        self.order = order
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = MultiheadCrossAttention(d_model, d_model, n_heads)
        self.norm_image = nn.LayerNorm(d_model)
        self.image_cross = MultiheadCrossAttention(d_model, d_cross, n_heads, zero_init_out=True)
        self.norm_text = nn.LayerNorm(d_model)
        self.text_cross = MultiheadCrossAttention(d_model, d_txt, n_heads)
        if kind == "up":
            self.norm_pixel = nn.LayerNorm(d_model)
            self.pixel_attn = MultiheadCrossAttention(d_model, d_pix, n_heads, zero_init_out=True)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor,
        image: torch.Tensor,
        control: torch.Tensor | None = None,
        skip_attention: bool = False,
        control_optional: bool = False,
    ) -> torch.Tensor:
        if self.kind == "up" and control is None and not control_optional:
            raise ValueError("up block requires its pixel control map")
        if self.kind == "down" and control is not None:
            raise ValueError("down block does not take a pixel control map")
        if skip_attention:
            return x
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # [B, HW, C]
        kv_pix = None
        if control is not None:
            kv_pix = control.flatten(2).transpose(1, 2)
        for name in self.order:
            if name == "self":
                tokens = tokens + self.self_attn(self.norm_self(tokens), tokens)
            elif name == "image":
                tokens = tokens + self.image_cross(self.norm_image(tokens), image)
            elif name == "text":
                tokens = tokens + self.text_cross(self.norm_text(tokens), text)
            elif name == "pixel" and self.kind == "up" and kv_pix is not None:
                tokens = tokens + self.pixel_attn(self.norm_pixel(tokens), kv_pix)
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DenoisingUNet(nn.Module):
    """Noise predictor over latents, conditioned on text, image, time, and
    (in the decoder) the per-scale pixel control maps."""

    def __init__(
        self,
        in_channels: int,
        widths: tuple[int, ...],
        n_heads: int,
        d_txt: int,
        d_cross: int,
        control_widths: tuple[int, ...],
        time_dim: int = 64,
        groups: int = 8,
        order: tuple[str, ...] = SUBLAYERS,
        additive_skips: bool = False,
    ):
        super().__init__()
        n = len(widths)
        if len(control_widths) != n:
            raise ValueError(f"{len(control_widths)} control widths for {n} scales")
        self.n_scales = n
        self.widths = tuple(widths)
        self.control_widths = tuple(control_widths)
        self.time_dim = time_dim
        self.additive_skips = additive_skips
        time_emb = time_dim * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_emb), nn.SiLU(), nn.Linear(time_emb, time_emb)
        )
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        for s in range(n):
            self.down_res.append(ResidualBlock(widths[s], widths[s], time_emb, groups))
            self.down_attn.append(FusionBlock(widths[s], d_txt, d_cross, n_heads, "down", order=order))
            if s < n - 1:
                self.downs.append(Downsample(widths[s], widths[s + 1]))

        self.mid_res = ResidualBlock(widths[-1], widths[-1], time_emb, groups)
        self.mid_attn = FusionBlock(widths[-1], d_txt, d_cross, n_heads, "down", order=order)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        for s in range(n):
            self.up_res.append(ResidualBlock(2 * widths[s], widths[s], time_emb, groups))
            self.up_attn.append(
                FusionBlock(widths[s], d_txt, d_cross, n_heads, "up", d_pix=control_widths[s], order=order)
            )
            if s > 0:
                self.ups.append(Upsample(widths[s], widths[s - 1]))

        self.out_norm = nn.GroupNorm(_group_count(groups, widths[0]), widths[0])
        self.out_conv = nn.Conv2d(widths[0], in_channels, 3, padding=1)

    def _check_shapes(self, z_t: torch.Tensor, controls: list[torch.Tensor] | None) -> None:
        h, w = z_t.shape[-2:]
        for s in range(self.n_scales - 1):
            if (h >> s) % 2 or (w >> s) % 2:
                raise ValueError(
                    f"latent dims {h}x{w} cannot be halved at scale {s + 1}"
                )
        if controls is not None:
            if len(controls) != self.n_scales:
                raise ValueError(f"{len(controls)} control maps for {self.n_scales} scales")
            for s, p in enumerate(controls):
                want = (self.control_widths[s], h >> s, w >> s)
                if tuple(p.shape[-3:]) != want:
                    raise ValueError(
                        f"control map at scale {s + 1} has shape {tuple(p.shape[-3:])}, expected {want}"
                    )

    def forward(
        self,
        z_t: torch.Tensor,
        t,
        text: torch.Tensor,
        image: torch.Tensor,
        controls: list[torch.Tensor] | None = None,
        skip_attention: bool = False,
    ) -> torch.Tensor:
        if z_t.ndim != 4:
            raise ValueError(f"expected [B, C, h, w] latent, got shape {tuple(z_t.shape)}")
        self._check_shapes(z_t, controls)
        b = z_t.shape[0]
        t_emb = timestep_embedding(t, self.time_dim).to(z_t.dtype)
        if t_emb.ndim == 1:
            t_emb = t_emb.unsqueeze(0)
        if t_emb.shape[0] == 1 and b > 1:
            t_emb = t_emb.expand(b, -1)
        emb = self.time_mlp(t_emb)

        x = self.stem(z_t)
        skips = []
        for s in range(self.n_scales):
            x = self.down_res[s](x, emb)
            x = self.down_attn[s](x, text, image, skip_attention=skip_attention)
            skips.append(x)
            if s < self.n_scales - 1:
                x = self.downs[s](x)

        x = self.mid_res(x, emb)
        x = self.mid_attn(x, text, image, skip_attention=skip_attention)

        for s in reversed(range(self.n_scales)):
            x = torch.cat([x, skips[s]], dim=1)
            x = self.up_res[s](x, emb)
            control = controls[s] if controls is not None else None
            if self.additive_skips and control is not None:
                x = x + control
            x = self.up_attn[s](
                x, text, image, control,
                skip_attention=skip_attention,
                control_optional=controls is None,
            )
            if s > 0:
                x = self.ups[s - 1](x)

        return self.out_conv(F.silu(self.out_norm(x)))
