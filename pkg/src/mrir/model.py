"""Model container wiring all trainable pieces, plus checkpoint archive I/O.

A checkpoint is a single .npz archive mapping "param/<path>" to a little-
endian float32 array for every parameter, with the full JSON config stored
under "__config__" so a model can be rebuilt from the file alone.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .codec import make_codec
from .conditioning import (
    ConditioningBundle,
    EmbeddingRefiner,
    StubImageEncoder,
    StubTextEncoder,
    build_conditioning,
    encode_long_prompt,
    make_caption_provider,
)
from .config import Config, load_config
from .degrade import resize
from .diffusion import TrainItem
from .fusion_unet import DenoisingUNet
from .pixel_control import ControlBranch, PixelProcessor, RgbHeads


class RestorationModel(nn.Module):
    """Processor, RGB heads, control branch, refine layer, and denoising U-Net
    behind one parameter namespace, with the frozen stub encoders attached."""

    def __init__(self, cfg: Config):
        super().__init__()
        if cfg.codec.factor != 8:
            raise ValueError(
                "codec.factor must be 8: the processor reduces by a fixed 1/8, "
                "so any other factor breaks latent-grid alignment"
            )
        self.cfg = cfg
        cond = cfg.conditioning
        self.codec = make_codec(cfg.codec.kind, cfg.codec.factor)
        self.processor = PixelProcessor(cfg.processor.widths, cfg.processor.c_f)
        self.rgb_heads = RgbHeads(cfg.processor.widths)
        self.control_branch = ControlBranch(
            c_f=cfg.processor.c_f,
            widths=cfg.unet.widths,
            out_widths=cfg.control_widths,
            time_dim=cfg.unet.time_dim,
            groups=cfg.unet.groups,
            d_txt=cond.d_txt if cfg.control.text_conditioned else None,
            n_heads=cfg.unet.n_heads,
        )
        self.refine_layer = EmbeddingRefiner(cond.d_img, cfg.refine_hidden, cfg.unet.d_cross)
        self.unet = DenoisingUNet(
            in_channels=self.codec.latent_channels,
            widths=cfg.unet.widths,
            n_heads=cfg.unet.n_heads,
            d_txt=cond.d_txt,
            d_cross=cfg.unet.d_cross,
            control_widths=cfg.control_widths,
            time_dim=cfg.unet.time_dim,
            groups=cfg.unet.groups,
            order=cfg.unet.sublayer_order,
            additive_skips=cfg.control.additive_skips,
        )

        self.text_encoder = StubTextEncoder(cond.d_txt, cond.vocab_size, cond.window, cond.text_seed)
        self.image_encoder = StubImageEncoder(cond.d_img, cond.image_tokens, cond.image_seed)
        self.caption_provider = make_caption_provider(cond)
        null_text = encode_long_prompt("", self.text_encoder)
        self.register_buffer("null_text_tokens", null_text.tokens, persistent=False)
        self.register_buffer(
            "null_image_tokens", torch.zeros(cond.image_tokens, cfg.unet.d_cross), persistent=False
        )

    def conditioning_for(self, lq: np.ndarray, path: Path | None = None) -> ConditioningBundle:
        return build_conditioning(
            lq, self.caption_provider, self.text_encoder, self.image_encoder,
            self.refine_layer, path,
        )


def build_model(cfg: Config, seed: int | None = None) -> RestorationModel:
    """Construct a model; a seed pins the parameter initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return RestorationModel(cfg)


def make_train_item(model: RestorationModel, hq: np.ndarray, lq: np.ndarray,
                    path: Path | None = None) -> TrainItem:
    """Precompute the frozen-encoder side of one training example."""
    h, w = hq.shape[:2]
    lq_up = resize(lq.astype(np.float64), (h, w), model.cfg.processor.upsample_mode)
    dtype = next(model.parameters()).dtype
    record = model.caption_provider.get_caption(lq, path)
    text = encode_long_prompt(record.caption, model.text_encoder)
    image_raw = model.image_encoder.encode(lq)
    return TrainItem(
        hq=torch.from_numpy(np.ascontiguousarray(hq.transpose(2, 0, 1))).to(dtype)[None],
        lq_up=torch.from_numpy(np.ascontiguousarray(lq_up.transpose(2, 0, 1))).to(dtype)[None],
        text=text.tokens.to(dtype)[None],
        image_raw=image_raw.tokens.to(dtype)[None],
    )


def save_checkpoint(path: str | Path, model: RestorationModel, cfg: Config | None = None) -> None:
    cfg = cfg if cfg is not None else model.cfg
    arrays = {"__config__": np.frombuffer(cfg.to_json(indent=None).encode("utf-8"), dtype=np.uint8)}
    for name, param in model.named_parameters():
        arrays[f"param/{name}"] = param.detach().cpu().numpy().astype("<f4")
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[RestorationModel, Config]:
    with np.load(path) as archive:
        cfg_json = bytes(archive["__config__"]).decode("utf-8")
        cfg = load_config(json.loads(cfg_json))
        model = build_model(cfg, seed=0)
        state = {}
        for key in archive.files:
            if key.startswith("param/"):
                state[key[len("param/"):]] = torch.from_numpy(archive[key].astype(np.float32))
    missing = set(dict(model.named_parameters())) - set(state)
    extra = set(state) - set(dict(model.named_parameters()))
    if missing or extra:
        raise ValueError(f"checkpoint/model mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    model.load_state_dict(state, strict=False)  # buffers are not persisted
    return model, cfg
