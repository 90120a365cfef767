"""Multimodal-conditioned latent diffusion restoration at desk scale."""

__version__ = "0.1.0"

from .codec import LatentCode, SpaceToDepthCodec, make_codec
from .config import Config, load_config
from .degrade import (
    DegradationParams,
    ImagePair,
    jpeg_approx,
    sample_degradation_params,
    synthesize_pair,
)
from .diffusion import (
    FreezePolicy,
    LossBreakdown,
    NoiseSchedule,
    cfg_combine,
    ddpm_sample,
    forward_diffuse,
    loss_fft,
    loss_rgb,
    lre_init,
    make_schedule,
    train_step,
)
from .metrics import psnr_y, ssim_y
from .model import RestorationModel, build_model, load_checkpoint, save_checkpoint

__all__ = [
    "Config",
    "DegradationParams",
    "FreezePolicy",
    "ImagePair",
    "LatentCode",
    "LossBreakdown",
    "NoiseSchedule",
    "RestorationModel",
    "SpaceToDepthCodec",
    "build_model",
    "cfg_combine",
    "ddpm_sample",
    "forward_diffuse",
    "jpeg_approx",
    "load_checkpoint",
    "load_config",
    "loss_fft",
    "loss_rgb",
    "lre_init",
    "make_codec",
    "make_schedule",
    "psnr_y",
    "sample_degradation_params",
    "save_checkpoint",
    "ssim_y",
    "synthesize_pair",
    "train_step",
    "__version__",
]
