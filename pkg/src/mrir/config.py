"""Configuration for every stage of the pipeline.

One JSON document with sections {degrade, codec, conditioning, processor,
control, unet, train, sampler, eval}. Values omitted from the JSON fall back
to the defaults below; unknown keys are rejected so typos cannot silently
disable a switch.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

RESIZE_MODE_NAMES = ("nearest", "bilinear", "area")
PROVIDER_NAMES = ("sidecar", "stub", "external")

DEFAULT_INSTRUCTION = (
    "Describe the image in a very detailed manner if we remove the "
    "degradation artifacts from the image."
)


@dataclass
class StageRanges:
    """Sampling ranges for one degradation order."""

    blur_kernel_size: tuple[int, int] = (3, 21)
    blur_sigma: tuple[float, float] = (0.2, 3.0)
    resize_scale: tuple[float, float] = (0.25, 1.5)
    resize_modes: tuple[str, ...] = RESIZE_MODE_NAMES
    noise_sigma: tuple[float, float] = (0.0, 0.1)
    noise_gray_prob: float = 0.4
    jpeg_quality: tuple[int, int] = (30, 95)


def _second_order_ranges() -> StageRanges:
    return StageRanges(
        blur_kernel_size=(3, 11),
        blur_sigma=(0.2, 1.5),
        resize_scale=(0.5, 1.25),
        noise_sigma=(0.0, 0.05),
        jpeg_quality=(30, 95),
    )


@dataclass
class DegradeConfig:
    final_scale: int = 4
    order1: StageRanges = field(default_factory=StageRanges)
    order2: StageRanges = field(default_factory=_second_order_ranges)


@dataclass
class CodecConfig:
    kind: str = "s2d"
    factor: int = 8


@dataclass
class ConditioningConfig:
    provider: str = "stub"
    instruction: str = DEFAULT_INSTRUCTION
    external_command: str | None = None
    window: int = 75
    vocab_size: int = 4096
    d_txt: int = 64
    text_seed: int = 2001
    image_tokens: int = 17
    d_img: int = 48
    image_seed: int = 2002
    caption_seed: int = 2003
    # Hidden width of the refiner MLP; None means "use unet.d_cross".
    d_hidden: int | None = None


@dataclass
class ProcessorConfig:
    widths: tuple[int, int, int] = (32, 64, 128)
    c_f: int = 128
    upsample_mode: str = "bilinear"


@dataclass
class ControlConfig:
    # None means "mirror unet.widths".
    widths: tuple[int, ...] | None = None
    additive_skips: bool = False
    text_conditioned: bool = False


@dataclass
class UnetConfig:
    scales: int = 4
    widths: tuple[int, ...] = (64, 96, 128, 160)
    n_heads: int = 4
    d_cross: int = 64
    time_dim: int = 64
    groups: int = 8
    sublayer_order: tuple[str, ...] = ("self", "image", "text", "pixel")


@dataclass
class TrainConfig:
    timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    lr: float = 5e-5
    batch_size: int = 32
    lambda_rgb: float = 0.1
    lambda_fft: float = 0.01
    null_prob: float = 0.1
    regime: str = "adapter"
    seed: int = 0


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 5.5
    lre: bool = True


@dataclass
class EvalConfig:
    seed: int = 0


@dataclass
class Config:
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    processor: ProcessorConfig = field(default_factory=ProcessorConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    unet: UnetConfig = field(default_factory=UnetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        validate(self)

    @property
    def refine_hidden(self) -> int:
        if self.conditioning.d_hidden is not None:
            return self.conditioning.d_hidden
        return self.unet.d_cross

    @property
    def control_widths(self) -> tuple[int, ...]:
        if self.control.widths is not None:
            return self.control.widths
        return self.unet.widths

    def to_dict(self) -> dict:
        return _as_jsonable(dataclasses.asdict(self))

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _as_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _as_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_jsonable(v) for v in obj]
    return obj


def _merge_section(instance, data: dict, path: str):
    """Overlay a JSON dict onto a dataclass instance, recursively."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(instance)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown configuration key")
        current = getattr(instance, key)
        if dataclasses.is_dataclass(current):
            _merge_section(current, value, f"{path}.{key}")
        else:
            setattr(instance, key, _coerce(current, value, f"{path}.{key}"))
    return instance


def _coerce(current, value, path: str):
    # JSON lists stand in for tuples; "on"/"off" stand in for booleans.
    if isinstance(current, bool) or (current is None and value in ("on", "off")):
        if isinstance(value, bool):
            return value
        if value in ("on", "off"):
            return value == "on"
        raise ConfigError(f"{path}: expected a boolean or 'on'/'off'")
    if isinstance(current, tuple) or (current is None and isinstance(value, list)):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    return value


def load_config(source: str | Path | dict | None = None) -> Config:
    """Build a Config from defaults overlaid with a JSON file or dict."""
    cfg = Config()
    if source is None:
        return cfg
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        data = source
    _merge_section(cfg, data, "config")
    validate(cfg)
    return cfg


def _check_range(name: str, lo, hi, domain_lo=None, domain_hi=None) -> None:
    if lo > hi:
        raise ConfigError(f"{name}: range low {lo} exceeds high {hi}")
    if domain_lo is not None and lo < domain_lo:
        raise ConfigError(f"{name}: low {lo} below allowed minimum {domain_lo}")
    if domain_hi is not None and hi > domain_hi:
        raise ConfigError(f"{name}: high {hi} above allowed maximum {domain_hi}")


def _validate_stage(name: str, st: StageRanges) -> None:
    klo, khi = st.blur_kernel_size
    if klo % 2 == 0 or khi % 2 == 0:
        raise ConfigError(f"{name}.blur_kernel_size: candidates must be odd, got {st.blur_kernel_size}")
    _check_range(f"{name}.blur_kernel_size", klo, khi, 1)
    _check_range(f"{name}.blur_sigma", *st.blur_sigma, 1e-12)
    _check_range(f"{name}.resize_scale", *st.resize_scale, 0.25, 1.5)
    _check_range(f"{name}.noise_sigma", *st.noise_sigma, 0.0)
    _check_range(f"{name}.jpeg_quality", *st.jpeg_quality, 30, 95)
    if not 0.0 <= st.noise_gray_prob <= 1.0:
        raise ConfigError(f"{name}.noise_gray_prob: {st.noise_gray_prob} outside [0, 1]")
    for mode in st.resize_modes:
        if mode not in RESIZE_MODE_NAMES:
            raise ConfigError(f"{name}.resize_modes: unknown mode '{mode}'")
    if not st.resize_modes:
        raise ConfigError(f"{name}.resize_modes: at least one mode required")


def validate(cfg: Config) -> None:
    if cfg.degrade.final_scale < 1:
        raise ConfigError(f"degrade.final_scale: {cfg.degrade.final_scale} must be >= 1")
    _validate_stage("degrade.order1", cfg.degrade.order1)
    _validate_stage("degrade.order2", cfg.degrade.order2)

    if cfg.codec.kind != "s2d":
        raise ConfigError(f"codec.kind: unknown codec '{cfg.codec.kind}'")
    if cfg.codec.factor < 1:
        raise ConfigError(f"codec.factor: {cfg.codec.factor} must be >= 1")

    cond = cfg.conditioning
    if cond.provider not in PROVIDER_NAMES:
        raise ConfigError(f"conditioning.provider: '{cond.provider}' not one of {PROVIDER_NAMES}")
    if cond.provider == "external" and not cond.external_command:
        raise ConfigError("conditioning.external_command: required when provider is 'external'")
    if cond.window < 1:
        raise ConfigError(f"conditioning.window: {cond.window} must be >= 1")
    if cond.image_tokens < 2:
        raise ConfigError(f"conditioning.image_tokens: {cond.image_tokens} must be >= 2")
    grid = cond.image_tokens - 1
    if int(grid**0.5) ** 2 != grid:
        raise ConfigError(
            f"conditioning.image_tokens: {cond.image_tokens} must be a square patch count plus one"
        )

    if len(cfg.processor.widths) != 3:
        raise ConfigError("processor.widths: exactly three stride-2 stages expected")
    if cfg.processor.upsample_mode not in RESIZE_MODE_NAMES:
        raise ConfigError(f"processor.upsample_mode: unknown mode '{cfg.processor.upsample_mode}'")

    unet = cfg.unet
    if unet.scales < 1:
        raise ConfigError(f"unet.scales: {unet.scales} must be >= 1")
    if len(unet.widths) != unet.scales:
        raise ConfigError(
            f"unet.widths: {len(unet.widths)} entries for {unet.scales} scales"
        )
    for i, w in enumerate(unet.widths):
        if w % unet.n_heads != 0:
            raise ConfigError(f"unet.widths[{i}]: {w} not divisible by n_heads={unet.n_heads}")
        if w % unet.groups != 0:
            raise ConfigError(f"unet.widths[{i}]: {w} not divisible by groups={unet.groups}")
    if unet.time_dim % 2 != 0:
        raise ConfigError(f"unet.time_dim: {unet.time_dim} must be even")
    if sorted(unet.sublayer_order) != sorted(("self", "image", "text", "pixel")):
        raise ConfigError(
            f"unet.sublayer_order: must be a permutation of self/image/text/pixel, got {unet.sublayer_order}"
        )

    ctrl = cfg.control
    if ctrl.widths is not None and len(ctrl.widths) != unet.scales:
        raise ConfigError(f"control.widths: {len(ctrl.widths)} entries for {unet.scales} scales")
    if ctrl.additive_skips and cfg.control_widths != unet.widths:
        raise ConfigError("control.additive_skips: requires control widths equal to unet widths")

    tr = cfg.train
    if not (0.0 < tr.beta_min < tr.beta_max < 1.0):
        raise ConfigError(f"train.beta_min/beta_max: need 0 < {tr.beta_min} < {tr.beta_max} < 1")
    if tr.timesteps < 1:
        raise ConfigError(f"train.timesteps: {tr.timesteps} must be >= 1")
    if not 0.0 <= tr.null_prob <= 1.0:
        raise ConfigError(f"train.null_prob: {tr.null_prob} outside [0, 1]")
    if tr.regime not in ("adapter", "full"):
        raise ConfigError(f"train.regime: '{tr.regime}' not one of ('adapter', 'full')")

    if not 1 <= cfg.sampler.steps <= tr.timesteps:
        raise ConfigError(
            f"sampler.steps: {cfg.sampler.steps} outside [1, train.timesteps={tr.timesteps}]"
        )
