"""Runtime verification suite behind `mrir check`.

Every mechanism with a cheap independent oracle is exercised here: exact
codec round trips, DCT/DFT consistency against naive transforms, gradient
checks against central differences, zero-initialization inertness, guidance
identities, and the metric closed forms. Exits nonzero on any failure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import degrade, diffusion, metrics
from .codec import SpaceToDepthCodec
from .conditioning import EmbeddingRefiner, StubTextEncoder, encode_long_prompt
from .config import load_config
from .fusion_unet import FusionBlock
from .model import build_model
from .numeric import check_module_gradients, check_parameter_gradients, randomize_parameters
from .pixel_control import ControlBranch, PixelProcessor


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2-D DFT where every output bin is a full O(N^2) sum,
    using explicit exponential matrices. Independent of any FFT algorithm."""
    h, w = x.shape[-2:]
    jh = np.arange(h)
    jw = np.arange(w)
    eh = np.exp(-2j * np.pi * np.outer(jh, jh) / h)
    ew = np.exp(-2j * np.pi * np.outer(jw, jw) / w)
    return np.einsum("uj,...jk,vk->...uv", eh, x.astype(np.complex128), ew)


def micro_config(**overrides):
    base = {
        "conditioning": {
            "d_txt": 8, "d_img": 6, "image_tokens": 5, "vocab_size": 64, "d_hidden": 8,
        },
        "processor": {"widths": [4, 6, 8], "c_f": 8},
        "unet": {
            "scales": 2, "widths": [8, 12], "n_heads": 2, "d_cross": 8,
            "time_dim": 8, "groups": 4,
        },
    }
    for key, section in overrides.items():
        base.setdefault(key, {}).update(section)
    return load_config(base)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _check_codec_roundtrip() -> str:
    codec = SpaceToDepthCodec(4)
    gen = torch.Generator().manual_seed(11)
    img = torch.rand(3, 24, 24, generator=gen, dtype=torch.float64)
    code = codec.encode(img)
    if code.z.shape != (48, 6, 6):
        raise AssertionError(f"latent shape {tuple(code.z.shape)}")
    back = codec.decode(code)
    if not torch.equal(back, img):
        raise AssertionError("decode(encode(x)) not bit-identical")
    flat = codec.encode(torch.full((3, 8, 8), 0.5, dtype=torch.float64))
    if flat.z.abs().max() != 0.0:
        raise AssertionError("mid-gray image did not map to the zero latent")
    return "bit-exact both directions on a 24x24 float64 image"


def _check_dct() -> str:
    rng = np.random.default_rng(3)
    x = rng.random((16, 24))
    err = np.abs(degrade.block_idct2(degrade.block_dct2(x)) - x).max()
    if err > 1e-10:
        raise AssertionError(f"DCT round-trip error {err:.2e} > 1e-10")
    return f"forward+inverse round-trip error {err:.2e}"


def _test_image(size: int = 64) -> np.ndarray:
    rng = np.random.default_rng(20)
    base = rng.random((size // 8, size // 8, 3))
    img = degrade.resize(base, (size, size), "bilinear")
    return np.clip(img + 0.05 * rng.standard_normal((size, size, 3)), 0.0, 1.0)


def _check_jpeg_q100() -> str:
    img = _test_image()
    p = metrics.psnr_y(img.astype(np.float32), degrade.jpeg_approx(img, 100).astype(np.float32))
    if p < 50.0:
        raise AssertionError(f"q=100 PSNR {p:.2f} dB < 50")
    return f"q=100 round trip at {p:.2f} dB"


def _check_jpeg_monotone() -> str:
    img = _test_image()
    values = [
        metrics.psnr_y(img.astype(np.float32), degrade.jpeg_approx(img, q).astype(np.float32))
        for q in (90, 70, 50, 30)
    ]
    for lo, hi in zip(values[1:], values[:-1]):
        if lo > hi + 1e-9:
            raise AssertionError(f"PSNR not non-increasing: {values}")
    return "PSNR at q=90/70/50/30: " + "/".join(f"{v:.1f}" for v in values)


def _check_degrade_determinism() -> str:
    cfg = load_config(None)
    params = degrade.sample_degradation_params(cfg.degrade, seed=7)
    again = degrade.sample_degradation_params(cfg.degrade, seed=7)
    if params != again:
        raise AssertionError("same seed produced different parameters")
    hq = _test_image(64)
    a = degrade.synthesize_pair(hq, params)
    b = degrade.synthesize_pair(hq, params)
    if not np.array_equal(a.lq, b.lq):
        raise AssertionError("same params produced different LQ images")
    return "params and LQ bit-identical under a fixed seed"


def _check_schedule() -> str:
    sched = diffusion.make_schedule()
    ab = sched.alpha_bars
    if not ((ab > 0) & (ab < 1)).all() or not (np.diff(ab) < 0).all():
        raise AssertionError("alpha_bar not strictly decreasing in (0, 1)")
    if ab[0] <= 0.99 or ab[-1] >= 0.01:
        raise AssertionError(f"alpha_bar endpoints {ab[0]:.4f}, {ab[-1]:.2e}")
    gen = torch.Generator().manual_seed(5)
    z0 = torch.randn(10_000, generator=gen, dtype=torch.float64)
    eps = torch.randn(10_000, generator=gen, dtype=torch.float64)
    for t in (1, 500, 999):
        var = float(diffusion.forward_diffuse(z0, t, eps, sched).var())
        if not 0.95 <= var <= 1.05:
            raise AssertionError(f"variance {var:.4f} at t={t} outside [0.95, 1.05]")
    return "monotone alpha_bar, variance preserved at t=1/500/999"


def _check_chunk_law() -> str:
    enc = StubTextEncoder(d_txt=8, vocab_size=256, seed=1)
    rng = np.random.default_rng(9)
    for _ in range(50):
        n_words = int(rng.integers(0, 200))
        caption = " ".join(f"w{rng.integers(1000)}" for _ in range(n_words))
        emb = encode_long_prompt(caption, enc)
        n_tokens = len(enc.tokenize(caption))
        expect = max(1, math.ceil(n_tokens / enc.window))
        if emb.chunk_count != expect or emb.tokens.shape[0] != expect * (enc.window + 2):
            raise AssertionError(f"chunk law broken for {n_tokens} tokens")
    return "chunk_count = max(1, ceil(n/75)) over 50 random captions"


def _grad_detail(errors: dict[str, float], bound: float = 1e-5) -> str:
    worst = max(errors.values())
    if worst > bound:
        name = max(errors, key=errors.get)
        raise AssertionError(f"gradient mismatch {worst:.2e} > {bound:.0e} at {name}")
    return f"max relative error {worst:.2e} over {len(errors)} tensors"


def _check_grad_refine() -> str:
    torch.manual_seed(0)
    module = EmbeddingRefiner(3, 4, 4).double()
    randomize_parameters(module, seed=1)
    x = torch.randn(5, 3, dtype=torch.float64)
    r = torch.randn(5, 4, dtype=torch.float64)
    return _grad_detail(check_module_gradients(module, lambda: (module(x) * r).sum()))


def _check_grad_attention_block() -> str:
    torch.manual_seed(0)
    block = FusionBlock(d_model=4, d_txt=3, d_cross=5, n_heads=2, kind="up", d_pix=6).double()
    randomize_parameters(block, seed=2)
    x = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    text = torch.randn(1, 3, 3, dtype=torch.float64)
    image = torch.randn(1, 2, 5, dtype=torch.float64)
    control = torch.randn(1, 6, 2, 2, dtype=torch.float64)
    r = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    fn = lambda: (block(x, text, image, control) * r).sum()
    return _grad_detail(check_module_gradients(block, fn))


def _check_grad_processor() -> str:
    torch.manual_seed(0)
    proc = PixelProcessor((2, 3, 4), 4).double()
    randomize_parameters(proc, seed=3)
    x = torch.randn(1, 3, 16, 16, dtype=torch.float64)
    r = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    return _grad_detail(check_module_gradients(proc, lambda: (proc(x).F * r).sum()))


def _check_grad_control_branch() -> str:
    torch.manual_seed(0)
    branch = ControlBranch(c_f=4, widths=(4, 6), out_widths=(4, 6), time_dim=4, groups=2).double()
    randomize_parameters(branch, seed=4)
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    t = torch.tensor([3])
    rs = [torch.randn(1, 4, 8, 8, dtype=torch.float64), torch.randn(1, 6, 4, 4, dtype=torch.float64)]
    fn = lambda: sum((m * r).sum() for m, r in zip(branch(x, t).maps, rs))
    return _grad_detail(check_module_gradients(branch, fn))


def _check_grad_losses() -> str:
    gen = torch.Generator().manual_seed(6)
    gt = torch.rand(3, 8, 8, generator=gen, dtype=torch.float64)
    pred = torch.rand(3, 8, 8, generator=gen, dtype=torch.float64).requires_grad_(True)
    errors = {}
    errors["l_fft"] = max(
        check_parameter_gradients(lambda: diffusion.loss_fft(pred, gt), [("pred", pred)]).values()
    )
    errors["l1"] = max(
        check_parameter_gradients(lambda: (pred - gt).abs().mean(), [("pred", pred)]).values()
    )
    errors["mse"] = max(
        check_parameter_gradients(lambda: ((pred - gt) ** 2).mean(), [("pred", pred)]).values()
    )
    return _grad_detail(errors)


def _check_dft_oracle() -> str:
    rng = np.random.default_rng(12)
    worst = 0.0
    for shape in ((8, 8), (16, 16)):
        for _ in range(5):
            x = rng.standard_normal(shape)
            fast = torch.fft.fft2(torch.from_numpy(x)).numpy()
            worst = max(worst, float(np.abs(fast - naive_dft2(x)).max()))
    if worst > 1e-8:
        raise AssertionError(f"fast/naive DFT max-abs gap {worst:.2e} > 1e-8")
    return f"fast vs naive DFT max-abs gap {worst:.2e}"


def _check_inertness() -> str:
    cfg = micro_config()
    model = build_model(cfg, seed=3)
    gen = torch.Generator().manual_seed(8)
    for trial in range(3):
        z = torch.randn(1, model.codec.latent_channels, 4, 4, generator=gen)
        lq_up = torch.rand(1, 3, 32, 32, generator=gen)
        text = torch.randn(1, 77, cfg.conditioning.d_txt, generator=gen)
        image = torch.randn(1, cfg.conditioning.image_tokens, cfg.unet.d_cross, generator=gen)
        t = int(torch.randint(0, 1000, (1,), generator=gen))
        controls = model.control_branch(model.processor(lq_up).F, torch.tensor([t]))
        with torch.no_grad():
            with_c = model.unet(z, t, text, image, controls.maps)
            without = model.unet(z, t, text, image, None)
        if not torch.equal(with_c, without):
            raise AssertionError(f"fresh control branch perturbed the output (trial {trial})")
    return "fresh controls leave the denoiser bit-identical (3 trials)"


def _check_cfg_identities() -> str:
    gen = torch.Generator().manual_seed(10)
    u = torch.randn(2, 5, generator=gen, dtype=torch.float64)
    c = torch.randn(2, 5, generator=gen, dtype=torch.float64)
    if (diffusion.cfg_combine(u, c, 1.0) - c).abs().max() > 1e-6:
        raise AssertionError("w=1 does not reduce to the conditional branch")
    if not torch.equal(diffusion.cfg_combine(u, c, 0.0), u):
        raise AssertionError("w=0 does not reduce to the unconditional branch")
    for w in (0.3, 2.5, 7.0):
        lhs = diffusion.cfg_combine(u, c, w)
        rhs = (1.0 - w) * u + w * c
        if (lhs - rhs).abs().max() > 1e-9:
            raise AssertionError(f"guidance not affine in w at w={w}")
    return "w=0/w=1 collapse and affinity in w hold"


def _check_metric_oracles() -> str:
    a = np.full((16, 16, 3), 0.3, dtype=np.float64)
    b = a + 1.0 / 219.0  # one luma step under the studio-swing convention
    p = metrics.psnr_y(a, b)
    if abs(p - 10.0 * math.log10(255.0**2)) > 0.01:
        raise AssertionError(f"constant-offset PSNR {p:.4f} off the 48.13 dB closed form")
    img = _test_image(32).astype(np.float64)
    if abs(metrics.ssim_y(img, img) - 1.0) > 1e-9:
        raise AssertionError("SSIM(a, a) != 1")
    other = np.clip(1.0 - img, 0.0, 1.0)
    if metrics.psnr_y(img, other) != metrics.psnr_y(other, img):
        raise AssertionError("PSNR not symmetric")
    return f"closed-form PSNR {p:.4f} dB, SSIM self-identity exact"


def _check_freeze_partition() -> str:
    model = build_model(micro_config(), seed=3)
    policy = diffusion.FreezePolicy.adapter()
    trainable, frozen = policy.partition(model)
    if not trainable or not frozen:
        raise AssertionError("adapter partition is trivial")
    total = len(list(model.named_parameters()))
    if len(trainable) + len(frozen) != total:
        raise AssertionError("partition does not cover all parameters")
    bad = [n for n in frozen if n.startswith(("processor.", "rgb_heads.", "control_branch.", "refine_layer."))]
    if bad:
        raise AssertionError(f"adapter froze new-module parameters: {bad[:3]}")
    return f"{len(trainable)} trainable / {len(frozen)} frozen tensors"


CHECKS = (
    ("codec_roundtrip", _check_codec_roundtrip),
    ("dct_selfconsistency", _check_dct),
    ("jpeg_q100", _check_jpeg_q100),
    ("jpeg_monotone", _check_jpeg_monotone),
    ("degrade_determinism", _check_degrade_determinism),
    ("noise_schedule", _check_schedule),
    ("prompt_chunk_law", _check_chunk_law),
    ("grad_refine_layer", _check_grad_refine),
    ("grad_fusion_block", _check_grad_attention_block),
    ("grad_processor", _check_grad_processor),
    ("grad_control_branch", _check_grad_control_branch),
    ("grad_loss_terms", _check_grad_losses),
    ("dft_oracle", _check_dft_oracle),
    ("zero_init_inertness", _check_inertness),
    ("cfg_identities", _check_cfg_identities),
    ("metric_oracles", _check_metric_oracles),
    ("freeze_partition", _check_freeze_partition),
)


def run_checks() -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        try:
            detail = fn()
            results.append(CheckResult(name, True, detail))
        except Exception as exc:  # noqa: BLE001 - every failure must be reported
            results.append(CheckResult(name, False, str(exc)))
    return results
