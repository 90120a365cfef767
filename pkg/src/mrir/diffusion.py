"""Noise schedule, composite losses, training step, and guided DDPM sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import SamplingError, TrainingError
from .pixel_control import SupervisionImages

_ADAPTER_SELECTORS = (
    "processor",
    "rgb_heads",
    "control_branch",
    "refine_layer",
    "image_cross",
    "pixel_attn",
)


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    inference_steps: np.ndarray  # strictly decreasing timestep indices


def make_schedule(
    timesteps: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02, steps: int = 50
) -> NoiseSchedule:
    """Linear-beta schedule plus an evenly spaced descending inference subsequence."""
    if not (0.0 < beta_min < beta_max < 1.0) and timesteps > 1:
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    if timesteps == 1 and not (0.0 < beta_min < 1.0):
        raise ValueError(f"beta_min {beta_min} outside (0, 1)")
    if beta_min >= 0.01:
        raise ValueError(f"beta_min {beta_min} too large; alpha_bar[0] must exceed 0.99")
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps {steps} outside [1, {timesteps}]")
    betas = np.linspace(beta_min, beta_max, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    inference = np.round(np.linspace(timesteps - 1, 0, steps)).astype(np.int64)
    if steps > 1 and not (np.diff(inference) < 0).all():
        raise ValueError("inference steps are not strictly decreasing")
    return NoiseSchedule(timesteps, betas, alphas, alpha_bars, inference)


def _mix_coefficients(sched: NoiseSchedule, t, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if (t_arr < 0).any() or (t_arr >= sched.timesteps).any():
        raise ValueError(f"timestep {t} outside [0, {sched.timesteps})")
    ab = sched.alpha_bars[t_arr]
    signal = torch.from_numpy(np.sqrt(ab)).to(dtype)
    noise = torch.from_numpy(np.sqrt(1.0 - ab)).to(dtype)
    return signal, noise


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    signal, noise = _mix_coefficients(sched, t, z0.dtype)
    if signal.numel() == 1:
        return signal * z0 + noise * eps
    shape = (-1,) + (1,) * (z0.ndim - 1)
    return signal.view(shape) * z0 + noise.view(shape) * eps


def loss_fft(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over frequency bins and channels of |Re d| + |Im d| for the
    unnormalized 2-D DFT difference d."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    delta = torch.fft.fft2(pred) - torch.fft.fft2(gt)
    return (delta.real.abs() + delta.imag.abs()).mean()


def loss_rgb(sup: SupervisionImages) -> torch.Tensor:
    """Sum over the three scales of the mean absolute error."""
    total = None
    for pred, gt in sup.pairs():
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
        term = (pred - gt).abs().mean()
        total = term if total is None else total + term
    return total


def loss_fft_scales(sup: SupervisionImages) -> torch.Tensor:
    total = None
    for pred, gt in sup.pairs():
        term = loss_fft(pred, gt)
        total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class LossBreakdown:
    l_diff: float
    l_rgb: float
    l_fft: float
    total: float
    lambda1: float = 0.1
    lambda2: float = 0.01

    @classmethod
    def compose(cls, l_diff: float, l_rgb: float, l_fft: float,
                lambda1: float = 0.1, lambda2: float = 0.01) -> "LossBreakdown":
        total = l_diff + lambda1 * l_rgb + lambda2 * l_fft
        return cls(l_diff, l_rgb, l_fft, total, lambda1, lambda2)


@dataclass(frozen=True)
class FreezePolicy:
    """Partition of parameter paths into trainable and frozen.

    A parameter is trainable when any selector is a path prefix or a dotted
    path component of its name; everything else stays frozen.
    """

    trainable: tuple[str, ...]

    @classmethod
    def adapter(cls) -> "FreezePolicy":
        return cls(trainable=_ADAPTER_SELECTORS)

    @classmethod
    def full(cls) -> "FreezePolicy":
        return cls(trainable=("*",))

    def is_trainable(self, name: str) -> bool:
        dotted = f".{name}."
        for sel in self.trainable:
            if sel == "*" or name == sel or name.startswith(sel + ".") or f".{sel}." in dotted:
                return True
        return False

    def partition(self, model: torch.nn.Module) -> tuple[list[str], list[str]]:
        trainable, frozen = [], []
        for name, _ in model.named_parameters():
            (trainable if self.is_trainable(name) else frozen).append(name)
        return trainable, frozen

    def apply(self, model: torch.nn.Module) -> list[torch.nn.Parameter]:
        """Set requires_grad per the partition; returns the trainable parameters."""
        params = []
        for name, p in model.named_parameters():
            on = self.is_trainable(name)
            p.requires_grad_(on)
            if on:
                params.append(p)
        return params


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    """Guidance extrapolation eps_uncond + w * (eps_cond - eps_uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(
            f"shape mismatch {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}"
        )
    return eps_uncond + w * (eps_cond - eps_uncond)


def lre_init(
    lq_latent: torch.Tensor, sched: NoiseSchedule, eps: torch.Tensor, enabled: bool = True
) -> torch.Tensor:
    """Sampling start: the LQ latent noised to the first inference timestep,
    or pure noise when disabled."""
    if eps.shape != lq_latent.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != latent shape {tuple(lq_latent.shape)}")
    if not enabled:
        return eps
    t_start = int(sched.inference_steps[0])
    return forward_diffuse(lq_latent, t_start, eps, sched)


@dataclass
class TrainItem:
    """One training example with precomputed frozen-encoder outputs."""

    hq: torch.Tensor        # [1, 3, H, W]
    lq_up: torch.Tensor     # [1, 3, H, W]
    text: torch.Tensor      # [1, L, d_txt]
    image_raw: torch.Tensor  # [1, M, d_img]


def train_step(
    model,
    batch: list[TrainItem],
    sched: NoiseSchedule,
    policy: FreezePolicy,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator,
    lambda1: float = 0.1,
    lambda2: float = 0.01,
    null_prob: float = 0.1,
) -> LossBreakdown:
    """One optimization step over a batch.

    Per item, in a fixed draw order (t, eps, null-drop): diffuse the encoded
    HQ latent, run processor / heads / control branch / denoiser, and
    accumulate the three loss terms. Only parameters selected by the policy
    are updated; with probability null_prob an item trains against the null
    conditioning bundle.
    """
    if not batch:
        raise ValueError("empty batch")
    n = len(batch)
    l_diff = l_rgb = l_fft = None
    for item in batch:
        t = int(torch.randint(0, sched.timesteps, (1,), generator=generator))
        z0 = model.codec.encode_tensor(item.hq)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        drop = float(torch.rand((), generator=generator)) < null_prob
        z_t = forward_diffuse(z0, t, eps, sched)

        feats = model.processor(item.lq_up)
        sup = model.rgb_heads(feats, item.hq)
        if drop:
            text = model.null_text_tokens.unsqueeze(0)
            image = model.null_image_tokens.unsqueeze(0)
        else:
            text = item.text
            image = model.refine_layer(item.image_raw)
        branch_text = text if model.control_branch.text_attns is not None else None
        controls = model.control_branch(feats.F, torch.tensor([t]), branch_text)
        eps_hat = model.unet(z_t, t, text, image, controls.maps)

        l_diff = _acc(l_diff, ((eps_hat - eps) ** 2).mean())
        l_rgb = _acc(l_rgb, loss_rgb(sup))
        l_fft = _acc(l_fft, loss_fft_scales(sup))

    l_diff, l_rgb, l_fft = l_diff / n, l_rgb / n, l_fft / n
    total = l_diff + lambda1 * l_rgb + lambda2 * l_fft
    for name, value in (("l_diff", l_diff), ("l_rgb", l_rgb), ("l_fft", l_fft)):
        if not torch.isfinite(value):
            raise TrainingError(f"non-finite loss term {name}")

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return LossBreakdown.compose(
        float(l_diff.detach()), float(l_rgb.detach()), float(l_fft.detach()), lambda1, lambda2
    )


def _acc(total, term):
    return term if total is None else total + term


def fit(
    model,
    items: list[TrainItem],
    steps: int,
    sched: NoiseSchedule,
    policy: FreezePolicy,
    lr: float,
    batch_size: int,
    seed: int = 0,
    lambda1: float = 0.1,
    lambda2: float = 0.01,
    null_prob: float = 0.1,
    log_every: int = 0,
) -> list[LossBreakdown]:
    """Train for a fixed number of steps on an in-memory item pool."""
    params = policy.apply(model)
    if not params:
        raise ValueError("freeze policy left no trainable parameters")
    optimizer = torch.optim.Adam(params, lr=lr)
    generator = torch.Generator().manual_seed(seed)
    history = []
    for step in range(steps):
        if len(items) <= batch_size:
            batch = items
        else:
            idx = torch.randperm(len(items), generator=generator)[:batch_size]
            batch = [items[i] for i in idx.tolist()]
        breakdown = train_step(
            model, batch, sched, policy, optimizer, generator,
            lambda1=lambda1, lambda2=lambda2, null_prob=null_prob,
        )
        history.append(breakdown)
        if log_every and (step + 1) % log_every == 0:
            print(
                f"step {step + 1}/{steps} total={breakdown.total:.4f} "
                f"diff={breakdown.l_diff:.4f} rgb={breakdown.l_rgb:.4f} fft={breakdown.l_fft:.4f}"
            )
    return history


def ddpm_sample(
    model,
    cond,
    lq: np.ndarray,
    sched: NoiseSchedule,
    w: float = 5.5,
    seed: int = 0,
    lre: bool = True,
    force_dual: bool = False,
) -> np.ndarray:
    """Restore an LQ image by iterating the DDPM posterior over the inference
    subsequence, guiding each step with the conditional/unconditional pair.

    Deterministic given the seed. When w == 1 the unconditional evaluation is
    skipped (the guidance combination collapses to the conditional branch);
    force_dual keeps both evaluations for verification.
    """
    from .degrade import resize as _resize  # local import avoids cycle at module load

    scale = model.cfg.degrade.final_scale
    h, w_img = lq.shape[:2]
    target = (h * scale, w_img * scale)
    lq_up = _resize(lq.astype(np.float64), target, model.cfg.processor.upsample_mode)

    multiple = model.codec.factor * 2 ** (model.unet.n_scales - 1)
    ph = (-target[0]) % multiple
    pw = (-target[1]) % multiple
    if ph or pw:
        lq_up = np.pad(lq_up, ((0, ph), (0, pw), (0, 0)), mode="reflect")

    dtype = next(model.unet.parameters()).dtype
    lq_up_t = torch.from_numpy(np.ascontiguousarray(lq_up.transpose(2, 0, 1))).to(dtype)[None]
    generator = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        latent = model.codec.encode_tensor(lq_up_t)
        eps0 = torch.randn(latent.shape, generator=generator, dtype=dtype)
        x = lre_init(latent, sched, eps0, enabled=lre)

        feats = model.processor(lq_up_t)
        text = cond.text.tokens.unsqueeze(0).to(dtype)
        image = cond.image.tokens.unsqueeze(0).to(dtype)
        null_text = cond.null_text.tokens.unsqueeze(0).to(dtype)
        null_image = cond.null_image.tokens.unsqueeze(0).to(dtype)
        branch_text = text if model.control_branch.text_attns is not None else None

        steps = sched.inference_steps
        for i, t in enumerate(steps):
            t = int(t)
            controls = model.control_branch(feats.F, torch.tensor([t]), branch_text)
            eps_cond = model.unet(x, t, text, image, controls.maps)
            if force_dual or w != 1.0:
                eps_uncond = model.unet(x, t, null_text, null_image, controls.maps)
                eps_hat = cfg_combine(eps_uncond, eps_cond, w)
            else:
                eps_hat = eps_cond

            ab_cur = float(sched.alpha_bars[t])
            ab_prev = float(sched.alpha_bars[int(steps[i + 1])]) if i + 1 < len(steps) else 1.0
            alpha = ab_cur / ab_prev
            beta = 1.0 - alpha
            mean = (x - (beta / math.sqrt(1.0 - ab_cur)) * eps_hat) / math.sqrt(alpha)
            if not torch.isfinite(mean).all():
                raise SamplingError(f"non-finite latent at sampling step {i} (t={t})")
            if i + 1 < len(steps):
                sigma = math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_cur))
                x = mean + sigma * torch.randn(mean.shape, generator=generator, dtype=dtype)
            else:
                x = mean

        img = model.codec.decode_tensor(x)[0]
    out = img.cpu().numpy().transpose(1, 2, 0)[: target[0], : target[1]]
    return np.ascontiguousarray(out, dtype=np.float32)
