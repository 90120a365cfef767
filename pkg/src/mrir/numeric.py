"""Finite-difference gradient verification.

Central differences against autograd, elementwise. The numeric side never
touches autograd: it perturbs parameter data in place and re-runs the
forward function, so it stays an independent oracle for the backward pass.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable

import torch


def central_difference_gradient(
    fn: Callable[[], torch.Tensor], param: torch.Tensor, h_base: float = 1e-5
) -> torch.Tensor:
    """d fn / d param, one central difference per element of `param`."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        h = h_base * max(1.0, abs(orig))
        flat[i] = orig + h
        f_plus = float(fn())
        flat[i] = orig - h
        f_minus = float(fn())
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_gradient_error(
    analytic: torch.Tensor, numeric: torch.Tensor, floor_scale: float = 1e-4
) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor is floor_scale * max(1, ||n||_inf): below it, tiny entries are
    compared absolutely so finite-difference round-off does not masquerade as
    a gradient bug.
    """
    scale = max(1.0, float(numeric.abs().max()) if numeric.numel() else 1.0)
    floor = floor_scale * scale
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, floor))
    return float(((analytic - numeric).abs() / denom).max())


def check_parameter_gradients(
    fn: Callable[[], torch.Tensor],
    params: Iterable[tuple[str, torch.Tensor]],
    h_base: float = 1e-5,
) -> dict[str, float]:
    """Compare autograd gradients of scalar fn() with central differences.

    Returns {param_name: max relative error}. `fn` must rebuild the graph on
    every call; parameters must be float64 leaves with requires_grad set.
    """
    params = list(params)
    loss = fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    errors: dict[str, float] = {}
    with torch.no_grad():
        for (name, param), grad in zip(params, grads):
            analytic = torch.zeros_like(param) if grad is None else grad
            numeric = central_difference_gradient(fn, param, h_base)
            errors[name] = relative_gradient_error(analytic, numeric)
    return errors


def check_module_gradients(
    module: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    h_base: float = 1e-5,
) -> dict[str, float]:
    """check_parameter_gradients over all parameters of a module."""
    return check_parameter_gradients(loss_fn, module.named_parameters(), h_base)


def randomize_parameters(module: torch.nn.Module, seed: int, scale: float = 0.3) -> None:
    """Replace all parameters with seeded Gaussian values.

    Gradient checks should run at a generic point; zero-initialized output
    projections would otherwise hide entire branches behind zero chain
    factors.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
