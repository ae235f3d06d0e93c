"""Central-difference gradient oracle shared by the gradient tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch


def central_difference(loss_fn: Callable[[], torch.Tensor], tensor: torch.Tensor, index: tuple,
                       h: float = 1e-5) -> float:
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = loss_fn().item()
        tensor[index] = orig - h
        down = loss_fn().item()
        tensor[index] = orig
    return (up - down) / (2 * h)


def max_relative_error(loss_fn: Callable[[], torch.Tensor], tensors: Mapping[str, torch.Tensor],
                       rng: np.random.Generator, coords_per_tensor: int = 6,
                       h: float = 1e-5, floor: float = 1e-6) -> dict[str, float]:
    """Compare autograd gradients with central differences on random coordinates.

    Per tensor the error is ``max |analytic - numeric|`` over the sampled
    coordinates, divided by the largest analytic gradient magnitude of that
    tensor (an infinity-norm relative error, robust to near-zero entries).
    The denominator is floored at ``floor``: tensors whose gradient vanishes
    identically (e.g. a convolution bias feeding an instance norm) are then
    held to an absolute error of ``1e-4 * floor``, well above the central
    difference round-off of roughly ``1e-16 / h``.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    analytic = {k: t.grad.detach().clone() for k, t in tensors.items()}
    errors = {}
    for name, t in tensors.items():
        flat_n = t.numel()
        picks = rng.choice(flat_n, size=min(coords_per_tensor, flat_n), replace=False)
        scale = max(analytic[name].abs().max().item(), floor)
        worst = 0.0
        for p in picks:
            idx = np.unravel_index(int(p), tuple(t.shape))
            num = central_difference(loss_fn, t, idx, h)
            worst = max(worst, abs(analytic[name][idx].item() - num) / scale)
        errors[name] = worst
    return errors


@dataclass
class GradientCheck:
    relative: dict[str, float]   # tensors with a non-vanishing analytic gradient
    vanishing: dict[str, float]  # max |numeric| for tensors whose analytic gradient is round-off

    @property
    def max_relative(self) -> float:
        return max(self.relative.values(), default=0.0)

    @property
    def max_vanishing(self) -> float:
        return max(self.vanishing.values(), default=0.0)


def check_gradients(loss_fn: Callable[[], torch.Tensor], tensors: Mapping[str, torch.Tensor],
                    rng: np.random.Generator, coords_per_tensor: int = 6,
                    h: float = 1e-5, vanishing_ratio: float = 1e-10) -> GradientCheck:
    """Relative check where autograd reports a gradient, absolute check where it reports none.

    A relative error is undefined for a tensor whose gradient vanishes
    identically (a convolution bias feeding an instance norm); autograd then
    returns round-off, below ``vanishing_ratio`` times the largest gradient
    entry of any tensor. Such tensors are reported separately as the largest
    central-difference magnitude, which must itself sit at round-off level.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    scale = max(t.grad.abs().max().item() for t in tensors.values())
    zero = {k for k, t in tensors.items() if t.grad.abs().max().item() <= vanishing_ratio * scale}
    live = {k: t for k, t in tensors.items() if k not in zero}
    relative = max_relative_error(loss_fn, live, rng, coords_per_tensor, h) if live else {}
    vanishing = {}
    for name in sorted(zero):
        t = tensors[name]
        picks = rng.choice(t.numel(), size=min(coords_per_tensor, t.numel()), replace=False)
        vanishing[name] = max(abs(central_difference(loss_fn, t, np.unravel_index(int(p), tuple(t.shape)), h))
                              for p in picks)
    return GradientCheck(relative, vanishing)
