"""Helpers shared by the torch networks."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Raised when a loss turns non-finite; carries the last finite state."""

    def __init__(self, message: str, last_good_state: dict | None = None, step: int | None = None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.step = step


def fan_in(layer: nn.Module) -> int:
    w = layer.weight
    if isinstance(layer, nn.ConvTranspose2d):
        # each output pixel sees in_channels * (k / stride)^2 taps
        k, s = layer.kernel_size[0], layer.stride[0]
        return w.shape[0] * max(1, (k // s) ** 2)
    return int(np.prod(w.shape[1:]))


@torch.no_grad()
def init_fan_in_uniform(module: nn.Module, seed: int) -> None:
    """Centered uniform init in module order: weights +-sqrt(6/fan_in), biases +-1/sqrt(fan_in).

    Nonzero biases keep ReLU inputs off the kink at exactly 0 where a
    channel's inputs are all zero.
    """
    g = torch.Generator().manual_seed(seed)
    for layer in module.modules():
        if isinstance(layer, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            bound = math.sqrt(6.0 / fan_in(layer))
            layer.weight.uniform_(-bound, bound, generator=g)
            if layer.bias is not None:
                b = 1.0 / math.sqrt(fan_in(layer))
                layer.bias.uniform_(-b, b, generator=g)


def zero_params(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def images_to_nchw(images) -> torch.Tensor:
    """``[H, W, C]`` or ``[N, H, W, C]`` array -> float32 ``[N, C, H, W]`` tensor."""
    t = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def nchw_to_images(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def make_adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def clone_state(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}
