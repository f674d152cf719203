"""Reconstruction network: features -> coarse image.

A fully-connected layer reshaped to ``[C0, H0, W0]``, a stack of
kernel-4 / stride-2 / padding-1 transposed convolutions (each doubles the
spatial size), a 1x1 convolution to RGB and a sigmoid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from ._nn import (TrainingDivergedError, clone_state, images_to_nchw, init_fan_in_uniform, make_adam,
                  nchw_to_images)

log = logging.getLogger(__name__)

LOSSES = ("mse", "l2")


@dataclass(frozen=True)
class ReconSpec:
    feature_dim: int = 64
    fc_shape: tuple[int, int, int] = (32, 4, 4)
    deconv_channels: tuple[int, ...] = (32, 16)

    def __post_init__(self):
        object.__setattr__(self, "fc_shape", tuple(self.fc_shape))
        object.__setattr__(self, "deconv_channels", tuple(self.deconv_channels))

    @property
    def output_size(self) -> tuple[int, int]:
        scale = 2 ** len(self.deconv_channels)
        return self.fc_shape[1] * scale, self.fc_shape[2] * scale

    @classmethod
    def desk(cls, feature_dim: int = 64) -> "ReconSpec":
        return cls(feature_dim, (32, 4, 4), (32, 16))

    @classmethod
    def full_scale(cls) -> "ReconSpec":
        """4096 features -> 512x7x7 -> four deconvs -> 112x112x3."""
        return cls(4096, (512, 7, 7), (256, 128, 128, 128))

    def to_dict(self) -> dict:
        return asdict(self)


class ReconNet(nn.Module):
    def __init__(self, spec: ReconSpec):
        super().__init__()
        self.spec = spec
        c0, h0, w0 = spec.fc_shape
        self.fc = nn.Linear(spec.feature_dim, c0 * h0 * w0)
        layers, c_in = [], c0
        for ch in spec.deconv_channels:
            layers += [nn.ConvTranspose2d(c_in, ch, 4, 2, 1), nn.ReLU()]
            c_in = ch
        self.deconv = nn.Sequential(*layers)
        self.to_rgb = nn.Conv2d(c_in, 3, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.fc(z)).view(z.shape[0], *self.spec.fc_shape)
        return torch.sigmoid(self.to_rgb(self.deconv(h)))


def build_recon(spec: ReconSpec, seed: int = 0) -> ReconNet:
    model = ReconNet(spec)
    init_fan_in_uniform(model, seed)
    return model


def _features(model: ReconNet, z) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(z, dtype=np.float32))
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.shape[1] != model.spec.feature_dim:
        raise ValueError(f"feature length {t.shape[1]} != {model.spec.feature_dim}")
    return t


@torch.no_grad()
def recon_forward(model: ReconNet, z) -> np.ndarray:
    """Coarse image(s) ``[H, W, 3]`` (or ``[N, H, W, 3]`` for a batch of features)."""
    single = np.asarray(z).ndim == 1
    out = nchw_to_images(model(_features(model, z)))
    return out[0] if single else out


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    """``mse``: mean squared pixel error. ``l2``: unsquared per-image L2 norm, batch mean."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if kind == "mse":
        return ((pred - target) ** 2).mean()
    if kind == "l2":
        return (pred - target).flatten(1).norm(dim=1).mean()
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


@torch.no_grad()
def recon_loss(model: ReconNet, z, x, kind: str = "mse") -> float:
    target = images_to_nchw(x)
    return float(reconstruction_loss(model(_features(model, z)), target, kind))


@dataclass
class ReconTrainConfig:
    steps: int = 2000
    batch: int = 256
    lr: float = 0.01
    lr_decay: float = 0.95
    decay_every: int | None = None  # optimizer steps per decay; None = one epoch
    noise_scale: float = 0.01  # input noise std as a fraction of per-dim feature std
    loss: str = "mse"
    seed: int = 0


@dataclass
class ReconHistory:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def train_recon(Z, images, spec: ReconSpec, cfg: ReconTrainConfig,
                model: ReconNet | None = None) -> tuple[ReconNet, ReconHistory]:
    """Adam on the reconstruction loss with Gaussian input noise and exponential lr decay."""
    z_all = torch.as_tensor(np.asarray(Z, dtype=np.float32))
    x_all = images_to_nchw(images)
    n = z_all.shape[0]
    if n < 1:
        raise ValueError("need at least one training pair")
    if x_all.shape[0] != n:
        raise ValueError("feature and image counts differ")
    if tuple(x_all.shape[2:]) != spec.output_size:
        raise ValueError(f"targets are {tuple(x_all.shape[2:])}, network outputs {spec.output_size}")
    if cfg.loss not in LOSSES:
        raise ValueError(f"unknown loss {cfg.loss!r}")
    model = model or build_recon(spec, cfg.seed)
    opt = make_adam(model.parameters(), cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    z_std = z_all.std(dim=0, unbiased=False) if n > 1 else torch.zeros(z_all.shape[1])
    sigma = cfg.noise_scale * z_std
    batch = min(cfg.batch, n)
    decay_every = cfg.decay_every or math.ceil(n / batch)
    hist = ReconHistory()
    last_good = clone_state(model)
    perm, pos = torch.randperm(n, generator=g), 0
    model.train()
    for step in range(cfg.steps):
        if pos >= n:
            perm, pos = torch.randperm(n, generator=g), 0
        idx = perm[pos:pos + batch]
        pos += batch
        z = z_all[idx]
        if cfg.noise_scale > 0:
            z = z + sigma * torch.randn(z.shape, generator=g)
        loss = reconstruction_loss(model(z), x_all[idx], cfg.loss)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise TrainingDivergedError(f"reconstruction loss became {loss.item()} at step {step}",
                                        last_good, step)
        last_good = clone_state(model) if step % 50 == 0 else last_good
        opt.zero_grad()
        loss.backward()
        opt.step()
        hist.loss.append(loss.item())
        hist.lr.append(opt.param_groups[0]["lr"])
        if (step + 1) % decay_every == 0:
            for group in opt.param_groups:
                group["lr"] *= cfg.lr_decay
        if step % 200 == 0 or step == cfg.steps - 1:
            log.info("recon step %d loss %.6f lr %.2e", step, hist.loss[-1], hist.lr[-1])
    model.eval()
    return model, hist


def save_recon(model: ReconNet, directory: str | Path, step: int = 0,
               optimizer: torch.optim.Optimizer | None = None) -> None:
    checkpoint.save_module(directory, model, {"spec": model.spec.to_dict(), "step": step}, optimizer)


def load_recon(directory: str | Path) -> ReconNet:
    _, meta = checkpoint.load_tensors(directory)
    model = ReconNet(ReconSpec(**meta["spec"]))
    checkpoint.load_module(directory, model)
    model.eval()
    return model
