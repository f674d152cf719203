"""Conditional GAN that refines coarse reconstructions, one model pair per category.

The generator is a small U-Net fed with the coarse RGB image plus one
channel of standard-normal noise. The discriminator is a patch classifier
over the channel-concatenated (coarse, candidate) pair and emits a grid of
probabilities. The ground-truth image is the "real" candidate and the L1
target; the generator output is the "fake".
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint
from ._nn import TrainingDivergedError, images_to_nchw, init_fan_in_uniform, make_adam, nchw_to_images

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
GAN_MODES = ("minimax", "nonsaturating")
# recorded next to every trained registry entry
OBJECTIVE_READING = "min_G max_D L_cGAN(G,D) + lambda*L_L1(G) + theta*L_recon(R); theta=0 means R is frozen"


@dataclass(frozen=True)
class GenSpec:
    image_size: int = 16
    base_channels: int = 16
    depth: int = 2

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** min(level, 3)

    @classmethod
    def full_scale(cls) -> "GenSpec":
        """128x128 input, seven down/up levels."""
        return cls(128, 64, 7)


@dataclass(frozen=True)
class DiscSpec:
    channels: tuple[int, ...] = (16, 32)  # stride-2 convs; a final 3x3 conv maps to one logit per patch

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))

    @classmethod
    def full_scale(cls) -> "DiscSpec":
        return cls((64, 128, 256))


@dataclass
class GanConfig:
    lambda_l1: float = 100.0
    theta_recon: float = 0.0
    lr: float = 0.001
    batch: int = 256
    epochs: int = 500
    mode: str = "minimax"
    noise: str = "channel"  # "channel": N(0,1) extra input channel; "zero": deterministic zeros
    seed: int = 0

    def __post_init__(self):
        if self.lambda_l1 < 0 or self.theta_recon < 0:
            raise ValueError("lambda_l1 and theta_recon must be non-negative")
        if self.mode not in GAN_MODES:
            raise ValueError(f"mode must be one of {GAN_MODES}")
        if self.noise not in ("channel", "zero"):
            raise ValueError("noise must be 'channel' or 'zero'")


class Generator(nn.Module):
    def __init__(self, spec: GenSpec):
        super().__init__()
        if spec.image_size % 2 ** spec.depth:
            raise ValueError(f"image size {spec.image_size} not divisible by 2^{spec.depth}")
        self.spec = spec
        self.down = nn.ModuleList()
        skip_ch = [4]
        c_in = 4
        for i in range(spec.depth):
            c = spec.channels(i)
            self.down.append(nn.Sequential(nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(0.2)))
            skip_ch.append(c)
            c_in = c
        self.up = nn.ModuleList()
        for level in range(spec.depth, 0, -1):
            c = spec.channels(level - 2) if level >= 2 else spec.base_channels
            self.up.append(nn.Sequential(nn.ConvTranspose2d(c_in, c, 4, 2, 1), nn.ReLU()))
            c_in = c + skip_ch[level - 1]
        self.out = nn.Conv2d(c_in, 3, 3, 1, 1)

    def forward(self, coarse: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        h = torch.cat([coarse, noise], dim=1)
        skips = [h]
        for layer in self.down:
            h = layer(h)
            skips.append(h)
        for j, layer in enumerate(self.up):
            h = torch.cat([layer(h), skips[self.spec.depth - 1 - j]], dim=1)
        return torch.sigmoid(self.out(h))


class Discriminator(nn.Module):
    def __init__(self, spec: DiscSpec):
        super().__init__()
        self.spec = spec
        layers, c_in = [], 6
        for c in spec.channels:
            layers += [nn.Conv2d(c_in, c, 4, 2, 1), nn.LeakyReLU(0.2)]
            c_in = c
        layers.append(nn.Conv2d(c_in, 1, 3, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, coarse: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(torch.cat([coarse, candidate], dim=1)))


def build_gan(gen_spec: GenSpec, disc_spec: DiscSpec, seed: int = 0) -> tuple[Generator, Discriminator]:
    G, D = Generator(gen_spec), Discriminator(disc_spec)
    init_fan_in_uniform(G, seed)
    init_fan_in_uniform(D, seed + 1)
    return G, D


def sample_noise(shape: tuple[int, int], seed: int | torch.Generator) -> np.ndarray:
    """A ``[H, W, 1]`` standard-normal noise sample."""
    g = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(seed)
    return torch.randn((shape[0], shape[1], 1), generator=g).numpy()


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"{what}: dims {tuple(a.shape)} and {tuple(b.shape)} do not match")


@torch.no_grad()
def gen_forward(G: Generator, coarse: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Refined image(s), same dims as ``coarse``."""
    single = np.asarray(coarse).ndim == 3
    c, n = images_to_nchw(coarse), images_to_nchw(w)
    s = G.spec.image_size
    if tuple(c.shape[1:]) != (3, s, s):
        raise ValueError(f"generator expects {s}x{s}x3 input, got {tuple(c.shape[2:])}x{c.shape[1]}")
    _check_pair(c, n, "noise")
    out = nchw_to_images(G(c, n))
    return out[0] if single else out


@torch.no_grad()
def disc_forward(D: Discriminator, coarse: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """Per-patch probabilities ``[h, w]`` (``[N, h, w]`` for batches)."""
    single = np.asarray(coarse).ndim == 3
    c, x = images_to_nchw(coarse), images_to_nchw(candidate)
    _check_pair(c, x, "candidate")
    out = D(c, x)[:, 0].numpy()
    return out[0] if single else out


@dataclass
class GanLosses:
    l_cgan: torch.Tensor
    l_l1: torch.Tensor
    g_objective: torch.Tensor
    d_objective: torch.Tensor
    clamped: int = 0

    def to_dict(self) -> dict:
        return {
            "l_cgan": float(self.l_cgan.detach()),
            "l_l1": float(self.l_l1.detach()),
            "g_objective": float(self.g_objective.detach()),
            "d_objective": float(self.d_objective.detach()),
            "clamped": self.clamped,
        }


def gan_losses(d_real, d_fake, target, x_prime, lam: float, mode: str = "minimax") -> GanLosses:
    """Adversarial and L1 terms of the refinement objective.

    ``l_cgan = mean log D(real) + mean log(1 - D(fake))`` which D ascends, so
    ``d_objective = -l_cgan``. The generator minimizes
    ``mean log(1 - D(fake)) + lam * l_l1`` (``minimax``) or
    ``-mean log D(fake) + lam * l_l1`` (``nonsaturating``). Probabilities are
    clamped to ``[1e-7, 1 - 1e-7]`` before the logs; ``clamped`` counts how
    many entries were moved.
    """
    if mode not in GAN_MODES:
        raise ValueError(f"mode must be one of {GAN_MODES}")
    d_real, d_fake = torch.as_tensor(d_real), torch.as_tensor(d_fake)
    target, x_prime = torch.as_tensor(target), torch.as_tensor(x_prime)
    if target.shape != x_prime.shape:
        raise ValueError(f"target {tuple(target.shape)} and output {tuple(x_prime.shape)} differ")
    lo, hi = PROB_EPS, 1.0 - PROB_EPS
    clamped = int(((d_real < lo) | (d_real > hi)).sum() + ((d_fake < lo) | (d_fake > hi)).sum())
    d_real = d_real.clamp(lo, hi)
    d_fake = d_fake.clamp(lo, hi)
    fake_term = torch.log1p(-d_fake).mean()
    l_cgan = torch.log(d_real).mean() + fake_term
    l_l1 = (target - x_prime).abs().mean()
    adv = fake_term if mode == "minimax" else -torch.log(d_fake).mean()
    return GanLosses(l_cgan, l_l1, adv + lam * l_l1, -l_cgan, clamped)


class GanTrainer:
    """Alternating Adam updates: one discriminator step, then one generator step."""

    def __init__(self, G: Generator, D: Discriminator, cfg: GanConfig):
        self.G, self.D, self.cfg = G, D, cfg
        self.opt_g = make_adam(G.parameters(), cfg.lr)
        self.opt_d = make_adam(D.parameters(), cfg.lr)
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.steps = 0

    def noise(self, coarse: torch.Tensor) -> torch.Tensor:
        shape = (coarse.shape[0], 1, *coarse.shape[2:])
        if self.cfg.noise == "zero":
            return torch.zeros(shape)
        return torch.randn(shape, generator=self.rng)

    def d_step(self, coarse: torch.Tensor, target: torch.Tensor, w: torch.Tensor) -> GanLosses:
        with torch.no_grad():
            fake = self.G(coarse, w)
        losses = gan_losses(self.D(coarse, target), self.D(coarse, fake), target, fake,
                            self.cfg.lambda_l1, self.cfg.mode)
        self._check(losses, "discriminator")
        self.opt_d.zero_grad()
        losses.d_objective.backward()
        self.opt_d.step()
        return losses

    def g_step(self, coarse: torch.Tensor, target: torch.Tensor, w: torch.Tensor) -> GanLosses:
        fake = self.G(coarse, w)
        with torch.no_grad():
            d_real = self.D(coarse, target)
        losses = gan_losses(d_real, self.D(coarse, fake), target, fake, self.cfg.lambda_l1, self.cfg.mode)
        self._check(losses, "generator")
        self.opt_g.zero_grad()
        losses.g_objective.backward()
        self.opt_g.step()
        return losses

    def step(self, coarse, target) -> dict:
        coarse = coarse if isinstance(coarse, torch.Tensor) else images_to_nchw(coarse)
        target = target if isinstance(target, torch.Tensor) else images_to_nchw(target)
        if coarse.shape[0] == 0:
            raise ValueError("empty batch")
        _check_pair(coarse, target, "target")
        self.G.train()
        self.D.train()
        w = self.noise(coarse)
        d = self.d_step(coarse, target, w)
        g = self.g_step(coarse, target, w)
        self.steps += 1
        dl, gl = d.to_dict(), g.to_dict()
        return {
            "step": self.steps,
            "l_cgan": dl["l_cgan"],
            "d_objective": dl["d_objective"],
            "l_l1": gl["l_l1"],
            "g_objective": gl["g_objective"],
            "clamped": d.clamped + g.clamped,
        }

    def _check(self, losses: GanLosses, who: str) -> None:
        vals = losses.to_dict()
        bad = {k: v for k, v in vals.items() if k != "clamped" and not np.isfinite(v)}
        if bad:
            raise TrainingDivergedError(f"{who} update at step {self.steps}: non-finite losses {bad}",
                                        step=self.steps)


def gan_step(trainer: GanTrainer, coarse, target) -> dict:
    return trainer.step(coarse, target)


@dataclass
class GanHistory:
    records: list[dict] = field(default_factory=list)


def train_gan(coarse, target, categories, cfg: GanConfig, gen_spec: GenSpec | None = None,
              disc_spec: DiscSpec | None = None, max_steps: int | None = None):
    """Train one (G, D) pair on same-category ``(coarse, target)`` pairs.

    Runs ``cfg.epochs`` shuffled sweeps of minibatches (stopping early at
    ``max_steps`` if given). Returns ``(G, D, history)``.
    """
    cats = np.unique(np.asarray(categories))
    if cats.size != 1:
        raise ValueError(f"GAN training pairs must share one category, got {cats.tolist()}")
    c_all, t_all = images_to_nchw(coarse), images_to_nchw(target)
    _check_pair(c_all, t_all, "target")
    gen_spec = gen_spec or GenSpec(image_size=c_all.shape[2])
    disc_spec = disc_spec or DiscSpec()
    G, D = build_gan(gen_spec, disc_spec, cfg.seed)
    trainer = GanTrainer(G, D, cfg)
    order = torch.Generator().manual_seed(cfg.seed + 7)
    hist = GanHistory()
    n = c_all.shape[0]
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=order)
        for i in range(0, n, cfg.batch):
            if max_steps is not None and trainer.steps >= max_steps:
                break
            idx = perm[i:i + cfg.batch]
            hist.records.append(trainer.step(c_all[idx], t_all[idx]))
        rec = hist.records[-1] if hist.records else {}
        log.info("gan category %s epoch %d %s", int(cats[0]), epoch, rec)
    G.eval()
    D.eval()
    return G, D, hist


class GanRegistry(dict):
    """``category id -> (Generator, Discriminator)``; persisted as one directory per category."""

    def save(self, directory: str | Path, cfg: GanConfig | None = None) -> None:
        directory = Path(directory)
        for cat, (G, D) in sorted(self.items()):
            sub = directory / f"category_{cat}"
            checkpoint.save_module(sub / "G", G, {"spec": asdict(G.spec)})
            checkpoint.save_module(sub / "D", D, {"spec": asdict(D.spec)})
            if cfg is not None:
                doc = {"config": asdict(cfg), "objective": OBJECTIVE_READING}
                (sub / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "GanRegistry":
        reg = cls()
        directory = Path(directory)
        if not directory.exists():
            return reg
        for sub in sorted(directory.glob("category_*")):
            cat = int(sub.name.split("_", 1)[1])
            _, gmeta = checkpoint.load_tensors(sub / "G")
            _, dmeta = checkpoint.load_tensors(sub / "D")
            G, D = Generator(GenSpec(**gmeta["spec"])), Discriminator(DiscSpec(**dmeta["spec"]))
            checkpoint.load_module(sub / "G", G)
            checkpoint.load_module(sub / "D", D)
            G.eval()
            D.eval()
            reg[cat] = (G, D)
        return reg
