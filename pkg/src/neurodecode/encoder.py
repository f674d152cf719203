"""Image encoder: a small ConvNet whose first fully-connected layer is the feature tap.

A trained VGG-19 is the intended encoder at full scale. Its fc7 activations
can be brought in with :func:`import_features` instead of running
:func:`encode`.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from ._nn import TrainingDivergedError, images_to_nchw, init_fan_in_uniform, make_adam
from .tensor_io import DatasetManifest, load_image, read_tensor, resize_bilinear

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderSpec:
    input_size: int = 32
    conv: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (16, 3, 2))  # (channels, kernel, stride)
    fc: tuple[int, ...] = (64, 2)  # first width is the feature dim, last is the category count

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(tuple(c) for c in self.conv))
        object.__setattr__(self, "fc", tuple(self.fc))
        if len(self.fc) < 2:
            raise ValueError("fc widths must end in [F, K]")

    @property
    def feature_dim(self) -> int:
        return self.fc[0]

    @property
    def num_categories(self) -> int:
        return self.fc[-1]

    def conv_output(self) -> tuple[int, int]:
        s, c = self.input_size, 3
        for ch, k, stride in self.conv:
            s = (s + 2 * (k // 2) - k) // stride + 1
            c = ch
        return c, s

    @classmethod
    def desk(cls, num_categories: int = 2, feature_dim: int = 64) -> "EncoderSpec":
        return cls(32, ((8, 3, 2), (16, 3, 2)), (feature_dim, num_categories))

    @classmethod
    def full_scale(cls) -> "EncoderSpec":
        """VGG-shaped geometry: 224x224 input, 7x7x512 conv output, fc widths 4096/4096/1000."""
        conv = ((64, 3, 2), (128, 3, 2), (256, 3, 2), (512, 3, 2), (512, 3, 2))
        return cls(224, conv, (4096, 4096, 1000))

    def to_dict(self) -> dict:
        return asdict(self)


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        layers, c_in = [], 3
        for ch, k, stride in spec.conv:
            layers += [nn.Conv2d(c_in, ch, k, stride, k // 2), nn.ReLU()]
            c_in = ch
        self.features = nn.Sequential(*layers)
        c, s = spec.conv_output()
        self.tap = nn.Linear(c * s * s, spec.fc[0])
        head = []
        widths = spec.fc
        for i in range(1, len(widths)):
            head.append(nn.Linear(widths[i - 1], widths[i]))
            if i < len(widths) - 1:
                head.append(nn.ReLU())
        self.head = nn.Sequential(*head)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.features(x).flatten(1)
        z = F.relu(self.tap(h))
        return z, self.head(z)


def build_encoder(spec: EncoderSpec, seed: int = 0) -> Encoder:
    model = Encoder(spec)
    init_fan_in_uniform(model, seed)
    return model


def _check_input(model: Encoder, x: torch.Tensor) -> None:
    s = model.spec.input_size
    if x.shape[1:] != (3, s, s):
        raise ValueError(f"encoder expects {s}x{s}x3 images, got {tuple(x.shape[2:])}x{x.shape[1]}")


@torch.no_grad()
def encode(model: Encoder, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Feature vector ``z`` ``[F]`` and category logits ``[K]`` of one ``[H, W, 3]`` image."""
    z, logits = encode_batch(model, np.asarray(img)[None])
    return z[0], logits[0]


@torch.no_grad()
def encode_batch(model: Encoder, images: np.ndarray, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    x = images_to_nchw(images)
    _check_input(model, x)
    model.eval()
    zs, ls = [], []
    for i in range(0, x.shape[0], batch):
        z, logits = model(x[i:i + batch])
        zs.append(z)
        ls.append(logits)
    return torch.cat(zs).numpy(), torch.cat(ls).numpy()


@dataclass
class EncoderTrainConfig:
    steps: int = 500
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def fit_encoder(images: np.ndarray, labels, spec: EncoderSpec, cfg: EncoderTrainConfig,
                model: Encoder | None = None) -> tuple[Encoder, TrainHistory]:
    """Softmax cross-entropy training on in-memory ``[N, H, W, 3]`` images."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(torch.unique(labels)) < 2:
        raise ValueError("encoder training needs at least 2 categories")
    if int(labels.max()) >= spec.num_categories:
        raise ValueError(f"label {int(labels.max())} out of range for K={spec.num_categories}")
    x = images_to_nchw(images)
    model = model or build_encoder(spec, cfg.seed)
    _check_input(model, x)
    model.train()
    opt = make_adam(model.parameters(), cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    n = x.shape[0]
    hist = TrainHistory()
    perm, pos = torch.randperm(n, generator=g), 0
    for step in range(cfg.steps):
        if pos >= n:
            perm, pos = torch.randperm(n, generator=g), 0
        idx = perm[pos:pos + cfg.batch]
        pos += cfg.batch
        _, logits = model(x[idx])
        loss = F.cross_entropy(logits, labels[idx])
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"encoder loss became {loss.item()} at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        hist.loss.append(loss.item())
        hist.accuracy.append((logits.argmax(1) == labels[idx]).float().mean().item())
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("encoder step %d loss %.4f acc %.3f", step, hist.loss[-1], hist.accuracy[-1])
    model.eval()
    return model, hist


def load_split_images(manifest: DatasetManifest, split: str | None, size: int) -> tuple[np.ndarray, np.ndarray]:
    records = manifest.records if split is None else manifest.split(split)
    imgs = []
    for r in records:
        img = load_image(manifest.resolve(r.image_path))
        if img.shape[:2] != (size, size):
            img = resize_bilinear(img, size, size)
        imgs.append(img)
    labels = np.array([r.category_id for r in records], dtype=np.int64)
    if not imgs:
        return np.zeros((0, size, size, 3), np.float32), labels
    return np.stack(imgs), labels


def train_encoder(manifest: DatasetManifest, spec: EncoderSpec, cfg: EncoderTrainConfig) -> tuple[Encoder, TrainHistory]:
    images, labels = load_split_images(manifest, "train", spec.input_size)
    if len(set(labels.tolist())) < 2:
        raise ValueError("manifest needs train samples from at least 2 categories")
    return fit_encoder(images, labels, spec, cfg)


def save_encoder(model: Encoder, directory: str | Path) -> None:
    checkpoint.save_module(directory, model, {"spec": model.spec.to_dict()})


def load_encoder(directory: str | Path) -> Encoder:
    _, meta = checkpoint.load_tensors(directory)
    model = Encoder(EncoderSpec(**meta["spec"]))
    checkpoint.load_module(directory, model)
    model.eval()
    return model


def import_features(path: str | Path, manifest: DatasetManifest) -> np.ndarray:
    """Precomputed features ``[N, F]`` aligned to manifest records by order."""
    Z = read_tensor(path)
    if Z.ndim != 2 or Z.shape[0] != len(manifest):
        raise ValueError(f"feature file has shape {Z.shape}, manifest has {len(manifest)} records")
    return Z
