"""Toy shape datasets and a linear-Gaussian voxel forward model.

The forward model plays the part of visual cortex: voxel responses are an
affine function of image features plus Gaussian noise, so the best
possible linear decoder is known in advance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .tensor_io import DatasetManifest, SampleRecord, save_image, save_manifest, write_tensor

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "hbar", "vbar")

# fixed per category, cycled when K exceeds the table
PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.75, 0.30),
    (0.25, 0.35, 0.95),
    (0.95, 0.85, 0.20),
    (0.80, 0.30, 0.85),
    (0.20, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.85, 0.85, 0.85),
)
BACKGROUND = 0.08


@dataclass(frozen=True)
class SynthConfig:
    num_categories: int = 2
    samples_per_category: int = 10
    image_size: int = 32
    feature_dim: int = 64
    voxel_dim: int = 300
    voxel_noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_categories < 2:
            raise ValueError(f"need at least 2 categories, got {self.num_categories}")
        for name in ("samples_per_category", "image_size", "feature_dim", "voxel_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.voxel_noise < 0:
            raise ValueError("voxel_noise must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class VoxelForwardModel:
    """Maps features ``[N, F]`` to voxels ``[N, V]``: ``Z @ M.T + b0 + noise * eps``."""

    M: np.ndarray  # [V, F]
    b0: np.ndarray  # [V]
    noise: float

    @property
    def voxel_dim(self) -> int:
        return self.M.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.M.shape[1]

    def save(self, directory) -> None:
        save_tensors(directory, {"M": self.M, "b0": self.b0}, {"noise": self.noise})

    @classmethod
    def load(cls, directory) -> "VoxelForwardModel":
        t, meta = load_tensors(directory)
        return cls(t["M"], t["b0"], float(meta["noise"]))


def make_forward_model(cfg: SynthConfig) -> VoxelForwardModel:
    rng = np.random.default_rng([cfg.seed, 1])
    F, V = cfg.feature_dim, cfg.voxel_dim
    M = rng.standard_normal((V, F)) / np.sqrt(F)
    b0 = rng.uniform(-0.1, 0.1, size=V)
    return VoxelForwardModel(M.astype(np.float32), b0.astype(np.float32), cfg.voxel_noise)


def simulate_voxels(Z: np.ndarray, model: VoxelForwardModel, seed: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != model.feature_dim:
        raise ValueError(f"features have shape {Z.shape}, model expects [N, {model.feature_dim}]")
    X = Z @ model.M.astype(np.float64).T + model.b0.astype(np.float64)
    if model.noise > 0:
        eps = np.random.default_rng(seed).standard_normal(X.shape)
        X = X + model.noise * eps
    return X.astype(np.float32)


# ------------------------------------------------------------------ images


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        # apex up; base at cy + r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.4) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.4) & (np.abs(dy) <= r)
    raise ValueError(f"unknown shape {kind}")


def render_sample(category: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``[size, size, 3]`` image of the category's shape with jitter."""
    kind = SHAPES[category % len(SHAPES)]
    color = np.array(PALETTE[category % len(PALETTE)], dtype=np.float32)
    r = size * rng.uniform(0.22, 0.34)
    margin = r + 0.5
    cy = rng.uniform(margin, size - margin) if size > 2 * margin else size / 2
    cx = rng.uniform(margin, size - margin) if size > 2 * margin else size / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = _shape_mask(kind, yy, xx, cy, cx, r)
    img = np.full((size, size, 3), BACKGROUND, dtype=np.float32)
    img[mask] = color
    return img


def gen_toy_dataset(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write ``K * samples_per_category`` PNGs and ``manifest.json`` under ``out_dir``.

    The first 80% (rounded) of each category's samples are train, the rest
    test. Sample ``i`` of category ``k`` draws from an RNG seeded with
    ``(seed, k, i)``, so the output does not depend on generation order.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {img_dir}: {exc}") from exc
    n = cfg.samples_per_category
    n_train = int(round(0.8 * n))
    records = []
    for k in range(cfg.num_categories):
        for i in range(n):
            rng = np.random.default_rng([cfg.seed, 2, k, i])
            img = render_sample(k, cfg.image_size, rng)
            rel = f"images/cat{k:03d}_{i:05d}.png"
            save_image(img, out_dir / rel)
            records.append(SampleRecord(rel, k, None, None, "train" if i < n_train else "test"))
    manifest = DatasetManifest(records, cfg.num_categories, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def attach_arrays(manifest: DatasetManifest, out_dir: str | Path, voxels: np.ndarray | None = None,
                  features: np.ndarray | None = None) -> DatasetManifest:
    """Write one DCTF file per record for voxels and/or features and return the updated manifest."""
    out_dir = Path(out_dir)
    records = []
    for i, r in enumerate(manifest.records):
        vox, feat = r.voxel_path, r.feature_path
        if voxels is not None:
            (out_dir / "voxels").mkdir(parents=True, exist_ok=True)
            vox = f"voxels/{i:06d}.dctf"
            write_tensor(voxels[i], out_dir / vox)
        if features is not None:
            (out_dir / "features").mkdir(parents=True, exist_ok=True)
            feat = f"features/{i:06d}.dctf"
            write_tensor(features[i], out_dir / feat)
        records.append(SampleRecord(r.image_path, r.category_id, vox, feat, r.split))
    updated = DatasetManifest(records, manifest.num_categories, out_dir)
    save_manifest(updated, out_dir / "manifest.json")
    return updated


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
