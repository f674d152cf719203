"""Voxels -> features -> coarse image -> refined image, and the evaluation protocols."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cgan import GanRegistry, gen_forward
from .recon import ReconNet, recon_forward
from .ridge import (LINEAR_BASELINE_ALPHA, RidgeModel, fit_ridge, predict_categories, predict_features,
                    regression_metrics)
from .tensor_io import DatasetManifest, ManifestError, read_tensor, resize_bilinear, save_image

log = logging.getLogger(__name__)

GUTTER = 2


class UnknownCategoryError(KeyError):
    pass


@dataclass
class PipelineBundle:
    ridge: RidgeModel
    recon: ReconNet
    gan_registry: GanRegistry = field(default_factory=GanRegistry)
    category_source: str = "voxel-classifier"  # or "given"
    category_model: RidgeModel | None = None
    gan_size: int | None = None
    fallback: bool = True

    def __post_init__(self):
        if self.ridge.feature_dim != self.recon.spec.feature_dim:
            raise ValueError(f"ridge decodes {self.ridge.feature_dim} features, "
                             f"recon net expects {self.recon.spec.feature_dim}")
        if self.category_source not in ("given", "voxel-classifier"):
            raise ValueError(f"unknown category source {self.category_source!r}")

    @property
    def output_size(self) -> int:
        if self.gan_size is not None:
            return self.gan_size
        for G, _ in self.gan_registry.values():
            return G.spec.image_size
        return self.recon.spec.output_size[0]


@dataclass
class Reconstruction:
    refined: list[np.ndarray]
    coarse: list[np.ndarray]
    features: np.ndarray
    categories: list[int]
    fell_back: list[int]  # sample indices whose category had no GAN


def reconstruct_from_voxels(bundle: PipelineBundle, X, categories=None, seed: int = 0) -> Reconstruction:
    """Decode features, render coarse images, refine each with its category's generator.

    Coarse outputs are resized to the GAN input size. Samples whose category
    has no trained generator keep the resized coarse image when
    ``bundle.fallback`` is on, otherwise :class:`UnknownCategoryError` is raised.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != bundle.ridge.voxel_dim:
        raise ValueError(f"voxels have shape {X.shape}, decoder expects [N, {bundle.ridge.voxel_dim}]")
    n = X.shape[0]
    if bundle.category_source == "given" or categories is not None:
        if categories is None:
            raise ValueError("category_source is 'given' but no categories were supplied")
        cats = [int(c) for c in categories]
        if len(cats) != n:
            raise ValueError("one category per sample is required")
    elif bundle.category_model is not None:
        cats = predict_categories(bundle.category_model, X).tolist()
    else:
        raise ValueError("no category classifier in the bundle")

    return reconstruct_from_features(bundle, predict_features(bundle.ridge, X), cats, seed)


def reconstruct_from_features(bundle: PipelineBundle, Z, categories, seed: int = 0) -> Reconstruction:
    """The image half of the pipeline, for already decoded (or substituted) features."""
    z_hat = np.asarray(Z, dtype=np.float32)
    cats = [int(c) for c in categories]
    size = bundle.output_size
    coarse = [resize_bilinear(img, size, size) for img in recon_forward(bundle.recon, z_hat)]
    g = torch.Generator().manual_seed(seed)
    refined, fell_back = [], []
    for i, (img, cat) in enumerate(zip(coarse, cats)):
        # noise is drawn for every sample so outputs do not depend on which categories have GANs
        w = torch.randn((size, size, 1), generator=g).numpy()
        if cat in bundle.gan_registry:
            G, _ = bundle.gan_registry[cat]
            refined.append(gen_forward(G, img, w))
        elif bundle.fallback:
            refined.append(img)
            fell_back.append(i)
        else:
            raise UnknownCategoryError(f"no GAN for category {cat} and fallback is disabled")
    if fell_back:
        log.info("%d of %d samples fell back to the coarse image", len(fell_back), len(cats))
    return Reconstruction(refined, coarse, z_hat, cats, fell_back)


# ----------------------------------------------------------------- reports


@dataclass
class EvalReport:
    decoding: dict[str, dict] = field(default_factory=dict)
    images: list[dict] = field(default_factory=list)
    grids: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"decoding": self.decoding, "images": self.images, "grids": self.grids, "notes": self.notes}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def check_finite(self) -> None:
        for row in list(self.decoding.values()) + self.images:
            for k, v in row.items():
                if isinstance(v, float) and not np.isfinite(v):
                    raise ValueError(f"non-finite metric {k}={v}")


def load_arrays(manifest: DatasetManifest, split: str, features: np.ndarray | None = None):
    """Voxel matrix, feature matrix and labels for one split, in manifest order."""
    idx = manifest.indices(split)
    recs = [manifest.records[i] for i in idx]
    missing = [r.image_path for r in recs if r.voxel_path is None or (features is None and r.feature_path is None)]
    if missing:
        raise ManifestError(f"{len(missing)} {split} records lack voxel/feature files, e.g. {missing[0]}")
    X = np.stack([read_tensor(manifest.resolve(r.voxel_path)).reshape(-1) for r in recs])
    if features is None:
        Z = np.stack([read_tensor(manifest.resolve(r.feature_path)).reshape(-1) for r in recs])
    else:
        Z = np.asarray(features)[idx]
    y = np.array([r.category_id for r in recs])
    return X, Z, y, idx


def evaluate_decoding(manifest: DatasetManifest, features: np.ndarray | None, alphas,
                      baseline_alpha: float = LINEAR_BASELINE_ALPHA, standardize: bool = True) -> EvalReport:
    """Fit on the train split for each alpha and a near-zero-alpha linear baseline; score on test."""
    X_tr, Z_tr, _, tr_idx = load_arrays(manifest, "train", features)
    X_te, Z_te, _, te_idx = load_arrays(manifest, "test", features)
    if set(tr_idx) & set(te_idx):
        raise AssertionError("train and test index sets overlap")
    report = EvalReport()
    methods = [("linear", baseline_alpha)] + [(f"ridge_alpha={a:g}", float(a)) for a in alphas]
    for name, a in methods:
        model = fit_ridge(X_tr, Z_tr, a, standardize=standardize)
        m = regression_metrics(Z_te, predict_features(model, X_te))
        report.decoding[name] = {"alpha": a, "r_squared": m.r_squared, "rmse": m.rmse,
                                 "excluded_dims": len(m.excluded_dims)}
    report.notes = {"n_train": len(tr_idx), "n_test": len(te_idx)}
    report.check_finite()
    return report


def make_grid(rows: list[list[np.ndarray]], gutter: int = GUTTER, fill: float = 1.0) -> np.ndarray:
    """Tile equally sized ``[H, W, 3]`` images; ``gutter`` pixels separate neighbouring cells."""
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    h, w = rows[0][0].shape[:2]
    grid = np.full((n_rows * h + (n_rows - 1) * gutter, n_cols * w + (n_cols - 1) * gutter, 3),
                   fill, dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = i * (h + gutter), j * (w + gutter)
            grid[y:y + h, x:x + w] = img
    return grid


def evaluate_reconstruction(originals, reconstructions, grid_path=None, coarse=None) -> EvalReport:
    """Per-image L1 and MSE against the originals; optional comparison grid.

    Reconstructions are resized to the original size before scoring. The
    grid has one column per sample and rows original / coarse / refined
    (coarse omitted when not given).
    """
    if len(originals) != len(reconstructions):
        raise ValueError(f"{len(originals)} originals vs {len(reconstructions)} reconstructions")
    if coarse is not None and len(coarse) != len(originals):
        raise ValueError("coarse list length differs from originals")
    report = EvalReport()
    fitted = []
    for k, (orig, rec) in enumerate(zip(originals, reconstructions)):
        orig = np.asarray(orig, dtype=np.float32)
        h, w = orig.shape[:2]
        rec = resize_bilinear(rec, h, w)
        fitted.append(rec)
        diff = orig.astype(np.float64) - rec.astype(np.float64)
        report.images.append({"index": k, "l1": float(np.abs(diff).mean()), "mse": float((diff**2).mean())})
    if report.images:
        report.notes = {
            "mean_l1": float(np.mean([r["l1"] for r in report.images])),
            "mean_mse": float(np.mean([r["mse"] for r in report.images])),
        }
    if grid_path is not None and originals:
        h, w = np.asarray(originals[0]).shape[:2]
        rows = [[np.asarray(o, dtype=np.float32) for o in originals]]
        if coarse is not None:
            rows.append([resize_bilinear(c, h, w) for c in coarse])
        rows.append(fitted)
        save_image(make_grid(rows), grid_path)
        report.grids.append(str(grid_path))
    report.check_finite()
    return report
