"""Command-line entry point: ``neurodecode <stage> --config FILE --out DIR``.

Stages share one output directory::

    data/            images, manifest.json, per-record voxel and feature files
    forward_model/   simulated cortex (synthetic runs)
    encoder/ decoder/ decoder_category/ recon/ gan/
    reconstructions/ reconstructed PNGs and the comparison grid
    metrics/         one JSON file per stage
    config_echo/     the effective config of each stage run
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cgan import DiscSpec, GanConfig, GanRegistry, GenSpec, build_gan, gen_forward, train_gan
from .config import ConfigError, RunConfig, load_config, write_echo
from .encoder import (EncoderSpec, EncoderTrainConfig, build_encoder, encode_batch, fit_encoder, load_encoder,
                      load_split_images, save_encoder)
from .pipeline import PipelineBundle, evaluate_decoding, evaluate_reconstruction, load_arrays, reconstruct_from_voxels
from .recon import ReconSpec, ReconTrainConfig, load_recon, recon_forward, recon_loss, save_recon, train_recon
from .ridge import (LINEAR_BASELINE_ALPHA, RidgeModel, fit_category_classifier, fit_ridge, predict_categories,
                    predict_features, regression_metrics)
from .synth import SynthConfig, VoxelForwardModel, attach_arrays, gen_toy_dataset, make_forward_model, simulate_voxels
from .tensor_io import load_manifest, resize_bilinear, save_image

log = logging.getLogger("neurodecode")

STAGES = ("synth", "train-encoder", "fit-decoder", "train-recon", "train-gan", "reconstruct", "evaluate")
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neurodecode", description="Image reconstruction from fMRI voxel patterns.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="stage", metavar="STAGE", parser_class=_Parser)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--out", type=Path, required=True, help="run directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic numerics")
        if stage in ("fit-decoder",):
            p.add_argument("--alpha", type=float)
        if stage in ("train-recon", "train-gan"):
            p.add_argument("--epochs", type=int)
        if stage in ("train-encoder", "train-recon", "train-gan"):
            p.add_argument("--lr", type=float)
        if stage in ("train-gan",):
            p.add_argument("--category", type=int, action="append", help="train only this category (repeatable)")
    return parser


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if getattr(args, "alpha", None) is not None:
        if args.alpha < 0:
            raise ConfigError("--alpha must be non-negative")
        cfg.decoder.alpha = args.alpha
    if getattr(args, "epochs", None) is not None:
        if args.stage == "train-recon":
            cfg.recon.epochs = args.epochs
        else:
            cfg.gan.epochs = args.epochs
    if getattr(args, "lr", None) is not None:
        {"train-encoder": cfg.encoder, "train-recon": cfg.recon, "train-gan": cfg.gan}[args.stage].lr = args.lr
    if getattr(args, "category", None):
        cfg.gan.categories = args.category
    return cfg


def _setup_logging() -> None:
    level = os.environ.get("NEURODECODE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _encoder_spec(cfg: RunConfig) -> EncoderSpec:
    return EncoderSpec(cfg.encoder.input_size, tuple(tuple(c) for c in cfg.encoder.conv),
                       (cfg.synth.feature_dim, cfg.synth.num_categories))


def _synth_config(cfg: RunConfig) -> SynthConfig:
    s = cfg.synth
    return SynthConfig(s.num_categories, s.samples_per_category, s.image_size, s.feature_dim, s.voxel_dim,
                       s.voxel_noise, cfg.seed)


def _manifest(out: Path):
    path = out / "data" / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the synth stage or provide a manifest there")
    return load_manifest(path)


def _refresh_voxels(out: Path, manifest, encoder, cfg: RunConfig):
    """Extract features with ``encoder`` and simulate voxels from them for every record."""
    images, _ = load_split_images(manifest, None, encoder.spec.input_size)
    Z, _ = encode_batch(encoder, images)
    fm = VoxelForwardModel.load(out / "forward_model")
    X = simulate_voxels(Z, fm, seed=cfg.seed + 3)
    return attach_arrays(manifest, out / "data", voxels=X, features=Z)


# ------------------------------------------------------------------ stages


def stage_synth(cfg: RunConfig, out: Path) -> dict:
    scfg = _synth_config(cfg)
    manifest = gen_toy_dataset(scfg, out / "data")
    make_forward_model(scfg).save(out / "forward_model")
    encoder = build_encoder(_encoder_spec(cfg), cfg.seed)
    save_encoder(encoder, out / "encoder")
    manifest = _refresh_voxels(out, manifest, encoder, cfg)
    return {"n_records": len(manifest), "n_train": len(manifest.split("train")),
            "n_test": len(manifest.split("test")), "num_categories": scfg.num_categories}


def stage_train_encoder(cfg: RunConfig, out: Path) -> dict:
    manifest = _manifest(out)
    spec = _encoder_spec(cfg)
    tcfg = EncoderTrainConfig(cfg.encoder.steps, cfg.encoder.batch, cfg.encoder.lr, cfg.seed)
    images, labels = load_split_images(manifest, "train", spec.input_size)
    model, hist = fit_encoder(images, labels, spec, tcfg)
    save_encoder(model, out / "encoder")
    metrics = {"final_loss": hist.loss[-1] if hist.loss else None}
    for split in ("train", "test"):
        imgs, y = load_split_images(manifest, split, spec.input_size)
        if len(y):
            _, logits = encode_batch(model, imgs)
            metrics[f"{split}_accuracy"] = float((logits.argmax(1) == y).mean())
    if (out / "forward_model").exists():
        _refresh_voxels(out, manifest, model, cfg)
        metrics["voxels_refreshed"] = True
    return metrics


def stage_fit_decoder(cfg: RunConfig, out: Path) -> dict:
    manifest = _manifest(out)
    X_tr, Z_tr, y_tr, _ = load_arrays(manifest, "train")
    X_te, Z_te, y_te, _ = load_arrays(manifest, "test")
    d = cfg.decoder
    model = fit_ridge(X_tr, Z_tr, d.alpha, standardize=d.standardize)
    model.save(out / "decoder")
    baseline = fit_ridge(X_tr, Z_tr, LINEAR_BASELINE_ALPHA, standardize=d.standardize)
    k = manifest.num_categories or int(max(y_tr.max(), y_te.max())) + 1
    clf = fit_category_classifier(X_tr, y_tr, k, d.category_alpha)
    clf.save(out / "decoder_category", {"num_categories": k})
    metrics = {"alpha": d.alpha, "solver": model.solver}
    if len(y_te) >= 2:
        metrics["ridge"] = regression_metrics(Z_te, predict_features(model, X_te)).to_dict()
        metrics["linear"] = regression_metrics(Z_te, predict_features(baseline, X_te)).to_dict()
        metrics["category_accuracy"] = float((predict_categories(clf, X_te) == y_te).mean())
    return metrics


def _recon_spec(cfg: RunConfig) -> ReconSpec:
    return ReconSpec(cfg.synth.feature_dim, tuple(cfg.recon.fc_shape), tuple(cfg.recon.deconv_channels))


def _resized(images: np.ndarray, size) -> np.ndarray:
    return np.stack([resize_bilinear(im, size[0], size[1]) for im in images])


def stage_train_recon(cfg: RunConfig, out: Path) -> dict:
    manifest = _manifest(out)
    spec = _recon_spec(cfg)
    _, Z_tr, _, _ = load_arrays(manifest, "train")
    imgs, _ = load_split_images(manifest, "train", cfg.synth.image_size)
    targets = _resized(imgs, spec.output_size)
    r = cfg.recon
    steps = r.steps
    if r.epochs is not None:
        steps = r.epochs * math.ceil(len(Z_tr) / min(r.batch, len(Z_tr)))
    tcfg = ReconTrainConfig(steps, r.batch, r.lr, r.lr_decay, r.decay_every, r.noise_scale, r.loss, cfg.seed)
    model, hist = train_recon(Z_tr, targets, spec, tcfg)
    save_recon(model, out / "recon", step=steps)
    metrics = {"steps": steps, "final_loss": hist.loss[-1] if hist.loss else None,
               "train_mse": recon_loss(model, Z_tr, targets)}
    _, Z_te, _, _ = load_arrays(manifest, "test")
    if len(Z_te):
        te_imgs, _ = load_split_images(manifest, "test", cfg.synth.image_size)
        metrics["test_mse_true_features"] = recon_loss(model, Z_te, _resized(te_imgs, spec.output_size))
    return metrics


def stage_train_gan(cfg: RunConfig, out: Path) -> dict:
    manifest = _manifest(out)
    recon = load_recon(out / "recon")
    gs = cfg.gan
    size = (gs.image_size, gs.image_size)
    _, Z_tr, y_tr, _ = load_arrays(manifest, "train")
    imgs, _ = load_split_images(manifest, "train", cfg.synth.image_size)
    coarse = _resized(recon_forward(recon, Z_tr), size)
    target = _resized(imgs, size)
    cats = gs.categories if gs.categories is not None else sorted(set(y_tr.tolist()))
    registry = GanRegistry.load(out / "gan")
    gcfg = GanConfig(gs.lambda_l1, gs.theta_recon, gs.lr, gs.batch, gs.epochs, gs.mode, gs.noise, cfg.seed)
    gen_spec = GenSpec(gs.image_size, gs.base_channels, gs.depth)
    disc_spec = DiscSpec(tuple(gs.disc_channels))
    metrics = {}
    for cat in cats:
        sel = y_tr == cat
        if not sel.any():
            raise ValueError(f"no training samples for category {cat}")
        G, D, hist = train_gan(coarse[sel], target[sel], y_tr[sel], gcfg, gen_spec, disc_spec)
        registry[int(cat)] = (G, D)
        G0, _ = build_gan(gen_spec, disc_spec, cfg.seed)
        noise = torch.randn((int(sel.sum()), *size, 1), generator=torch.Generator().manual_seed(cfg.seed)).numpy()
        l1_init = float(np.abs(gen_forward(G0, coarse[sel], noise) - target[sel]).mean())
        l1_final = float(np.abs(gen_forward(G, coarse[sel], noise) - target[sel]).mean())
        metrics[str(cat)] = {"steps": len(hist.records), "l1_init": l1_init, "l1_final": l1_final,
                             "last": hist.records[-1] if hist.records else None}
    registry.save(out / "gan", gcfg)
    return metrics


def _bundle(cfg: RunConfig, out: Path) -> PipelineBundle:
    ridge = RidgeModel.load(out / "decoder")
    clf = RidgeModel.load(out / "decoder_category") if (out / "decoder_category").exists() else None
    return PipelineBundle(ridge, load_recon(out / "recon"), GanRegistry.load(out / "gan"),
                          cfg.eval.category_source, clf, cfg.gan.image_size, cfg.eval.fallback)


def _reconstruct_test(cfg: RunConfig, out: Path, grid_name: str) -> tuple[dict, object]:
    manifest = _manifest(out)
    bundle = _bundle(cfg, out)
    X_te, _, y_te, idx = load_arrays(manifest, "test")
    cats = y_te if cfg.eval.category_source == "given" else None
    rec = reconstruct_from_voxels(bundle, X_te, cats, seed=cfg.seed)
    originals, _ = load_split_images(manifest, "test", bundle.output_size)
    rec_dir = out / "reconstructions"
    rec_dir.mkdir(parents=True, exist_ok=True)
    for i, img in zip(idx, rec.refined):
        save_image(img, rec_dir / f"{i:06d}.png")
    k = min(cfg.eval.grid_samples, len(originals))
    grid_rel = f"reconstructions/{grid_name}"
    report = evaluate_reconstruction(list(originals[:k]), rec.refined[:k], out / grid_rel, rec.coarse[:k])
    full = evaluate_reconstruction(list(originals), rec.refined)
    coarse_eval = evaluate_reconstruction(list(originals), rec.coarse)
    doc = {
        "images": full.images,
        "mean_l1": full.notes.get("mean_l1"),
        "mean_mse": full.notes.get("mean_mse"),
        "coarse_mean_mse": coarse_eval.notes.get("mean_mse"),
        "category_accuracy": float(np.mean(np.array(rec.categories) == y_te)) if len(y_te) else None,
        "fell_back": [int(idx[i]) for i in rec.fell_back],
        "grid": grid_rel,
    }
    return doc, report


def stage_reconstruct(cfg: RunConfig, out: Path) -> dict:
    doc, _ = _reconstruct_test(cfg, out, "grid.png")
    return doc


def stage_evaluate(cfg: RunConfig, out: Path) -> dict:
    manifest = _manifest(out)
    dec = evaluate_decoding(manifest, None, cfg.eval.alphas, standardize=cfg.decoder.standardize)
    doc = {"decoding": dec.decoding, "split": dec.notes}
    if (out / "recon").exists() and (out / "decoder").exists():
        rec_doc, _ = _reconstruct_test(cfg, out, "eval_grid.png")
        doc["reconstruction"] = rec_doc
    return doc


HANDLERS = {
    "synth": stage_synth,
    "train-encoder": stage_train_encoder,
    "fit-decoder": stage_fit_decoder,
    "train-recon": stage_train_recon,
    "train-gan": stage_train_gan,
    "reconstruct": stage_reconstruct,
    "evaluate": stage_evaluate,
}


def run_cli(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.stage is None:
            raise UsageError(parser.format_help())
        cfg = apply_overrides(load_config(args.config), args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (ConfigError, OSError) as exc:
        print(f"neurodecode: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out: Path = args.out
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_echo(cfg, out / "config_echo" / f"{args.stage}.json", args.stage)
        metrics = HANDLERS[args.stage](cfg, out)
        _write_json(out / "metrics" / f"{args.stage}.json", metrics)
    except Exception as exc:  # noqa: BLE001 - every stage failure maps to exit 2
        log.debug("stage failed", exc_info=True)
        print(f"neurodecode {args.stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
