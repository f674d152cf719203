"""Run configuration: JSON with strict keys, one section per stage."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .ridge import DEFAULT_ALPHA


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    num_categories: int = 2
    samples_per_category: int = 30
    image_size: int = 32
    feature_dim: int = 64
    voxel_dim: int = 300
    voxel_noise: float = 0.5


@dataclass
class EncoderSection:
    input_size: int = 32
    conv: list = field(default_factory=lambda: [[8, 3, 2], [16, 3, 2]])
    steps: int = 300
    batch: int = 32
    lr: float = 1e-3


@dataclass
class DecoderSection:
    alpha: float = DEFAULT_ALPHA
    standardize: bool = True
    category_alpha: float = 1.0


@dataclass
class ReconSection:
    fc_shape: list = field(default_factory=lambda: [32, 4, 4])
    deconv_channels: list = field(default_factory=lambda: [32, 16])
    steps: int = 1500
    epochs: int | None = None  # overrides steps when set
    batch: int = 16
    lr: float = 0.01
    lr_decay: float = 0.95
    decay_every: int | None = 100
    noise_scale: float = 0.01
    loss: str = "mse"


@dataclass
class GanSection:
    image_size: int = 16
    base_channels: int = 16
    depth: int = 2
    disc_channels: list = field(default_factory=lambda: [16, 32])
    lambda_l1: float = 100.0
    theta_recon: float = 0.0
    lr: float = 0.001
    batch: int = 16
    epochs: int = 100
    mode: str = "minimax"
    noise: str = "channel"
    categories: list | None = None


@dataclass
class EvalSection:
    alphas: list = field(default_factory=lambda: [0.7, 10.0, 100.0, 1000.0, 10000.0])
    category_source: str = "voxel-classifier"
    fallback: bool = True
    grid_samples: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    synth: SynthSection = field(default_factory=SynthSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    recon: ReconSection = field(default_factory=ReconSection)
    gan: GanSection = field(default_factory=GanSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)



def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}" if where else key)
        else:
            kwargs[key] = _coerce(value, default, f"{where}.{key}" if where else key)
    return cls(**kwargs)


def _coerce(value, default, where: str):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list")
    return value


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def write_echo(cfg: RunConfig, path: str | Path, stage: str) -> None:
    doc = {"stage": stage, "config": cfg.to_dict()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
