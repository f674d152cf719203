"""Directory checkpoints: one DCTF file per named tensor plus ``index.json``."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .tensor_io import read_tensor, write_tensor

INDEX = "index.json"


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value, dtype=np.float32)
    # DCTF has no rank-0 tensors
    return arr.reshape(1) if arr.ndim == 0 else arr


def save_tensors(directory: str | Path, tensors: Mapping[str, object], meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, value in tensors.items():
        arr = _as_array(value)
        fname = name.replace("/", "_") + ".dctf"
        write_tensor(arr, directory / fname)
        shape = list(value.shape) if hasattr(value, "shape") else list(arr.shape)
        index[name] = {"file": fname, "shape": shape}
    doc = {"tensors": index, "meta": meta or {}}
    (directory / INDEX).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return directory


def load_tensors(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    doc = json.loads((directory / INDEX).read_text())
    out = {}
    for name, entry in doc["tensors"].items():
        arr = read_tensor(directory / entry["file"])
        out[name] = arr.reshape(entry["shape"])
    return out, doc.get("meta", {})


def save_module(directory: str | Path, module: torch.nn.Module, meta: dict | None = None,
                optimizer: torch.optim.Optimizer | None = None) -> Path:
    tensors: dict[str, object] = dict(module.state_dict())
    meta = dict(meta or {})
    if optimizer is not None:
        names = {id(p): n for n, p in module.named_parameters()}
        steps = {}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                n = names[id(p)]
                tensors[f"adam.{n}.exp_avg"] = state["exp_avg"]
                tensors[f"adam.{n}.exp_avg_sq"] = state["exp_avg_sq"]
                steps[n] = int(state["step"])
        meta["adam_steps"] = steps
        meta["lr"] = optimizer.param_groups[0]["lr"]
    return save_tensors(directory, tensors, meta)


def load_module(directory: str | Path, module: torch.nn.Module,
                optimizer: torch.optim.Optimizer | None = None) -> dict:
    tensors, meta = load_tensors(directory)
    state = {k: torch.from_numpy(v.copy()) for k, v in tensors.items() if not k.startswith("adam.")}
    module.load_state_dict(state)
    if optimizer is not None and "adam_steps" in meta:
        params = dict(module.named_parameters())
        for n, step in meta["adam_steps"].items():
            optimizer.state[params[n]] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(tensors[f"adam.{n}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"adam.{n}.exp_avg_sq"].copy()),
            }
        for group in optimizer.param_groups:
            group["lr"] = meta["lr"]
    return meta
