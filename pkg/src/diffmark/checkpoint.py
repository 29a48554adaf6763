"""Checkpoint container: directory with a JSON manifest plus raw arrays.

Every trainable component persists through this one format so tooling can
inspect any checkpoint uniformly. Arrays are written as little-endian
float32, one file per named parameter; integer buffers (e.g. BatchNorm step
counters) are cast through float32 and restored to their original dtype,
which is exact for the small counts they hold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MANIFEST_NAME = "manifest.json"


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: dict  # name -> np.ndarray (original dtype restored)
    manifest: dict

    def state_dict(self) -> dict:
        return {name: torch.from_numpy(arr.copy()) for name, arr in self.params.items()}


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(
    directory,
    kind: str,
    params: dict,
    config: dict,
    *,
    schedule: dict | None = None,
    cfg_convention: str | None = None,
    seeds: dict | None = None,
    extra: dict | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, value in params.items():
        arr = _to_numpy(value)
        fname = f"{name}.f32"
        arr.astype("<f4").tofile(directory / fname)
        entries[name] = {
            "file": fname,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
        }
    manifest = {
        "kind": kind,
        "config": config,
        "schedule": schedule,
        "cfg_convention": cfg_convention,
        "seeds": seeds or {},
        "extra": extra or {},
        "params": entries,
    }
    with open(directory / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    params = {}
    for name, entry in manifest["params"].items():
        raw = np.fromfile(directory / entry["file"], dtype="<f4")
        arr = raw.reshape(entry["shape"]).astype(entry["dtype"])
        params[name] = arr
    return Checkpoint(
        kind=manifest["kind"],
        config=manifest["config"],
        params=params,
        manifest=manifest,
    )


def module_params(module: torch.nn.Module) -> dict:
    return {name: tensor for name, tensor in module.state_dict().items()}


def load_into_module(module: torch.nn.Module, ckpt: Checkpoint) -> None:
    state = {}
    for name, arr in ckpt.params.items():
        ref = module.state_dict()[name]
        state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    module.load_state_dict(state)
