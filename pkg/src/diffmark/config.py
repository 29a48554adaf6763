"""Experiment configuration: defaults, validation, overrides, hashing.

One JSON document drives every stage. The toy profile below is the default;
`fullscale_config()` carries the reference hyperparameters of the original
operating point (kept for completeness, not an execution target at desk
scale). Unknown keys or mistyped values fail loudly at load time.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from .errors import ConfigError
from .train import CurriculumConfig, WatermarkTrainConfig
from .util import stable_hash


def default_config() -> dict:
    return {
        "seed": 0,
        "out_dir": "runs/toy",
        "data": {"n_images": 512, "size": 32, "source_folder": None},
        "vae": {
            "steps": 1500,
            "batch_size": 32,
            "lr": 1e-3,
            "kl_weight": 1e-4,
            "width": 24,
            "identity_mode": False,
            "psnr_floor": 17.0,
            "latent_channels": 4,
            "latent_size": 8,
        },
        "diffusion": {
            "timesteps": 1000,
            "beta_start": 1e-4,
            "beta_end": 0.02,
            "train_steps": 2500,
            "batch_size": 32,
            "lr": 2e-3,
            "p_uncond": 0.1,
            "val_mse_threshold": 0.95,
            "base_width": 32,
        },
        "lcm": {
            "skipping_step": 20,
            "omega_min": 2.0,
            "omega_max": 2.0,
            "distance_metric": "l2",
            "steps": 2500,
            "batch_size": 16,
            "lr": 1e-3,
            "ema_rate": 0.95,
        },
        "codec": {
            "secret_length": 16,
            "embed_dim": 64,
            "max_steps": 50000,
            "batch_size": 64,
            "lr_encoder": 3e-4,
            "lr_decoder": 1e-4,
            "sigma_start": 0.0,
            "sigma_end": 0.3,
            "w_clean": 1.0,
            "w_noisy": 1.0,
            "w_orth": 0.1,
        },
        "train": {
            "steps": 4000,
            "batch_size": 8,
            "ddim_steps": 10,
            "lcm_steps": 4,
            "guidance_scale": 2.0,
            "omega": 2.0,
            "lr_encoder": 5e-5,
            "lr_decoder": 3e-4,
            "lr_warmup": 200,
            "lr_floor": 1e-6,
            "clip_encoder": 5.0,
            "clip_decoder": 1.0,
            "ddim_injection": "one_over_N",
            "freq_radius": 2.0,
            "prvl_kernel": 32,
            "log_every": 25,
            "checkpoint_every": 2000,
            "curriculum": {
                "tau_rec": 0,
                "tau_imp": 500,
                "sigma_start": 0.10,
                "sigma_end": 0.05,
                "anneal_horizon": 2000,
                "beta_start": 0.001,
                "beta_end": 0.05,
                "beta_warmup": 400,
                "w_lcm": 1.0,
                "w_ddim": 1.0,
                "w_mag": 5.0,
                "w_orth": 0.1,
                "w_prvl": 1.5,
                "w_lafid": 0.1,
                "w_freq": 0.5,
                "w_neg": 0.01,
                "w_regen": 1.0,
            },
        },
        "embed": {
            "n_images": 96,
            "n_steps": 10,
            "guidance_scale": 2.0,
            "injection_policy": "full",
        },
        "detect": {"fpr": 0.001},
        "attacks": {"n_images": 48, "kinds": None, "pgd_steps": 50},
        "identify": {
            "secret_length": 64,
            "real_keys": 1000,
            "sizes": [10, 100, 1000, 10000, 100000, 1000000],
            "trials": 10,
            "flip_p": 0.043,
        },
        "transfer": {
            "n_images": 64,
            "target_steps": 1500,
            "targets": ["seed_b", "seed_c", "wide"],
            "attack_eval": True,
        },
        "report": {"n_examples": 4, "amplify": 10.0},
    }


def fullscale_config() -> dict:
    """Reference full-scale operating point (documentation, not a toy target)."""
    cfg = default_config()
    cfg["out_dir"] = "runs/fullscale"
    cfg["vae"].update({"latent_size": 64})
    cfg["codec"].update({"secret_length": 64, "embed_dim": 64})
    cfg["train"].update(
        {
            "steps": 10000,
            "batch_size": 16,
            "ddim_steps": 50,
            "lcm_steps": 4,
            "guidance_scale": 7.5,
            "lr_warmup": 500,
            "freq_radius": 10.0,
        }
    )
    cfg["train"]["curriculum"].update(
        {"anneal_horizon": 5000, "beta_warmup": 1000}
    )
    return cfg


def _validate(node, default, path="") -> None:
    if isinstance(default, dict):
        if not isinstance(node, dict):
            raise ConfigError(f"{path or 'config'} must be an object")
        for key in node:
            if key not in default:
                raise ConfigError(f"unknown config key {path + key!r}")
        for key, dval in default.items():
            if key in node:
                _validate(node[key], dval, path + key + ".")
        return
    if default is None or node is None:
        return
    if isinstance(default, bool):
        if not isinstance(node, bool):
            raise ConfigError(f"{path[:-1]} must be a boolean")
        return
    if isinstance(default, (int, float)):
        if isinstance(node, bool) or not isinstance(node, (int, float)):
            raise ConfigError(f"{path[:-1]} must be a number")
        return
    if isinstance(default, str):
        if not isinstance(node, str):
            raise ConfigError(f"{path[:-1]} must be a string")
        return
    if isinstance(default, list):
        if not isinstance(node, list):
            raise ConfigError(f"{path[:-1]} must be a list")
        return
    raise ConfigError(f"unsupported config entry at {path[:-1]}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    """Defaults, optionally merged with a JSON file and key=value overrides."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _validate(user, cfg)
        cfg = _merge(cfg, user)
    for item in overrides or []:
        cfg = apply_override(cfg, item)
    _validate(cfg, default_config())
    root = os.environ.get("DIFFMARK_OUT_ROOT")
    if root and not Path(cfg["out_dir"]).is_absolute():
        cfg["out_dir"] = str(Path(root) / cfg["out_dir"])
    return cfg


def apply_override(cfg: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, _, raw = item.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings allowed
    parts = key.split(".")
    out = copy.deepcopy(cfg)
    node = out
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value
    return out


def config_hash(cfg: dict) -> str:
    hashed = {k: v for k, v in cfg.items() if k != "out_dir"}
    return stable_hash(hashed)


def latent_shape(cfg: dict) -> tuple[int, int, int]:
    return (cfg["vae"]["latent_channels"], cfg["vae"]["latent_size"], cfg["vae"]["latent_size"])


def train_config_from(cfg: dict) -> WatermarkTrainConfig:
    t = cfg["train"]
    cur = CurriculumConfig(**t["curriculum"])
    kwargs = {k: v for k, v in t.items() if k != "curriculum"}
    return WatermarkTrainConfig(curriculum=cur, **kwargs)
