"""Toy VAE defining the shared latent space.

encode(x) returns E(x) * f_s and decode(z) returns clamp(D(z / f_s), -1, 1),
where the scale factor f_s normalizes training-set latents to roughly unit
standard deviation. Identity mode bypasses the networks entirely (pure
reshape, f_s = 1) so latent-space components can be tested without a trained
codec in the loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, module_params, save_checkpoint
from .errors import StateError
from .nets import VaeDecoderNet, VaeEncoderNet
from .util import make_generator, seed_all


class ToyVAE:
    """Encoder/decoder pair over 3x32x32 images and 4x8x8 latents."""

    def __init__(
        self,
        latent_shape: tuple[int, int, int] = (4, 8, 8),
        image_shape: tuple[int, int, int] = (3, 32, 32),
        identity_mode: bool = False,
        width: int = 32,
    ):
        self.latent_shape = tuple(latent_shape)
        self.image_shape = tuple(image_shape)
        self.identity_mode = identity_mode
        self.width = width
        self.scale_factor = 1.0
        self.trained = identity_mode
        if identity_mode:
            if math.prod(latent_shape) != math.prod(image_shape):
                raise ValueError("identity mode requires matching element counts")
            self.encoder = None
            self.decoder = None
        else:
            self.encoder = VaeEncoderNet(image_shape[0], latent_shape[0], width)
            self.decoder = VaeDecoderNet(image_shape[0], latent_shape[0], width)

    def _check_ready(self):
        if not self.identity_mode and not self.trained:
            raise StateError("VAE is untrained; train it or use identity mode")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Image batch -> scaled latent batch (encoder mean * f_s)."""
        self._check_ready()
        if self.identity_mode:
            return x.reshape(x.shape[0], *self.latent_shape)
        mu, _ = self.encoder(x)
        return mu * self.scale_factor

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Scaled latent batch -> image batch clamped to [-1, 1]."""
        self._check_ready()
        if self.identity_mode:
            return z.reshape(z.shape[0], *self.image_shape)
        return torch.clamp(self.decoder(z / self.scale_factor), -1.0, 1.0)

    def parameters(self):
        if self.identity_mode:
            return []
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def save(self, directory, seeds: dict | None = None):
        if self.identity_mode:
            raise StateError("identity-mode VAE has nothing to persist")
        params = {}
        params.update({f"encoder.{k}": v for k, v in module_params(self.encoder).items()})
        params.update({f"decoder.{k}": v for k, v in module_params(self.decoder).items()})
        return save_checkpoint(
            directory,
            "vae",
            params,
            config={
                "latent_shape": list(self.latent_shape),
                "image_shape": list(self.image_shape),
                "scale_factor": self.scale_factor,
                "identity_mode": self.identity_mode,
                "width": self.width,
            },
            seeds=seeds,
        )

    @classmethod
    def load(cls, directory) -> "ToyVAE":
        ckpt: Checkpoint = load_checkpoint(directory)
        cfg = ckpt.config
        vae = cls(
            latent_shape=tuple(cfg["latent_shape"]),
            image_shape=tuple(cfg["image_shape"]),
            identity_mode=cfg.get("identity_mode", False),
            width=int(cfg.get("width", 32)),
        )
        enc_state = {
            k[len("encoder.") :]: torch.from_numpy(v.copy())
            for k, v in ckpt.params.items()
            if k.startswith("encoder.")
        }
        dec_state = {
            k[len("decoder.") :]: torch.from_numpy(v.copy())
            for k, v in ckpt.params.items()
            if k.startswith("decoder.")
        }
        vae.encoder.load_state_dict(enc_state)
        vae.decoder.load_state_dict(dec_state)
        vae.scale_factor = float(cfg["scale_factor"])
        vae.trained = True
        return vae


@dataclass
class VaeTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    kl_weight: float = 1e-4
    width: int = 24
    loss_trace: list = field(default_factory=list, repr=False)


def train_toy_vae(
    images: torch.Tensor,
    config: VaeTrainConfig | None = None,
    seed: int = 0,
    latent_shape: tuple[int, int, int] = (4, 8, 8),
) -> tuple[ToyVAE, list[float]]:
    """Train reconstruction + small-KL VAE, then fit the latent scale factor.

    f_s is set to the reciprocal of the empirical latent standard deviation
    over the training set, so downstream components see ~unit-scale latents.
    """
    cfg = config or VaeTrainConfig()
    seed_all(seed)
    vae = ToyVAE(
        latent_shape=latent_shape,
        image_shape=tuple(images.shape[1:]),
        width=cfg.width,
    )
    g = make_generator(seed + 1)
    opt = torch.optim.Adam(vae.parameters(), lr=cfg.lr)
    trace = []
    for _ in range(cfg.steps):
        idx = torch.randint(0, len(images), (cfg.batch_size,), generator=g)
        x = images[idx]
        mu, log_var = vae.encoder(x)
        z = mu + torch.exp(0.5 * log_var) * torch.randn(mu.shape, generator=g)
        recon = vae.decoder(z)
        rec_loss = F.mse_loss(recon, x)
        kl = -0.5 * torch.mean(1 + log_var - mu.square() - log_var.exp())
        loss = rec_loss + cfg.kl_weight * kl
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    vae.trained = True
    vae.scale_factor = fit_scale_factor(vae, images)
    return vae, trace


def fit_scale_factor(vae: ToyVAE, images: torch.Tensor, batch: int = 256) -> float:
    """1 / empirical std of encoder means over the dataset."""
    vals = []
    with torch.no_grad():
        for start in range(0, len(images), batch):
            mu, _ = vae.encoder(images[start : start + batch])
            vals.append(mu.reshape(-1))
    std = float(torch.cat(vals).std())
    return 1.0 / std


def psnr(a: torch.Tensor, b: torch.Tensor, max_value: float = 2.0, cap: float = 100.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs report the cap."""
    mse = float(F.mse_loss(a, b))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(max_value**2 / mse))


def roundtrip_psnr(vae: ToyVAE, images: torch.Tensor) -> float:
    with torch.no_grad():
        recon = vae.decode(vae.encode(images))
    return psnr(recon, images)
