"""Robustness harness: 8 distortions, 3 regenerations, 2 adversarial attacks.

All attacks are pure functions of (image, spec, frozen models): images are
(B, 3, H, W) tensors in [-1, 1], outputs keep shape and range, and a fixed
seed reproduces the attack bit for bit. Attacks whose strength range includes
a benign end return the input unchanged there.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torchvision.transforms.v2 import functional as TF

from .diffusion import CfgConfig, cfg_predict, ddim_step, forward_diffuse
from .schedule import TERMINAL_T
from .util import make_generator

DISTORTION_KINDS = (
    "rotation", "rcrop", "erase", "bright", "contrast", "blur", "noise", "jpeg",
)
REGEN_KINDS = ("regen_vae", "regen_diff", "rinse_2xdiff")
ADV_KINDS = ("adv_klvae", "adv_rn_surrogate")
ALL_KINDS = DISTORTION_KINDS + REGEN_KINDS + ADV_KINDS

# (low, high, identity value or None); strength is the raw knob from the
# severity tables: angle, crop scale, area fraction, factor, kernel size,
# noise sigma, jpeg quality, codec quality, re-noising steps, or epsilon.
STRENGTH_RANGES = {
    "rotation": (0.0, 45.0, 0.0),
    "rcrop": (0.5, 1.0, 1.0),
    "erase": (0.0, 0.25, 0.0),
    "bright": (1.0, 2.0, 1.0),
    "contrast": (1.0, 2.0, 1.0),
    "blur": (0.0, 20.0, 0.0),
    "noise": (0.0, 0.1, 0.0),
    "jpeg": (10.0, 90.0, None),
    "regen_vae": (1.0, 7.0, None),
    "regen_diff": (0.0, 200.0, None),
    "rinse_2xdiff": (20.0, 100.0, None),
    "adv_klvae": (0.0, 8.0 / 255.0, 0.0),
    "adv_rn_surrogate": (0.0, 8.0 / 255.0, 0.0),
}

# benign -> aggressive sweep points per attack
SWEEP_STRENGTHS = {
    "rotation": [0.0, 11.25, 22.5, 33.75, 45.0],
    "rcrop": [1.0, 0.875, 0.75, 0.625, 0.5],
    "erase": [0.0, 0.0625, 0.125, 0.1875, 0.25],
    "bright": [1.0, 1.25, 1.5, 1.75, 2.0],
    "contrast": [1.0, 1.25, 1.5, 1.75, 2.0],
    "blur": [0.0, 5.0, 10.0, 15.0, 20.0],
    "noise": [0.0, 0.025, 0.05, 0.075, 0.1],
    "jpeg": [90.0, 70.0, 50.0, 30.0, 10.0],
    "regen_vae": [7.0, 5.0, 3.0, 1.0],
    "regen_diff": [40.0, 80.0, 120.0, 160.0, 200.0],
    "rinse_2xdiff": [20.0, 40.0, 60.0, 80.0, 100.0],
    "adv_klvae": [2 / 255, 4 / 255, 6 / 255, 8 / 255],
    "adv_rn_surrogate": [2 / 255, 4 / 255, 6 / 255, 8 / 255],
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRENGTH_RANGES:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        lo, hi, _ = STRENGTH_RANGES[self.kind]
        if not (lo <= self.strength <= hi):
            raise ValueError(
                f"{self.kind} strength {self.strength} outside [{lo}, {hi}]"
            )


def _to01(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) * 0.5


def _from01(y: torch.Tensor) -> torch.Tensor:
    return torch.clamp(y * 2.0 - 1.0, -1.0, 1.0)


def apply_distortion(x: torch.Tensor, spec: AttackSpec) -> torch.Tensor:
    """One of the 8 pixel-space distortions at the given strength."""
    if spec.kind not in DISTORTION_KINDS:
        raise ValueError(f"{spec.kind!r} is not a distortion attack")
    _, _, identity = STRENGTH_RANGES[spec.kind]
    if identity is not None and spec.strength == identity:
        return x.clone()
    g = make_generator(spec.seed)
    h, w = x.shape[-2], x.shape[-1]

    if spec.kind == "rotation":
        return torch.clamp(
            TF.rotate(x, spec.strength, interpolation=TF.InterpolationMode.BILINEAR),
            -1.0,
            1.0,
        )
    if spec.kind == "rcrop":
        side = max(1, round(h * float(np.sqrt(spec.strength))))
        top = int(torch.randint(0, h - side + 1, (1,), generator=g))
        left = int(torch.randint(0, w - side + 1, (1,), generator=g))
        crop = x[..., top : top + side, left : left + side]
        return torch.clamp(
            TF.resize(crop, [h, w], interpolation=TF.InterpolationMode.BILINEAR),
            -1.0,
            1.0,
        )
    if spec.kind == "erase":
        side = max(1, round(h * float(np.sqrt(spec.strength))))
        top = int(torch.randint(0, h - side + 1, (1,), generator=g))
        left = int(torch.randint(0, w - side + 1, (1,), generator=g))
        out = x.clone()
        out[..., top : top + side, left : left + side] = 0.0
        return out
    if spec.kind == "bright":
        return _from01(_to01(x) * spec.strength)
    if spec.kind == "contrast":
        y = _to01(x)
        gray = (
            0.299 * y[..., 0, :, :] + 0.587 * y[..., 1, :, :] + 0.114 * y[..., 2, :, :]
        )
        mean = gray.mean(dim=(-2, -1), keepdim=True).unsqueeze(-3)
        return _from01((y - mean) * spec.strength + mean)
    if spec.kind == "blur":
        k = 2 * int(spec.strength // 2) + 1
        if k < 3:
            return x.clone()
        sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
        return torch.clamp(TF.gaussian_blur(x, [k, k], [sigma, sigma]), -1.0, 1.0)
    if spec.kind == "noise":
        noise = torch.randn(x.shape, generator=g) * spec.strength
        return torch.clamp(x + noise, -1.0, 1.0)
    if spec.kind == "jpeg":
        return _jpeg_roundtrip(x, int(spec.strength))
    raise AssertionError


def _jpeg_roundtrip(x: torch.Tensor, quality: int) -> torch.Tensor:
    single = x.ndim == 3
    batch = x.unsqueeze(0) if single else x
    outs = []
    for img in batch:
        arr = (_to01(img).clamp(0, 1) * 255.0).round().to(torch.uint8)
        pil = Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB")
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=quality)
        buf.seek(0)
        back = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        outs.append(_from01(torch.from_numpy(back).permute(2, 0, 1)))
    out = torch.stack(outs)
    return out[0] if single else out


REGEN_VAE_SIGMA_PER_QUALITY = 0.06  # latent noise std = 0.06 * (8 - quality)


def apply_regeneration(x: torch.Tensor, spec: AttackSpec, vae, denoiser, sched) -> torch.Tensor:
    """Re-encode the image and reconstruct it through the toy generative stack.

    regen_vae: codec round-trip with latent noise scaled by the quality knob
    (a toy stand-in for an external compression model's quality setting; not
    comparable to any absolute external scale). regen_diff: encode, corrupt
    forward by `strength` schedule steps, then re-denoise with the toy
    diffusion (null label, no guidance). rinse_2xdiff: regen_diff twice.
    """
    if spec.kind not in REGEN_KINDS:
        raise ValueError(f"{spec.kind!r} is not a regeneration attack")
    single = x.ndim == 3
    batch = x.unsqueeze(0) if single else x
    if spec.kind == "regen_vae":
        sigma = REGEN_VAE_SIGMA_PER_QUALITY * (8.0 - spec.strength)
        g = make_generator(spec.seed)
        with torch.no_grad():
            z = vae.encode(batch)
            z = z + sigma * torch.randn(z.shape, generator=g)
            out = vae.decode(z)
    elif spec.kind == "regen_diff":
        out = _regen_diff(batch, int(spec.strength), spec.seed, vae, denoiser, sched)
    else:  # rinse_2xdiff: same mapped strength, applied twice
        steps = int(spec.strength)
        out = _regen_diff(batch, steps, spec.seed, vae, denoiser, sched)
        out = _regen_diff(out, steps, spec.seed + 1, vae, denoiser, sched)
    out = torch.clamp(out, -1.0, 1.0)
    return out[0] if single else out


def _regen_diff(batch, t_star: int, seed: int, vae, denoiser, sched, max_redenoise: int = 10):
    g = make_generator(seed)
    with torch.no_grad():
        z0 = vae.encode(batch)
        if t_star <= 0:
            return vae.decode(z0)
        t_idx = min(t_star, sched.timesteps) - 1
        eps = torch.randn(z0.shape, generator=g)
        z_t = forward_diffuse(z0, t_idx, eps, sched)
        # re-denoise over the corrupted range only
        sub = _descending_steps(t_idx, min(max_redenoise, t_idx + 1))
        z = z_t
        cfg = CfgConfig(guidance_scale=0.0)
        labels = torch.full((len(batch),), denoiser.null_label, dtype=torch.long)
        targets = sub[1:] + [TERMINAL_T]
        for t, t_prev in zip(sub, targets):
            eps_hat = cfg_predict(denoiser, z, t, labels, cfg)
            z = ddim_step(z, eps_hat, t, t_prev, sched)
        return vae.decode(z)


def _descending_steps(t_top: int, n: int) -> list[int]:
    if n == 1:
        return [t_top]
    pts = np.linspace(t_top, 0, n)
    ts = [int(round(p)) for p in pts]
    for i in range(1, len(ts)):
        if ts[i] >= ts[i - 1]:
            ts[i] = ts[i - 1] - 1
    return [t for t in ts if t >= 0]


def apply_adversarial(
    x: torch.Tensor,
    spec: AttackSpec,
    target_encoder,
    pgd_steps: int = 50,
) -> torch.Tensor:
    """PGD in the l-inf ball maximizing feature-space divergence.

    target_encoder maps an image batch to a feature tensor (the VAE latent
    for the grey-box variant, surrogate classifier features for black-box).
    Step size is eps/10 with a random start inside the ball; the final
    projection makes ||out - x||_inf <= eps exact.
    """
    if spec.kind not in ADV_KINDS:
        raise ValueError(f"{spec.kind!r} is not an adversarial attack")
    eps = float(spec.strength)
    if eps == 0.0:
        return x.clone()
    single = x.ndim == 3
    batch = (x.unsqueeze(0) if single else x).detach()
    g = make_generator(spec.seed)
    with torch.no_grad():
        ref = target_encoder(batch)
    start = (torch.rand(batch.shape, generator=g) * 2.0 - 1.0) * eps
    adv = torch.clamp(batch + start, -1.0, 1.0)
    step = eps / 10.0
    for _ in range(pgd_steps):
        adv = adv.detach().requires_grad_(True)
        div = (target_encoder(adv) - ref).square().sum()
        grad = torch.autograd.grad(div, adv)[0]
        with torch.no_grad():
            adv = adv + step * grad.sign()
            adv = batch + torch.clamp(adv - batch, -eps, eps)
            adv = torch.clamp(adv, -1.0, 1.0)
    out = batch + torch.clamp(adv.detach() - batch, -eps, eps)
    out = torch.clamp(out, -1.0, 1.0)
    return out[0] if single else out


def train_surrogate(images: torch.Tensor, labels: torch.Tensor, steps: int = 600, seed: int = 0):
    """Fit the black-box surrogate classifier on the synthetic dataset."""
    from .nets import SurrogateClassifier
    from .util import seed_all

    seed_all(seed)
    net = SurrogateClassifier(num_classes=int(labels.max()) + 1)
    g = make_generator(seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    for _ in range(steps):
        idx = torch.randint(0, len(images), (64,), generator=g)
        loss = torch.nn.functional.cross_entropy(net(images[idx]), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    return net


def apply_attack(x: torch.Tensor, spec: AttackSpec, ctx: dict | None = None) -> torch.Tensor:
    """Dispatch an attack; ctx supplies models for regeneration/adversarial."""
    ctx = ctx or {}
    if spec.kind in DISTORTION_KINDS:
        return apply_distortion(x, spec)
    if spec.kind in REGEN_KINDS:
        return apply_regeneration(x, spec, ctx["vae"], ctx["denoiser"], ctx["sched"])
    if spec.kind == "adv_klvae":
        vae = ctx["vae"]
        return apply_adversarial(x, spec, vae.encode)
    surrogate = ctx["surrogate"]
    return apply_adversarial(x, spec, surrogate.features)
