"""Curriculum-phase losses: magnitude annealing target, latent fidelity,
worst-case regional pixel distortion, low-frequency energy ratio, and the
negative-entropy false-positive suppressor.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F


def anneal_sigma_target(t: int, sigma_start: float, sigma_end: float, horizon: int) -> float:
    """Cosine interpolation from sigma_start to sigma_end over `horizon` steps.

    Continuous and non-increasing in t; clamps at sigma_end once t >= horizon.
    """
    frac = min(t / horizon, 1.0)
    return sigma_start + 0.5 * (sigma_end - sigma_start) * (1.0 - math.cos(math.pi * frac))


def lafid_loss(z0_wm: torch.Tensor, z0_clean: torch.Tensor) -> torch.Tensor:
    """Latent-space fidelity: MSE against the clean (detached) trajectory output."""
    return F.mse_loss(z0_wm, z0_clean)


def prvl_loss(x_wm: torch.Tensor, x_clean: torch.Tensor, kernel: int = 32) -> torch.Tensor:
    """Worst-case windowed mean of the channel-averaged absolute pixel difference.

    A uniform kernel slides over the difference map; the loss is the maximum
    window response, pushing watermark energy to spread across the image.
    """
    if x_wm.ndim == 3:
        x_wm = x_wm.unsqueeze(0)
        x_clean = x_clean.unsqueeze(0)
    diff = (x_wm - x_clean).abs().mean(dim=1, keepdim=True)
    if kernel > diff.shape[-1] or kernel > diff.shape[-2]:
        raise ValueError("kernel larger than image")
    pooled = F.avg_pool2d(diff, kernel, stride=1)
    return pooled.reshape(pooled.shape[0], -1).max(dim=1).values.mean()


def low_frequency_mask(h: int, w: int, radius: float) -> torch.Tensor:
    """Boolean mask of centered-spectrum bins within `radius` of DC."""
    yy = torch.arange(h).reshape(-1, 1) - h // 2
    xx = torch.arange(w).reshape(1, -1) - w // 2
    return (yy**2 + xx**2) <= radius**2


def freq_loss(delta: torch.Tensor, radius: float = 10.0) -> torch.Tensor:
    """Fraction of spectral power inside the DC-centered disk.

    Power is the squared magnitude of the centered 2D FFT; the guard term in
    the denominator keeps the zero perturbation at exactly zero loss.
    """
    if delta.ndim == 3:
        delta = delta.unsqueeze(0)
    spec = torch.fft.fftshift(torch.fft.fft2(delta), dim=(-2, -1))
    power = spec.real**2 + spec.imag**2
    mask = low_frequency_mask(delta.shape[-2], delta.shape[-1], radius).to(delta.device)
    low = power[..., mask].mean()
    return low / (power.mean() + 1e-8)


def neg_entropy_loss(dec, z0_clean: torch.Tensor) -> torch.Tensor:
    """Negative mean per-bit entropy of decoder outputs on clean latents.

    Bounded in [-ln 2, 0]; minimizing it pushes the decoder toward uniform
    predictions on unwatermarked content.
    """
    logits = dec(z0_clean)
    logp = F.log_softmax(logits, dim=-1)
    entropy = -(logp.exp() * logp).sum(dim=-1)
    return -entropy.mean()
