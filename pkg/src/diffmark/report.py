"""Signal analysis bundle: perturbation heatmaps, spectra, difference maps.

Every figure is emitted as PNG plus the underlying CSV, so the numbers are
reproducible without any plotting dependency.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .codec import SecretEncoder, random_secrets
from .losses import low_frequency_mask
from .pipeline import embed_batch
from .util import fmt, make_generator, write_csv
from .vae import psnr


def delta_channel_norms(delta: torch.Tensor) -> np.ndarray:
    """Per-channel L2 norm of a (c, h, w) perturbation."""
    return delta.reshape(delta.shape[0], -1).norm(dim=1).detach().numpy()


def radial_power_profile(delta: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Mean centered-FFT power per integer radius (averaged over channels)."""
    spec = torch.fft.fftshift(torch.fft.fft2(delta), dim=(-2, -1))
    power = (spec.real**2 + spec.imag**2).mean(dim=0).detach().numpy()
    h, w = power.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - h // 2) ** 2 + (xx - w // 2) ** 2)
    rmax = int(dist.max())
    radii = np.arange(rmax + 1)
    profile = np.array(
        [power[np.round(dist).astype(int) == r].mean() if (np.round(dist) == r).any() else 0.0
         for r in radii]
    )
    return radii, profile


def difference_map(x_wm: torch.Tensor, x_clean: torch.Tensor, amplify: float = 10.0) -> torch.Tensor:
    """Channel-mean absolute pixel difference, amplified and clipped to [0, 1]."""
    return torch.clamp((x_wm - x_clean).abs().mean(dim=-3) * amplify, 0.0, 1.0)


def signal_analysis(
    enc: SecretEncoder,
    denoiser,
    vae,
    sched,
    out_dir,
    n_examples: int = 4,
    amplify: float = 10.0,
    freq_radius: float = 2.0,
    n_steps: int = 10,
    guidance_scale: float = 2.0,
    seed: int = 0,
    cfg_hash: str = "",
) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = make_generator(seed)
    secrets = random_secrets(max(n_examples, 1), enc.secret_length, g)
    enc.eval()
    with torch.no_grad():
        delta = enc(secrets, sample=False).delta

    # (a) per-channel decomposition
    norms = delta_channel_norms(delta[0])
    write_csv(out / "delta_channels.csv", ["channel", "l2_norm", "config_hash"],
              [[c, fmt(v), cfg_hash] for c, v in enumerate(norms)])
    c = delta.shape[1]
    fig, axes = plt.subplots(1, c + 1, figsize=(3 * (c + 1), 3))
    heat = delta[0].square().sum(dim=0).sqrt().numpy()
    axes[0].imshow(heat, cmap="magma")
    axes[0].set_title("per-pixel L2")
    vmax = float(delta[0].abs().max()) or 1.0
    for ch in range(c):
        axes[ch + 1].imshow(delta[0, ch].numpy(), cmap="coolwarm", vmin=-vmax, vmax=vmax)
        axes[ch + 1].set_title(f"channel {ch}")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "delta_channels.png", dpi=110)
    plt.close(fig)

    # (b) spectrum and radial profile
    radii, profile = radial_power_profile(delta[0])
    write_csv(out / "radial_profile.csv", ["radius", "mean_power", "config_hash"],
              [[int(r), fmt(p), cfg_hash] for r, p in zip(radii, profile)])
    spec = torch.fft.fftshift(torch.fft.fft2(delta[0]), dim=(-2, -1))
    logp = torch.log10((spec.real**2 + spec.imag**2).mean(dim=0) + 1e-12).numpy()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    im = ax1.imshow(logp, cmap="viridis")
    ax1.set_title("log power spectrum")
    fig.colorbar(im, ax=ax1, fraction=0.046)
    ax2.plot(radii, profile, marker="o", ms=3)
    ax2.axvline(freq_radius, color="red", ls="--", label=f"radius {freq_radius:g}")
    ax2.set_xlabel("radius")
    ax2.set_ylabel("mean power")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(out / "fft_spectrum.png", dpi=110)
    plt.close(fig)

    # (c) watermarked / clean pairs with amplified differences and overlay
    labels = torch.randint(0, denoiser.num_classes, (n_examples,), generator=g)
    wm = embed_batch(secrets[:n_examples], labels, enc, denoiser, vae, sched,
                     n_steps=n_steps, guidance_scale=guidance_scale, seed=seed + 1)
    clean = embed_batch(secrets[:n_examples], labels, enc, denoiser, vae, sched,
                        n_steps=n_steps, guidance_scale=guidance_scale, seed=seed + 1,
                        zero_delta=True)
    diffs = difference_map(wm, clean, amplify)
    stats_rows = []
    fig, axes = plt.subplots(4, n_examples, figsize=(2.2 * n_examples, 8.8))
    if n_examples == 1:
        axes = axes.reshape(4, 1)
    for i in range(n_examples):
        img_wm = ((wm[i] + 1) / 2).permute(1, 2, 0).numpy()
        img_cl = ((clean[i] + 1) / 2).permute(1, 2, 0).numpy()
        axes[0, i].imshow(img_wm)
        axes[1, i].imshow(img_cl)
        axes[2, i].imshow(diffs[i].numpy(), cmap="inferno", vmin=0, vmax=1)
        axes[3, i].imshow(img_wm)
        axes[3, i].imshow(diffs[i].numpy(), cmap="inferno", alpha=0.55, vmin=0, vmax=1)
        for r in range(4):
            axes[r, i].axis("off")
        raw = (wm[i] - clean[i]).abs()
        stats_rows.append(
            [i, fmt(float(raw.mean())), fmt(float(raw.max())),
             fmt(psnr(wm[i], clean[i])), cfg_hash]
        )
    for r, name in enumerate(["watermarked", "clean", f"|diff| x{amplify:g}", "overlay"]):
        axes[r, 0].set_ylabel(name)
    fig.tight_layout()
    fig.savefig(out / "difference_maps.png", dpi=110)
    plt.close(fig)
    write_csv(out / "difference_stats.csv",
              ["example", "mean_abs_diff", "max_abs_diff", "psnr", "config_hash"],
              stats_rows)

    mask = low_frequency_mask(delta.shape[-2], delta.shape[-1], freq_radius)
    power = (torch.fft.fftshift(torch.fft.fft2(delta[0]), dim=(-2, -1)).abs() ** 2).mean(dim=0)
    inside = float(power[mask].mean()) if mask.any() else 0.0
    outside = float(power[~mask].mean()) if (~mask).any() else 0.0
    return {
        "channel_norms": norms.tolist(),
        "power_inside_radius": inside,
        "power_outside_radius": outside,
    }
