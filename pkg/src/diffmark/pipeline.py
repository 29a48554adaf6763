"""End-to-end embedding and detection, transfer evaluation, decode latency.

Embedding runs the full sampler with per-step injection of the encoded
perturbation (mean mode); detection is a VAE encode plus one decoder forward,
and never touches the denoiser or the consistency model.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .codec import SecretDecoder, SecretEncoder, hard_decision
from .diffusion import CfgConfig, ddim_sample
from .identify import DetectionThreshold
from .nets import DenoiserNet
from .schedule import NoiseSchedule
from .util import make_generator
from .vae import ToyVAE


def embed(
    secret: torch.Tensor,
    label: int,
    enc: SecretEncoder,
    denoiser: DenoiserNet,
    vae: ToyVAE,
    sched: NoiseSchedule,
    n_steps: int = 10,
    guidance_scale: float = 2.0,
    seed: int = 0,
    injection_policy: str = "full",
) -> torch.Tensor:
    """Generate one watermarked image for the given secret and class label."""
    secrets = secret.reshape(1, -1)
    labels = torch.tensor([label], dtype=torch.long)
    return embed_batch(
        secrets, labels, enc, denoiser, vae, sched,
        n_steps=n_steps, guidance_scale=guidance_scale, seed=seed,
        injection_policy=injection_policy,
    )[0]


def embed_batch(
    secrets: torch.Tensor,
    labels: torch.Tensor,
    enc: SecretEncoder,
    denoiser: DenoiserNet,
    vae: ToyVAE,
    sched: NoiseSchedule,
    n_steps: int = 10,
    guidance_scale: float = 2.0,
    seed: int = 0,
    injection_policy: str = "full",
    zero_delta: bool = False,
) -> torch.Tensor:
    """Watermarked batch generation, deterministic given the seed.

    `zero_delta` generates the clean images for the same initial noise
    (used for paired quality measurements).
    """
    if injection_policy not in ("full", "one_over_N"):
        raise ValueError(f"unknown injection policy {injection_policy!r}")
    enc.eval()
    with torch.no_grad():
        pert = enc(secrets, sample=False)
    delta = None if zero_delta else pert.delta
    scale = 1.0 if injection_policy == "full" else 1.0 / n_steps
    g = make_generator(seed)
    z_T = torch.randn((len(secrets), *enc.latent_shape), generator=g)
    z0 = ddim_sample(
        denoiser, sched, n_steps, labels, CfgConfig(guidance_scale), z_T,
        delta=delta, injection_scale=scale,
    )
    with torch.no_grad():
        return vae.decode(z0)


@dataclass
class DetectResult:
    decoded: torch.Tensor  # (L,) or (B, L) hard bits
    matching_bits: int | None = None
    decision: bool | None = None


def detect(
    x: torch.Tensor,
    dec: SecretDecoder,
    vae: ToyVAE,
    threshold: DetectionThreshold | None = None,
    registered: torch.Tensor | None = None,
) -> DetectResult:
    """Single-pass detection: VAE encode, one decoder forward, hard decision.

    With a registered key (and threshold), also runs the bit-match
    hypothesis test.
    """
    dec.eval()
    single = x.ndim == 3
    batch = x.unsqueeze(0) if single else x
    with torch.no_grad():
        z0 = vae.encode(batch)
        logits = dec(z0)
    bits = hard_decision(logits)
    bits = bits[0] if single else bits
    if registered is None:
        return DetectResult(decoded=bits)
    if threshold is None:
        raise ValueError("detection decision requires a threshold")
    m = int((bits.reshape(-1) == registered.reshape(-1)).sum())
    return DetectResult(decoded=bits, matching_bits=m, decision=threshold.decide(m))


def detect_bits(x: torch.Tensor, dec: SecretDecoder, vae: ToyVAE) -> torch.Tensor:
    """Batch hard-decision decode (B, L)."""
    return detect(x, dec, vae).decoded


def transfer_eval(
    enc: SecretEncoder,
    dec: SecretDecoder,
    vae: ToyVAE,
    sched: NoiseSchedule,
    targets: dict[str, DenoiserNet],
    n_images: int = 64,
    secret_length: int | None = None,
    n_steps: int = 10,
    guidance_scale: float = 2.0,
    seed: int = 0,
) -> list[dict]:
    """Embed-and-detect on each target diffusion model without retraining.

    All targets must share the codec's VAE latent space; the same secrets,
    labels, and initial noise are reused across targets so accuracy gaps are
    attributable to the model swap alone.
    """
    from .codec import random_secrets

    length = secret_length or enc.secret_length
    g = make_generator(seed)
    secrets = random_secrets(n_images, length, g)
    num_classes = min(d.num_classes for d in targets.values())
    labels = torch.randint(0, num_classes, (n_images,), generator=g)
    rows = []
    for name, model in targets.items():
        images = embed_batch(
            secrets, labels, enc, model, vae, sched,
            n_steps=n_steps, guidance_scale=guidance_scale, seed=seed + 1,
        )
        decoded = detect_bits(images, dec, vae)
        acc = float((decoded == secrets).float().mean())
        rows.append({"model": name, "bit_acc": acc, "n_images": n_images})
    return rows


def latency_bench(
    dec: SecretDecoder,
    vae: ToyVAE,
    images: torch.Tensor,
    warmup: int = 5,
) -> dict:
    """Wall-clock decode latency per image (batch 1), warmup excluded."""
    dec.eval()
    n = len(images)
    if n < 1:
        raise ValueError("need at least one image")
    for i in range(min(warmup, n)):
        detect(images[i], dec, vae)
    times = []
    for i in range(n):
        t0 = time.perf_counter()
        detect(images[i], dec, vae)
        times.append(time.perf_counter() - t0)
    arr = np.asarray(times)
    return {
        "n_images": n,
        "mean_ms": float(arr.mean() * 1e3),
        "median_ms": float(np.median(arr) * 1e3),
        "p90_ms": float(np.quantile(arr, 0.9) * 1e3),
    }
