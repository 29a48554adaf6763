"""Forward corruption, deterministic sampling with guidance, denoiser training.

The sampler injects an optional persistent latent perturbation before every
network evaluation; the perturbed latent feeds both the noise prediction and
the update rule, so the injected signal accumulates along the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import TrainingError
from .nets import DenoiserNet
from .schedule import TERMINAL_T, NoiseSchedule, sampling_timesteps
from .util import make_generator, seed_all


@dataclass(frozen=True)
class CfgConfig:
    """Classifier-free guidance configuration.

    Only the affine convention is supported:

        eps_hat = eps_cond + w * (eps_cond - eps_uncond)

    which equals (1+w)*eps_cond - w*eps_uncond. The convention name is
    recorded in every checkpoint manifest so runs are comparable.
    """

    guidance_scale: float = 2.0
    convention: str = "eq6_affine"

    def __post_init__(self):
        if self.convention != "eq6_affine":
            raise ValueError(f"unsupported CFG convention: {self.convention!r}")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be nonnegative")


def _alpha_bar_like(sched: NoiseSchedule, t, ref: torch.Tensor) -> torch.Tensor:
    """alpha_bar at t, shaped to broadcast against ref (per-sample t allowed)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if int(t.min()) < 0 or int(t.max()) >= sched.timesteps:
            raise IndexError("timestep out of range")
        ab = torch.as_tensor(sched.alpha_bar, dtype=ref.dtype, device=ref.device)
        return ab[t].reshape(-1, *([1] * (ref.ndim - 1)))
    return torch.as_tensor(sched.alpha_bar_at(int(t)), dtype=ref.dtype, device=ref.device)


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Corrupt a clean latent to noise level t:  sqrt(ab_t) z0 + sqrt(1-ab_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    ab = _alpha_bar_like(sched, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One deterministic reverse step from t to t_prev.

    Predicts the clean latent from the current noise estimate and re-noises
    it to the target level:

        z_prev = sqrt(ab_prev) * (z_t - sqrt(1-ab_t) eps_hat) / sqrt(ab_t)
                 + sqrt(1-ab_prev) * eps_hat

    t_prev = TERMINAL_T targets the exactly-clean state (ab = 1).
    """
    if t_prev != TERMINAL_T and t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must precede t ({t})")
    ab_t = sched.alpha_bar_at(int(t))
    ab_prev = sched.alpha_bar_at(int(t_prev))
    if ab_t == 0.0:
        raise ZeroDivisionError("alpha_bar(t) is zero; DDIM update is singular")
    z0_pred = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * z0_pred + np.sqrt(1.0 - ab_prev) * eps_hat


def cfg_predict(
    denoiser: DenoiserNet,
    z_t: torch.Tensor,
    t,
    label,
    cfg: CfgConfig,
) -> torch.Tensor:
    """Guided noise estimate, affine in the guidance scale.

    Conditional and unconditional branches run as one doubled batch; the
    result is eps_cond + w * (eps_cond - eps_uncond) exactly.
    """
    t = torch.as_tensor(t, dtype=torch.long, device=z_t.device)
    label = torch.as_tensor(label, dtype=torch.long, device=z_t.device)
    w = cfg.guidance_scale
    if w == 0.0:
        return denoiser(z_t, t, label)
    if label.ndim == 0:
        label = label.expand(z_t.shape[0])
    null = torch.full_like(label, denoiser.null_label)
    both = denoiser(torch.cat([z_t, z_t]), t, torch.cat([label, null]))
    eps_cond, eps_uncond = torch.chunk(both, 2, dim=0)
    return eps_cond + w * (eps_cond - eps_uncond)


def ddim_sample(
    denoiser: DenoiserNet,
    sched: NoiseSchedule,
    n_steps: int,
    label,
    cfg: CfgConfig,
    z_T: torch.Tensor,
    delta: torch.Tensor | None = None,
    injection_scale: float = 1.0,
) -> torch.Tensor:
    """Run the N-step guided sampler, optionally injecting delta at every step.

    Each iteration perturbs the running latent, predicts guided noise on the
    perturbed latent, and applies the deterministic update to the perturbed
    latent, so the injection shapes the whole trajectory. With delta absent
    (or injection_scale == 0) this is the clean sampler, bit for bit.
    """
    ts = sampling_timesteps(sched, n_steps)
    targets = ts[1:] + [TERMINAL_T]
    inject = delta is not None and injection_scale != 0.0
    with torch.no_grad():
        z = z_T
        for t, t_prev in zip(ts, targets):
            z_tilde = z + injection_scale * delta if inject else z
            eps_hat = cfg_predict(denoiser, z_tilde, t, label, cfg)
            z = ddim_step(z_tilde, eps_hat, t, t_prev, sched)
    return z


@dataclass
class DenoiserTrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    p_uncond: float = 0.1
    val_fraction: float = 0.1
    val_mse_threshold: float = 0.95
    base_width: int = 32
    emb_dim: int = 64
    log_every: int = 100
    loss_trace: list = field(default_factory=list, repr=False)


def train_toy_denoiser(
    latents: torch.Tensor,
    labels: torch.Tensor,
    sched: NoiseSchedule,
    config: DenoiserTrainConfig | None = None,
    seed: int = 0,
) -> tuple[DenoiserNet, list[float]]:
    """Fit the noise-prediction network on a latent dataset.

    Standard denoising objective: corrupt each latent to a random timestep
    and regress the injected noise, dropping the class label to the null
    label with probability p_uncond so guidance has an unconditional branch.
    Returns the trained network (afterwards treated as frozen) and the loss
    trace. Raises TrainingError if held-out denoising MSE does not reach the
    configured threshold.
    """
    cfg = config or DenoiserTrainConfig()
    seed_all(seed)
    num_classes = int(labels.max().item()) + 1 if labels.numel() else 10
    net = DenoiserNet(
        channels=latents.shape[1],
        num_classes=max(num_classes, 10),
        base_width=cfg.base_width,
        emb_dim=cfg.emb_dim,
    )
    if cfg.steps == 0:
        return net, []

    n_val = max(1, int(len(latents) * cfg.val_fraction))
    train_z, val_z = latents[:-n_val], latents[-n_val:]
    train_y, val_y = labels[:-n_val], labels[-n_val:]
    g = make_generator(seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    trace: list[float] = []
    for step in range(cfg.steps):
        idx = torch.randint(0, len(train_z), (cfg.batch_size,), generator=g)
        z0 = train_z[idx]
        y = train_y[idx].clone()
        drop = torch.rand(len(y), generator=g) < cfg.p_uncond
        y[drop] = net.null_label
        t = torch.randint(0, sched.timesteps, (len(z0),), generator=g)
        eps = torch.randn(z0.shape, generator=g)
        z_t = forward_diffuse(z0, t, eps, sched)
        pred = net(z_t, t, y)
        loss = F.mse_loss(pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))

    val_mse = _validation_mse(net, val_z, val_y, sched, seed + 2)
    if val_mse > cfg.val_mse_threshold:
        raise TrainingError(
            f"denoiser validation MSE {val_mse:.4f} above threshold "
            f"{cfg.val_mse_threshold:.4f} after {cfg.steps} steps",
            loss_trace=trace,
        )
    return net, trace


def save_denoiser(directory, net: DenoiserNet, sched: NoiseSchedule, seeds: dict | None = None):
    from .checkpoint import module_params, save_checkpoint

    config = {
        "channels": net.channels,
        "num_classes": net.num_classes,
        "base_width": net.unet.conv_in.out_channels,
        "emb_dim": net.label_embed.embedding_dim,
    }
    return save_checkpoint(
        directory, "denoiser", module_params(net), config,
        schedule=sched.to_config(), cfg_convention="eq6_affine", seeds=seeds,
    )


def load_denoiser(directory) -> tuple[DenoiserNet, NoiseSchedule]:
    from .checkpoint import load_checkpoint, load_into_module

    ckpt = load_checkpoint(directory)
    cfg = ckpt.config
    net = DenoiserNet(
        channels=int(cfg["channels"]),
        num_classes=int(cfg["num_classes"]),
        base_width=int(cfg["base_width"]),
        emb_dim=int(cfg["emb_dim"]),
    )
    load_into_module(net, ckpt)
    sched = NoiseSchedule.from_config(ckpt.manifest["schedule"])
    return net, sched


def _validation_mse(net, val_z, val_y, sched, seed: int) -> float:
    g = make_generator(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(val_z), 64):
            z0 = val_z[start : start + 64]
            y = val_y[start : start + 64]
            t = torch.randint(0, sched.timesteps, (len(z0),), generator=g)
            eps = torch.randn(z0.shape, generator=g)
            z_t = forward_diffuse(z0, t, eps, sched)
            pred = net(z_t, t, y)
            total += float(F.mse_loss(pred, eps, reduction="sum"))
            count += z0.numel()
    return total / max(count, 1)
