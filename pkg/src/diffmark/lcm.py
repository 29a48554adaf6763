"""Consistency distillation of the frozen denoiser and the K-step
differentiable sampling path used as the watermark training bridge.

The student maps any on-trajectory noisy latent (plus guidance scale and
label) directly toward the clean solution:

    f(z, t) = c_skip(t) * z + c_out(t) * x0_pred(z, t)

with the boundary parameterization pinned so that c_skip(t_min) = 1 and
c_out(t_min) = 0 exactly. x0_pred converts the network's noise estimate via
the teacher's schedule, letting the student start from teacher weights.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, module_params, save_checkpoint
from .diffusion import forward_diffuse
from .nets import ConsistencyNet, DenoiserNet
from .schedule import NoiseSchedule
from .util import make_generator, seed_all


@dataclass(frozen=True)
class DistillConfig:
    skipping_step: int = 20
    omega_min: float = 2.0
    omega_max: float = 2.0
    distance_metric: str = "l2"
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    ema_rate: float = 0.95

    def __post_init__(self):
        if self.skipping_step < 1:
            raise ValueError("skipping step must be >= 1")
        if self.omega_min > self.omega_max:
            raise ValueError("omega range is inverted")
        if self.distance_metric not in ("l2", "huber"):
            raise ValueError(f"unknown distance metric {self.distance_metric!r}")
        if not (0.0 < self.ema_rate < 1.0):
            raise ValueError("ema_rate must lie in (0, 1)")


def distilled_grid(sched: NoiseSchedule, k: int) -> list[int]:
    """Ascending timesteps {k-1, 2k-1, ...} ending at T-1; t_min is grid[0]."""
    if sched.timesteps % k != 0:
        raise ValueError("skipping step must divide the schedule length")
    return [(i + 1) * k - 1 for i in range(sched.timesteps // k)]


class ConsistencyModel:
    """Distilled few-step model with EMA target weights."""

    SIGMA_DATA = 0.5
    TIMESTEP_SCALING = 10.0

    def __init__(
        self,
        sched: NoiseSchedule,
        skipping_step: int = 20,
        num_classes: int = 10,
        base_width: int = 32,
        emb_dim: int = 64,
        channels: int = 4,
    ):
        self.sched = sched
        self.skipping_step = skipping_step
        self.grid = distilled_grid(sched, skipping_step)
        self.t_min = self.grid[0]
        self.net = ConsistencyNet(channels, num_classes, base_width, emb_dim)
        self.ema_net = copy.deepcopy(self.net)
        for p in self.ema_net.parameters():
            p.requires_grad_(False)

    def init_from_teacher(self, teacher: DenoiserNet) -> None:
        """Copy shared backbone weights; extra guidance embedding stays zero."""
        missing, unexpected = self.net.load_state_dict(teacher.state_dict(), strict=False)
        if unexpected:
            raise ValueError(f"teacher weights carry unknown entries: {unexpected}")
        self.ema_net = copy.deepcopy(self.net)
        for p in self.ema_net.parameters():
            p.requires_grad_(False)

    def boundary_scalings(self, t: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        scaled = (float(t) - float(self.t_min)) * self.TIMESTEP_SCALING
        sd2 = self.SIGMA_DATA**2
        c_skip = sd2 / (scaled**2 + sd2)
        c_out = scaled / (scaled**2 + sd2) ** 0.5
        return (
            torch.as_tensor(c_skip, dtype=dtype),
            torch.as_tensor(c_out, dtype=dtype),
        )

    def forward(
        self,
        z_t: torch.Tensor,
        t: int,
        omega: float,
        label,
        use_ema: bool = False,
    ) -> torch.Tensor:
        """Clean-latent prediction f(z_t, t); differentiable w.r.t. z_t."""
        net = self.ema_net if use_ema else self.net
        tt = torch.as_tensor(int(t), dtype=torch.long)
        om = torch.as_tensor(float(omega), dtype=z_t.dtype)
        lab = torch.as_tensor(label, dtype=torch.long)
        eps_hat = net(z_t, tt, om, lab)
        ab = torch.as_tensor(self.sched.alpha_bar_at(int(t)), dtype=z_t.dtype)
        x0_pred = (z_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)
        c_skip, c_out = self.boundary_scalings(t, dtype=z_t.dtype)
        return c_skip * z_t + c_out * x0_pred

    def step_plan(self, n_steps: int) -> list[int]:
        """Descending sampling timesteps: evenly spaced over the grid, last at t_min."""
        if n_steps < 1:
            raise ValueError("need at least one step")
        if n_steps == 1:
            return [self.grid[-1]]
        top = len(self.grid) - 1
        idx = [round(top * (1 - i / (n_steps - 1))) for i in range(n_steps)]
        return [self.grid[i] for i in idx]

    def update_ema(self, rate: float) -> None:
        with torch.no_grad():
            for p_ema, p in zip(self.ema_net.parameters(), self.net.parameters()):
                p_ema.mul_(rate).add_(p, alpha=1.0 - rate)
            for b_ema, b in zip(self.ema_net.buffers(), self.net.buffers()):
                b_ema.copy_(b)

    def double(self) -> "ConsistencyModel":
        self.net.double()
        self.ema_net.double()
        return self

    def save(self, directory, distill_cfg: DistillConfig | None = None,
             teacher_hash: str | None = None, seeds: dict | None = None):
        params = {}
        params.update({f"net.{k}": v for k, v in module_params(self.net).items()})
        params.update({f"ema.{k}": v for k, v in module_params(self.ema_net).items()})
        cfg = {
            "skipping_step": self.skipping_step,
            "num_classes": self.net.num_classes,
            "channels": self.net.channels,
            "sigma_data": self.SIGMA_DATA,
            "timestep_scaling": self.TIMESTEP_SCALING,
        }
        extra = {"teacher_hash": teacher_hash}
        if distill_cfg is not None:
            extra["distill"] = {
                "skipping_step": distill_cfg.skipping_step,
                "omega_min": distill_cfg.omega_min,
                "omega_max": distill_cfg.omega_max,
                "ema_rate": distill_cfg.ema_rate,
                "distance_metric": distill_cfg.distance_metric,
            }
        return save_checkpoint(
            directory, "lcm", params, cfg,
            schedule=self.sched.to_config(),
            cfg_convention="eq6_affine",
            seeds=seeds,
            extra=extra,
        )

    @classmethod
    def load(cls, directory) -> "ConsistencyModel":
        ckpt = load_checkpoint(directory)
        sched = NoiseSchedule.from_config(ckpt.manifest["schedule"])
        model = cls(
            sched,
            skipping_step=int(ckpt.config["skipping_step"]),
            num_classes=int(ckpt.config["num_classes"]),
            channels=int(ckpt.config["channels"]),
        )
        net_state = {
            k[len("net.") :]: torch.from_numpy(v.copy())
            for k, v in ckpt.params.items()
            if k.startswith("net.")
        }
        ema_state = {
            k[len("ema.") :]: torch.from_numpy(v.copy())
            for k, v in ckpt.params.items()
            if k.startswith("ema.")
        }
        model.net.load_state_dict(net_state)
        model.ema_net.load_state_dict(ema_state)
        return model


def _teacher_guided_eps(
    teacher: DenoiserNet,
    z: torch.Tensor,
    t: torch.Tensor,
    omega: torch.Tensor,
    label: torch.Tensor,
) -> torch.Tensor:
    null = torch.full_like(label, teacher.null_label)
    both = teacher(torch.cat([z, z]), torch.cat([t, t]), torch.cat([label, null]))
    eps_c, eps_u = torch.chunk(both, 2, dim=0)
    w = omega.reshape(-1, *([1] * (z.ndim - 1)))
    return eps_c + w * (eps_c - eps_u)


def _gathered_ddim_step(
    z: torch.Tensor,
    eps_hat: torch.Tensor,
    t: torch.Tensor,
    t_prev: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    ab = torch.as_tensor(sched.alpha_bar, dtype=z.dtype)
    shape = (-1, *([1] * (z.ndim - 1)))
    ab_t = ab[t].reshape(shape)
    ab_p = ab[t_prev].reshape(shape)
    x0 = (z - torch.sqrt(1.0 - ab_t) * eps_hat) / torch.sqrt(ab_t)
    return torch.sqrt(ab_p) * x0 + torch.sqrt(1.0 - ab_p) * eps_hat


def lcd_train_step(
    model: ConsistencyModel,
    teacher: DenoiserNet,
    sched: NoiseSchedule,
    cfg: DistillConfig,
    batch: tuple[torch.Tensor, torch.Tensor],
    opt: torch.optim.Optimizer,
    generator: torch.Generator,
) -> float:
    """One distillation update.

    Draw a noisy latent at a grid timestep, take one k-gap guided solver step
    of the frozen teacher, and pull the student's prediction at the higher
    timestep toward the EMA target's prediction at the lower one. Updates the
    student by gradient and the EMA weights by exponential averaging.
    """
    if cfg.skipping_step < 1:
        raise ValueError("skipping step must be >= 1")
    z0, labels = batch
    grid = torch.as_tensor(model.grid, dtype=torch.long)
    n = torch.randint(0, len(grid) - 1, (len(z0),), generator=generator)
    t_lo = grid[n]
    t_hi = grid[n + 1]
    omega = cfg.omega_min + (cfg.omega_max - cfg.omega_min) * torch.rand(
        len(z0), generator=generator
    )
    eps = torch.randn(z0.shape, generator=generator)
    z_hi = forward_diffuse(z0, t_hi, eps, sched)

    with torch.no_grad():
        eps_teacher = _teacher_guided_eps(teacher, z_hi, t_hi, omega, labels)
        z_lo_hat = _gathered_ddim_step(z_hi, eps_teacher, t_hi, t_lo, sched)
        target = _consistency_batch(model, z_lo_hat, t_lo, omega, labels, use_ema=True)

    pred = _consistency_batch(model, z_hi, t_hi, omega, labels, use_ema=False)
    if cfg.distance_metric == "l2":
        loss = F.mse_loss(pred, target)
    else:
        loss = F.huber_loss(pred, target)
    opt.zero_grad()
    loss.backward()
    opt.step()
    model.update_ema(cfg.ema_rate)
    return float(loss.detach())


def _consistency_batch(model, z, t, omega, labels, use_ema):
    """Vectorized f over per-sample timesteps (distillation only)."""
    net = model.ema_net if use_ema else model.net
    eps_hat = net(z, t, omega, labels)
    ab = torch.as_tensor(model.sched.alpha_bar, dtype=z.dtype)
    shape = (-1, *([1] * (z.ndim - 1)))
    ab_t = ab[t].reshape(shape)
    x0 = (z - torch.sqrt(1.0 - ab_t) * eps_hat) / torch.sqrt(ab_t)
    scaled = (t.to(z.dtype) - model.t_min) * model.TIMESTEP_SCALING
    sd2 = model.SIGMA_DATA**2
    c_skip = (sd2 / (scaled**2 + sd2)).reshape(shape)
    c_out = (scaled / torch.sqrt(scaled**2 + sd2)).reshape(shape)
    return c_skip * z + c_out * x0


def distill_lcm(
    teacher: DenoiserNet,
    sched: NoiseSchedule,
    latents: torch.Tensor,
    labels: torch.Tensor,
    cfg: DistillConfig | None = None,
    seed: int = 0,
) -> tuple[ConsistencyModel, list[float]]:
    """Full distillation loop against frozen teacher weights."""
    cfg = cfg or DistillConfig()
    seed_all(seed)
    model = ConsistencyModel(
        sched,
        skipping_step=cfg.skipping_step,
        num_classes=teacher.num_classes,
    )
    model.init_from_teacher(teacher)
    teacher.requires_grad_(False)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr)
    g = make_generator(seed + 1)
    trace = []
    for _ in range(cfg.steps):
        idx = torch.randint(0, len(latents), (cfg.batch_size,), generator=g)
        loss = lcd_train_step(model, teacher, sched, cfg, (latents[idx], labels[idx]), opt, g)
        trace.append(loss)
    return model, trace


def lcm_sample_differentiable(
    model: ConsistencyModel,
    n_steps: int,
    z_T: torch.Tensor,
    delta: torch.Tensor | None,
    label,
    omega: float,
) -> torch.Tensor:
    """K-step sampling with per-step delta injection, differentiable in delta.

    Each step adds delta to the running latent and applies the consistency
    prediction; the chain is kept in the autograd graph so a downstream loss
    reaches the injected perturbation through every step.
    """
    z = z_T
    for t in model.step_plan(n_steps):
        z_tilde = z + delta if delta is not None else z
        z = model.forward(z_tilde, t, omega, label)
    return z
