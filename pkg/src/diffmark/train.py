"""Dual-path watermark training loop with curriculum gating.

Every step runs two sampler paths from the same initial noise: a short
differentiable consistency-model path that carries encoder gradients, and a
full-length detached DDIM path that supervises the decoder on realistic
latents. Imperceptibility and false-positive losses activate only once the
reconstruction phase has established a decodable signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import (
    SecretDecoder,
    SecretEncoder,
    bit_accuracy,
    ce_loss,
    kl_loss,
    mag_loss,
    delta_std,
    random_secrets,
)
from .diffusion import CfgConfig, ddim_sample
from .errors import NumericError
from .lcm import ConsistencyModel, lcm_sample_differentiable
from .losses import anneal_sigma_target, freq_loss, lafid_loss, neg_entropy_loss, prvl_loss
from .nets import DenoiserNet
from .schedule import NoiseSchedule
from .util import fmt, make_generator, write_csv
from .vae import ToyVAE

INJECTION_POLICIES = ("full", "one_over_N")


@dataclass(frozen=True)
class CurriculumConfig:
    """Gates, annealing, and loss weights for the main training loop."""

    tau_rec: int = 0
    tau_imp: int = 500
    sigma_start: float = 0.10
    sigma_end: float = 0.05
    anneal_horizon: int = 2000
    beta_start: float = 0.001
    beta_end: float = 0.05
    beta_warmup: int = 400
    w_lcm: float = 1.0
    w_ddim: float = 1.0
    w_mag: float = 5.0
    w_orth: float = 0.1
    w_prvl: float = 1.5
    w_lafid: float = 0.1
    w_freq: float = 0.5
    w_neg: float = 0.01
    w_regen: float = 1.0

    def __post_init__(self):
        if self.tau_rec > self.tau_imp:
            raise ValueError("reconstruction gates must open before imperceptibility gates")
        if not (self.sigma_start > self.sigma_end > 0):
            raise ValueError("sigma annealing requires sigma_start > sigma_end > 0")

    def beta(self, t: int) -> float:
        frac = min(t / self.beta_warmup, 1.0) if self.beta_warmup > 0 else 1.0
        return self.beta_start + (self.beta_end - self.beta_start) * frac

    def sigma_target(self, t: int) -> float:
        return anneal_sigma_target(t, self.sigma_start, self.sigma_end, self.anneal_horizon)

    def imp_active(self, t: int) -> bool:
        return t >= self.tau_imp


@dataclass
class WatermarkTrainConfig:
    steps: int = 4000
    batch_size: int = 8
    ddim_steps: int = 10
    lcm_steps: int = 4
    guidance_scale: float = 2.0
    omega: float = 2.0
    lr_encoder: float = 5e-5
    lr_decoder: float = 3e-4
    lr_warmup: int = 200
    lr_floor: float = 1e-6
    clip_encoder: float = 5.0
    clip_decoder: float = 1.0
    ddim_injection: str = "one_over_N"
    freq_radius: float = 2.0
    prvl_kernel: int = 32
    log_every: int = 25
    checkpoint_every: int = 2000
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)

    def __post_init__(self):
        if self.ddim_injection not in INJECTION_POLICIES:
            raise ValueError(f"unknown injection policy {self.ddim_injection!r}")


METRIC_COLUMNS = [
    "step",
    "loss_lcm",
    "loss_ddim",
    "loss_mag",
    "loss_kl",
    "loss_lafid",
    "loss_prvl",
    "loss_freq",
    "loss_neg",
    "loss_regen",
    "std_delta",
    "sigma_target",
    "bit_acc_lcm",
    "bit_acc_ddim",
    "clean_ber",
    "config_hash",
]


class TrainState:
    """Step counter, optimizer, and RNG; checkpoints restore all three."""

    def __init__(self, enc: SecretEncoder, dec: SecretDecoder, cfg: WatermarkTrainConfig, seed: int):
        self.step = 0
        self.seed = seed
        self.cfg = cfg
        self.generator = make_generator(seed)
        self.opt = torch.optim.AdamW(
            [
                {"params": list(enc.parameters()), "lr": cfg.lr_encoder},
                {"params": list(dec.parameters()), "lr": cfg.lr_decoder},
            ]
        )
        self.base_lrs = (cfg.lr_encoder, cfg.lr_decoder)

    def lr_at(self, step: int, base: float) -> float:
        cfg = self.cfg
        if cfg.lr_warmup > 0 and step <= cfg.lr_warmup:
            return base * step / cfg.lr_warmup
        span = max(cfg.steps - cfg.lr_warmup, 1)
        frac = min((step - cfg.lr_warmup) / span, 1.0)
        return base + (cfg.lr_floor - base) * frac

    def apply_lr(self, step: int) -> None:
        for group, base in zip(self.opt.param_groups, self.base_lrs):
            group["lr"] = self.lr_at(step, base)


def _check_finite(breakdown: dict) -> None:
    bad = {k: v for k, v in breakdown.items() if isinstance(v, float) and v != v}
    if bad:
        raise NumericError("non-finite loss encountered", diagnostics=breakdown)


def train_step(
    state: TrainState,
    enc: SecretEncoder,
    dec: SecretDecoder,
    denoiser: DenoiserNet,
    lcm: ConsistencyModel,
    vae: ToyVAE,
    sched: NoiseSchedule,
    batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
) -> dict:
    """One optimization step; returns the loss breakdown and step metrics.

    The consistency-model path carries gradients to the encoder; the DDIM
    path runs on a stop-gradient copy of the perturbation (scaled by the
    configured injection policy) and reaches only the decoder. The VAE
    round-trip term re-encodes the decoded DDIM output so the decoder sees
    codec-degraded latents.
    """
    cfg = state.cfg
    cur = cfg.curriculum
    secrets, z_T, labels = batch
    t = state.step + 1

    pert = enc(secrets, sample=True, generator=state.generator)
    delta = pert.delta

    z0_lcm = lcm_sample_differentiable(lcm, cfg.lcm_steps, z_T, delta, labels, cfg.omega)
    logits_lcm = dec(z0_lcm)
    loss_lcm = ce_loss(logits_lcm, secrets)

    ddim_scale = 1.0 / cfg.ddim_steps if cfg.ddim_injection == "one_over_N" else 1.0
    z0_ddim = ddim_sample(
        denoiser,
        sched,
        cfg.ddim_steps,
        labels,
        CfgConfig(cfg.guidance_scale),
        z_T,
        delta=delta.detach(),
        injection_scale=ddim_scale,
    )
    logits_ddim = dec(z0_ddim)
    loss_ddim = ce_loss(logits_ddim, secrets)

    sigma_target = cur.sigma_target(t)
    loss_mag = mag_loss(delta, sigma_target)
    beta = cur.beta(t)
    loss_kl = kl_loss(pert.mu, pert.log_var)

    total = (
        cur.w_lcm * loss_lcm
        + cur.w_ddim * loss_ddim
        + cur.w_mag * loss_mag
        + beta * loss_kl
    )
    breakdown = {
        "loss_lcm": float(loss_lcm.detach()),
        "loss_ddim": float(loss_ddim.detach()),
        "loss_mag": float(loss_mag.detach()),
        "loss_kl": float(loss_kl.detach()),
    }

    if cur.imp_active(t):
        with torch.no_grad():
            z0_clean = lcm_sample_differentiable(lcm, cfg.lcm_steps, z_T, None, labels, cfg.omega)
            x_clean = vae.decode(z0_clean)
        if cur.w_lafid != 0.0:
            loss_lafid = lafid_loss(z0_lcm, z0_clean)
            total = total + cur.w_lafid * loss_lafid
            breakdown["loss_lafid"] = float(loss_lafid.detach())
        if cur.w_prvl != 0.0:
            x_wm = vae.decode(z0_lcm)
            loss_prvl = prvl_loss(x_wm, x_clean, cfg.prvl_kernel)
            total = total + cur.w_prvl * loss_prvl
            breakdown["loss_prvl"] = float(loss_prvl.detach())
        if cur.w_freq != 0.0:
            loss_freq = freq_loss(delta, cfg.freq_radius)
            total = total + cur.w_freq * loss_freq
            breakdown["loss_freq"] = float(loss_freq.detach())
        if cur.w_neg != 0.0:
            loss_neg = neg_entropy_loss(dec, z0_clean)
            total = total + cur.w_neg * loss_neg
            breakdown["loss_neg"] = float(loss_neg.detach())
        if cur.w_regen != 0.0:
            with torch.no_grad():
                z0_regen = vae.encode(torch.clamp(vae.decode(z0_ddim), -1.0, 1.0))
            loss_regen = ce_loss(dec(z0_regen), secrets)
            total = total + cur.w_regen * loss_regen
            breakdown["loss_regen"] = float(loss_regen.detach())

    _check_finite(breakdown)

    state.apply_lr(t)
    state.opt.zero_grad()
    total.backward()
    torch.nn.utils.clip_grad_norm_(enc.parameters(), cfg.clip_encoder)
    torch.nn.utils.clip_grad_norm_(dec.parameters(), cfg.clip_decoder)
    state.opt.step()
    state.step = t

    breakdown["total"] = float(total.detach())
    breakdown["std_delta"] = float(delta_std(delta.detach()))
    breakdown["sigma_target"] = sigma_target
    breakdown["bit_acc_lcm"] = bit_accuracy(logits_lcm, secrets)
    breakdown["bit_acc_ddim"] = bit_accuracy(logits_ddim, secrets)
    return breakdown


def clean_ber(
    dec: SecretDecoder,
    lcm: ConsistencyModel,
    cfg: WatermarkTrainConfig,
    secrets: torch.Tensor,
    z_T: torch.Tensor,
    labels: torch.Tensor,
) -> float:
    """BER of decoded clean (non-injected) latents against the batch secrets."""
    with torch.no_grad():
        z0 = lcm_sample_differentiable(lcm, cfg.lcm_steps, z_T, None, labels, cfg.omega)
        logits = dec(z0)
    return 1.0 - bit_accuracy(logits, secrets)


@dataclass
class TrainResult:
    metrics: list
    stopped_at: int
    stop_reason: str


def run_training(
    enc: SecretEncoder,
    dec: SecretDecoder,
    denoiser: DenoiserNet,
    lcm: ConsistencyModel,
    vae: ToyVAE,
    sched: NoiseSchedule,
    cfg: WatermarkTrainConfig,
    seed: int = 0,
    out_dir=None,
    config_hash: str = "",
    stop_fn=None,
    state: TrainState | None = None,
) -> TrainResult:
    """Full training loop with metric CSV emission and periodic checkpoints.

    `stop_fn(step, breakdown)` may end the run early (used by the collapse
    probe); passing a restored TrainState resumes mid-run.
    """
    denoiser.requires_grad_(False)
    lcm.net.requires_grad_(False)
    for p in vae.parameters():
        p.requires_grad_(False)
    enc.train()
    dec.train()
    if state is None:
        state = TrainState(enc, dec, cfg, seed)
    num_classes = denoiser.num_classes
    rows = []
    stop_reason = "completed"
    latent_shape = enc.latent_shape
    step = state.step
    while state.step < cfg.steps:
        g = state.generator
        secrets = random_secrets(cfg.batch_size, enc.secret_length, g)
        z_T = torch.randn((cfg.batch_size, *latent_shape), generator=g)
        labels = torch.randint(0, num_classes, (cfg.batch_size,), generator=g)
        breakdown = train_step(state, enc, dec, denoiser, lcm, vae, sched, (secrets, z_T, labels))
        step = state.step
        if step % cfg.log_every == 0 or step == cfg.steps:
            breakdown["clean_ber"] = clean_ber(dec, lcm, cfg, secrets, z_T, labels)
            rows.append({"step": step, **breakdown})
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_train_state(f"{out_dir}/state-{step:06d}", enc, dec, state)
        if stop_fn is not None and stop_fn(step, breakdown):
            stop_reason = "stop_fn"
            break
    if out_dir is not None:
        save_train_state(f"{out_dir}/state-final", enc, dec, state)
        write_metrics_csv(f"{out_dir}/metrics.csv", rows, config_hash)
    return TrainResult(rows, step, stop_reason)


def write_metrics_csv(path, rows: list, config_hash: str) -> None:
    out = []
    for row in rows:
        out.append(
            [row.get("step", "")]
            + [fmt(row[c]) if c in row else "" for c in METRIC_COLUMNS[1:-1]]
            + [config_hash]
        )
    write_csv(path, METRIC_COLUMNS, out)


def save_train_state(directory, enc: SecretEncoder, dec: SecretDecoder, state: TrainState):
    """Persist codec weights, optimizer tensors, and RNG state for exact resume."""
    params = {}
    params.update({f"encoder.{k}": v for k, v in enc.state_dict().items()})
    params.update({f"decoder.{k}": v for k, v in dec.state_dict().items()})
    opt_state = state.opt.state_dict()
    for idx, entry in opt_state["state"].items():
        for key, value in entry.items():
            params[f"optim.{idx}.{key}"] = value
    extra = {
        "step": state.step,
        "seed": state.seed,
        "rng_state": state.generator.get_state().numpy().tobytes().hex(),
        "param_groups": [
            {k: v for k, v in group.items() if k != "params"}
            for group in opt_state["param_groups"]
        ],
        "group_sizes": [len(group["params"]) for group in opt_state["param_groups"]],
    }
    config = {
        "secret_length": enc.secret_length,
        "embed_dim": enc.embed_dim,
        "latent_shape": list(enc.latent_shape),
        "alpha": float(enc.alpha),
    }
    return save_checkpoint(
        directory, "train-state", params, config,
        cfg_convention="eq6_affine", seeds={"train": state.seed}, extra=extra,
    )


def load_train_state(
    directory,
    enc: SecretEncoder,
    dec: SecretDecoder,
    cfg: WatermarkTrainConfig,
) -> TrainState:
    ckpt = load_checkpoint(directory)
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
    enc.load_state_dict(enc_state)
    dec.load_state_dict(dec_state)
    extra = ckpt.manifest["extra"]
    state = TrainState(enc, dec, cfg, seed=int(extra["seed"]))
    state.step = int(extra["step"])
    n_params = sum(extra["group_sizes"])
    opt_entries = {}
    for idx in range(n_params):
        entry = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            name = f"optim.{idx}.{key}"
            if name in ckpt.params:
                tensor = torch.from_numpy(ckpt.params[name].copy())
                entry[key] = tensor.reshape(()) if key == "step" else tensor
        if entry:
            opt_entries[idx] = entry
    groups = []
    start = 0
    for size, saved in zip(extra["group_sizes"], extra["param_groups"]):
        group = dict(saved)
        group["params"] = list(range(start, start + size))
        groups.append(group)
        start += size
    state.opt.load_state_dict({"state": opt_entries, "param_groups": groups})
    rng = torch.tensor(
        list(bytes.fromhex(extra["rng_state"])), dtype=torch.uint8
    )
    state.generator.set_state(rng)
    return state


def collapse_probe(
    enc: SecretEncoder,
    dec: SecretDecoder,
    denoiser: DenoiserNet,
    lcm: ConsistencyModel,
    vae: ToyVAE,
    sched: NoiseSchedule,
    cfg: WatermarkTrainConfig,
    seed: int,
    use_curriculum: bool,
    max_steps: int,
    acc_threshold: float = 0.75,
) -> dict:
    """Race the perturbation-collapse condition against decoder accuracy.

    Returns which event happened first: std(delta) dropping below
    0.1 * sigma_start, or either path's bit accuracy exceeding the
    threshold. With the curriculum disabled, all imperceptibility losses
    are active from step 0.
    """
    cur = cfg.curriculum if use_curriculum else replace(cfg.curriculum, tau_imp=0)
    probe_cfg = replace(cfg, steps=max_steps)
    probe_cfg = replace(probe_cfg, curriculum=cur)
    outcome = {"collapsed_first": False, "acc_first": False, "step": None}
    std_floor = 0.1 * cur.sigma_start

    def stop(step, breakdown):
        acc = max(breakdown["bit_acc_lcm"], breakdown["bit_acc_ddim"])
        if acc > acc_threshold:
            outcome.update(acc_first=True, step=step)
            return True
        if breakdown["std_delta"] < std_floor:
            outcome.update(collapsed_first=True, step=step)
            return True
        return False

    run_training(
        enc, dec, denoiser, lcm, vae, sched, probe_cfg,
        seed=seed, stop_fn=stop,
    )
    return outcome
