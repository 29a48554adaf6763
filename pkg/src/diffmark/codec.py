"""Secret-to-perturbation encoder, single-pass decoder, and their pretraining.

The encoder looks up one of two learned embeddings per bit position, sums
them into a secret vector, modulates a learned spatial basis with it, and
refines the result into the mean and log-variance of a diagonal Gaussian
over the latent perturbation. A learnable positive scalar scales the output
globally. The decoder is a strided conv stack plus an MLP head emitting two
logits per bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, module_params, save_checkpoint
from .util import make_generator, seed_all


@dataclass
class Perturbation:
    """Latent perturbation with its variational parameters.

    delta = mu + exp(log_var / 2) * eta during training (eta standard
    normal), and delta = mu at inference. mu / log_var already include the
    global scale, so the identity above holds as written.
    """

    delta: torch.Tensor
    mu: torch.Tensor
    log_var: torch.Tensor


def random_secrets(n: int, length: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return torch.randint(0, 2, (n, length), generator=generator)


def secret_to_hex(bits: torch.Tensor) -> str:
    """Bits (MSB first) -> fixed-width lowercase hex."""
    bits = bits.reshape(-1).tolist()
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    width = (len(bits) + 3) // 4
    return format(value, f"0{width}x")


def hex_to_secret(text: str, length: int) -> torch.Tensor:
    value = int(text.strip(), 16)
    if value >= (1 << length):
        raise ValueError(f"hex key {text!r} does not fit in {length} bits")
    bits = [(value >> (length - 1 - i)) & 1 for i in range(length)]
    return torch.tensor(bits, dtype=torch.long)


class SecretEncoder(nn.Module):
    """Maps an L-bit secret to a latent perturbation distribution."""

    def __init__(
        self,
        secret_length: int = 16,
        embed_dim: int = 64,
        latent_shape: tuple[int, int, int] = (4, 8, 8),
        alpha_init: float = 0.1,
    ):
        super().__init__()
        c, h, w = latent_shape
        self.secret_length = secret_length
        self.embed_dim = embed_dim
        self.latent_shape = tuple(latent_shape)
        # antipodal row pairs make random secrets' codes uncorrelated in
        # expectation; the amplified conv init puts the refinement stack in a
        # mixing regime that decorrelates distinct secrets well beyond the
        # linear-code level, which the orthogonality objective then preserves
        emb = torch.randn(secret_length, 2, embed_dim)
        emb[:, 1] = -emb[:, 0] + 0.05 * torch.randn(secret_length, embed_dim)
        self.bit_embeddings = nn.Parameter(emb.reshape(2 * secret_length, embed_dim))
        self.spatial_basis = nn.Parameter(torch.randn(embed_dim, h, w))
        self.refine = nn.Sequential(
            nn.Conv2d(embed_dim, 32, 3, padding=1),
            nn.SiLU(),
            nn.BatchNorm2d(32),
            nn.Conv2d(32, 16, 3, padding=1),
            nn.SiLU(),
            nn.BatchNorm2d(16),
            nn.Conv2d(16, 8, 3, padding=1),
            nn.SiLU(),
        )
        self.mu_head = nn.Conv2d(8, c, 3, padding=1)
        self.log_var_head = nn.Conv2d(8, c, 3, padding=1)
        with torch.no_grad():
            for mod in (*self.refine, self.mu_head, self.log_var_head):
                if isinstance(mod, nn.Conv2d):
                    mod.weight.mul_(3.0)
        # stored in log space so the global scale stays positive
        self.log_alpha = nn.Parameter(torch.tensor(math.log(alpha_init)))

    @property
    def alpha(self) -> torch.Tensor:
        return torch.exp(self.log_alpha)

    def forward(
        self,
        secrets: torch.Tensor,
        sample: bool = False,
        generator: torch.Generator | None = None,
    ) -> Perturbation:
        if secrets.ndim == 1:
            secrets = secrets.unsqueeze(0)
        if secrets.shape[1] != self.secret_length:
            raise ValueError(
                f"secret length {secrets.shape[1]} != configured {self.secret_length}"
            )
        idx = 2 * torch.arange(self.secret_length, device=secrets.device) + secrets.long()
        x = self.bit_embeddings[idx].sum(dim=1)  # (B, d_e)
        lifted = x[:, :, None, None] * self.spatial_basis[None]
        h = self.refine(lifted)
        alpha = self.alpha
        mu = alpha * self.mu_head(h)
        log_var = self.log_var_head(h) + 2.0 * self.log_alpha
        if sample:
            eta = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            delta = mu + torch.exp(0.5 * log_var) * eta
        else:
            delta = mu
        return Perturbation(delta=delta, mu=mu, log_var=log_var)

    def param_breakdown(self) -> dict:
        refine = sum(p.numel() for p in self.refine.parameters())
        heads = sum(p.numel() for p in self.mu_head.parameters()) + sum(
            p.numel() for p in self.log_var_head.parameters()
        )
        return {
            "bit_embeddings": self.bit_embeddings.numel(),
            "spatial_basis": self.spatial_basis.numel(),
            "refinement": refine,
            "heads": heads,
            "alpha": 1,
        }


class SecretDecoder(nn.Module):
    """Strided conv feature extractor plus 3-layer MLP head, (L, 2) logits.

    Downsample depth follows the latent size (log2(h) - 1 blocks), doubling
    channels per block from 8; BatchNorm is omitted on the final block.
    """

    def __init__(
        self,
        secret_length: int = 16,
        latent_shape: tuple[int, int, int] = (4, 8, 8),
        mlp_hidden: tuple[int, int] = (1024, 512),
    ):
        super().__init__()
        c, h, w = latent_shape
        if h != w or h & (h - 1):
            raise ValueError("latent spatial size must be square power of two")
        self.secret_length = secret_length
        self.latent_shape = tuple(latent_shape)
        depth = int(math.log2(h)) - 1
        layers: list[nn.Module] = [nn.Conv2d(c, 8, 3, padding=1), nn.SiLU()]
        ch = 8
        for i in range(depth):
            layers.append(nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1))
            layers.append(nn.SiLU())
            if i < depth - 1:
                layers.append(nn.BatchNorm2d(ch * 2))
            ch *= 2
        self.features = nn.Sequential(*layers)
        flat = ch * (h // 2**depth) * (w // 2**depth)
        self.head = nn.Sequential(
            nn.Linear(flat, mlp_hidden[0]),
            nn.SiLU(),
            nn.Linear(mlp_hidden[0], mlp_hidden[1]),
            nn.SiLU(),
            nn.Linear(mlp_hidden[1], 2 * secret_length),
        )

    def forward(self, z0: torch.Tensor) -> torch.Tensor:
        if z0.ndim == 3:
            z0 = z0.unsqueeze(0)
        if tuple(z0.shape[1:]) != self.latent_shape:
            raise ValueError(
                f"latent shape {tuple(z0.shape[1:])} != configured {self.latent_shape}"
            )
        h = self.features(z0).flatten(1)
        logits = self.head(h)
        return logits.reshape(-1, self.secret_length, 2)


def hard_decision(logits: torch.Tensor) -> torch.Tensor:
    """Per-bit argmax over the two logits."""
    return logits.argmax(dim=-1)


def ce_loss(logits: torch.Tensor, secrets: torch.Tensor) -> torch.Tensor:
    """Mean per-bit cross entropy between (.., L, 2) logits and {0,1} targets."""
    if logits.shape[:-1] != secrets.shape:
        raise ValueError("logits and secrets disagree on batch/length")
    return F.cross_entropy(logits.reshape(-1, 2), secrets.reshape(-1).long())


def bit_accuracy(logits: torch.Tensor, secrets: torch.Tensor) -> float:
    return float((hard_decision(logits) == secrets).float().mean())


def orth_loss(deltas: torch.Tensor) -> torch.Tensor:
    """Mean pairwise cosine similarity across a batch of perturbations."""
    b = deltas.shape[0]
    if b < 2:
        raise ValueError("orthogonality loss needs a batch of at least 2")
    flat = deltas.reshape(b, -1)
    normed = flat / flat.norm(dim=1, keepdim=True)
    gram = normed @ normed.T
    off_diag = gram.sum() - torch.diagonal(gram).sum()
    return off_diag / (b * (b - 1))


def delta_std(delta: torch.Tensor) -> torch.Tensor:
    """Population standard deviation per perturbation (batch-averaged)."""
    if delta.ndim == 3:
        return delta.std(unbiased=False)
    return delta.reshape(delta.shape[0], -1).std(dim=1, unbiased=False).mean()


def mag_loss(delta: torch.Tensor, sigma_target: float) -> torch.Tensor:
    """Squared deviation of the perturbation's std from its target."""
    return (delta_std(delta) - sigma_target) ** 2


def kl_loss(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) averaged per element."""
    return -0.5 * torch.mean(1 + log_var - mu.square() - log_var.exp())


@dataclass
class PretrainConfig:
    secret_length: int = 16
    embed_dim: int = 64
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    max_steps: int = 50_000
    batch_size: int = 64
    lr_encoder: float = 3e-4
    lr_decoder: float = 1e-4
    sigma_start: float = 0.0
    sigma_end: float = 0.3
    # ramp horizon for the decoder-hardening noise; kept well below the step
    # cap so the curriculum engages before the accuracy stop rule fires
    noise_ramp_steps: int = 2000
    w_clean: float = 1.0
    w_noisy: float = 1.0
    w_orth: float = 0.1
    acc_target: float = 0.99
    acc_patience: int = 10


@dataclass
class PretrainResult:
    steps_run: int
    converged: bool
    final_clean_acc: float
    trace: list = field(default_factory=list, repr=False)


def pretrain(
    enc: SecretEncoder,
    dec: SecretDecoder,
    cfg: PretrainConfig,
    seed: int = 0,
) -> PretrainResult:
    """Joint encoder/decoder pretraining on raw perturbations.

    Trains clean and noise-augmented reconstruction with an orthogonality
    regularizer, ramping the noise level linearly over the step budget.
    Stops once clean accuracy holds at the target for the configured number
    of consecutive steps; hitting the cap instead returns converged=False.
    """
    seed_all(seed)
    g = make_generator(seed + 1)
    opt = torch.optim.AdamW(
        [
            {"params": enc.parameters(), "lr": cfg.lr_encoder},
            {"params": dec.parameters(), "lr": cfg.lr_decoder},
        ]
    )
    enc.train()
    dec.train()
    streak = 0
    trace = []
    acc = 0.0
    step = 0
    for step in range(1, cfg.max_steps + 1):
        s = random_secrets(cfg.batch_size, cfg.secret_length, g)
        # mean-mode deltas: the KL term that calibrates the variational heads
        # only exists in main training, and the noisy branch below already
        # supplies the robustness noise
        pert = enc(s, sample=False)
        logits_clean = dec(pert.delta)
        loss_clean = ce_loss(logits_clean, s)
        ramp = min(step / cfg.noise_ramp_steps, 1.0)
        sigma_n = cfg.sigma_start + (cfg.sigma_end - cfg.sigma_start) * ramp
        noisy = pert.delta + sigma_n * torch.randn(pert.delta.shape, generator=g)
        loss_noisy = ce_loss(dec(noisy), s)
        loss_orth = orth_loss(pert.delta)
        loss = cfg.w_clean * loss_clean + cfg.w_noisy * loss_noisy + cfg.w_orth * loss_orth
        opt.zero_grad()
        loss.backward()
        opt.step()
        acc = bit_accuracy(logits_clean, s)
        trace.append((float(loss.detach()), acc))
        streak = streak + 1 if acc >= cfg.acc_target else 0
        if streak >= cfg.acc_patience:
            return PretrainResult(step, True, acc, trace)
    return PretrainResult(step, False, acc, trace)


def save_codec(
    directory,
    enc: SecretEncoder,
    dec: SecretDecoder,
    seeds: dict | None = None,
    extra: dict | None = None,
):
    params = {}
    params.update({f"encoder.{k}": v for k, v in module_params(enc).items()})
    params.update({f"decoder.{k}": v for k, v in module_params(dec).items()})
    config = {
        "secret_length": enc.secret_length,
        "embed_dim": enc.embed_dim,
        "latent_shape": list(enc.latent_shape),
        "alpha": float(enc.alpha),
    }
    return save_checkpoint(
        directory, "codec", params, config,
        cfg_convention="eq6_affine", seeds=seeds, extra=extra,
    )


def load_codec(directory) -> tuple[SecretEncoder, SecretDecoder]:
    ckpt = load_checkpoint(directory)
    cfg = ckpt.config
    enc = SecretEncoder(
        secret_length=int(cfg["secret_length"]),
        embed_dim=int(cfg["embed_dim"]),
        latent_shape=tuple(cfg["latent_shape"]),
    )
    dec = SecretDecoder(
        secret_length=int(cfg["secret_length"]),
        latent_shape=tuple(cfg["latent_shape"]),
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
    enc.load_state_dict(enc_state)
    dec.load_state_dict(dec_state)
    return enc, dec
