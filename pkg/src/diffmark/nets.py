"""Network architectures: conditional denoiser backbone, VAE codecs, surrogate.

Everything here is deliberately small (latents are 4x8x8, images 3x32x32);
widths follow the 32/64 toy configuration unless widened for transfer
experiments.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class SinusoidalEmbedding(nn.Module):
    """Classic sin/cos positional features of a scalar (timestep or scale)."""

    def __init__(self, dim: int, max_period: float = 10000.0):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("embedding dim must be even")
        self.dim = dim
        self.max_period = max_period
        # tracks the module dtype through .float()/.double() conversions
        self.register_buffer("_dtype_probe", torch.zeros(1), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dtype = self._dtype_probe.dtype
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(self.max_period)
            * torch.arange(half, dtype=dtype, device=x.device)
            / half
        )
        args = x.reshape(-1, 1).to(dtype) * freqs.reshape(1, -1)
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    """3x3 conv residual block with an additive conditioning vector."""

    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class CondUNet(nn.Module):
    """Small conditional UNet over latents.

    Layout: conv-in, two residual blocks with downsampling, bottleneck,
    two residual blocks with upsampling (skip concatenation), conv-out.
    The conditioning embedding is added inside every residual block.
    """

    def __init__(self, channels: int = 4, base_width: int = 32, emb_dim: int = 64):
        super().__init__()
        w1, w2 = base_width, base_width * 2
        self.conv_in = nn.Conv2d(channels, w1, 3, padding=1)
        self.down1 = ResBlock(w1, w1, emb_dim)
        self.down2 = ResBlock(w1, w2, emb_dim)
        self.mid = ResBlock(w2, w2, emb_dim)
        self.up1 = ResBlock(w2 + w2, w2, emb_dim)
        self.up2 = ResBlock(w2 + w1, w1, emb_dim)
        self.conv_out = nn.Conv2d(w1, channels, 3, padding=1)
        # starting from the zero map keeps early denoising steps stable
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, z: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h0 = self.conv_in(z)
        h1 = self.down1(h0, emb)
        h2 = self.down2(F.avg_pool2d(h1, 2), emb)
        m = self.mid(F.avg_pool2d(h2, 2), emb)
        u1 = self.up1(torch.cat([F.interpolate(m, scale_factor=2), h2], dim=1), emb)
        u2 = self.up2(torch.cat([F.interpolate(u1, scale_factor=2), h1], dim=1), emb)
        return self.conv_out(F.silu(u2))


class DenoiserNet(nn.Module):
    """Noise-prediction network conditioned on timestep and class label.

    Label index ``num_classes`` is the dedicated null label used for
    guidance. ``eval_count`` tracks forward passes so tests can assert
    structural properties of sampling and detection paths.
    """

    def __init__(
        self,
        channels: int = 4,
        num_classes: int = 10,
        base_width: int = 32,
        emb_dim: int = 64,
    ):
        super().__init__()
        self.channels = channels
        self.num_classes = num_classes
        self.null_label = num_classes
        self.time_embed = nn.Sequential(
            SinusoidalEmbedding(emb_dim),
            nn.Linear(emb_dim, emb_dim),
            nn.SiLU(),
            nn.Linear(emb_dim, emb_dim),
        )
        self.label_embed = nn.Embedding(num_classes + 1, emb_dim)
        self.unet = CondUNet(channels, base_width, emb_dim)
        self.eval_count = 0

    def conditioning(self, t: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        return self.time_embed(t) + self.label_embed(label)

    def forward(self, z: torch.Tensor, t: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        self.eval_count += 1
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        if label.ndim == 0:
            label = label.expand(z.shape[0])
        return self.unet(z, self.conditioning(t, label))


class ConsistencyNet(nn.Module):
    """Denoiser backbone with an extra guidance-scale embedding channel.

    Output is a noise estimate; the consistency wrapper converts it to a
    clean-latent prediction. Guidance-scale conditioning is zero-initialized
    so a freshly initialized student matches its teacher exactly.
    """

    OMEGA_SCALE = 100.0

    def __init__(
        self,
        channels: int = 4,
        num_classes: int = 10,
        base_width: int = 32,
        emb_dim: int = 64,
    ):
        super().__init__()
        self.channels = channels
        self.num_classes = num_classes
        self.null_label = num_classes
        self.time_embed = nn.Sequential(
            SinusoidalEmbedding(emb_dim),
            nn.Linear(emb_dim, emb_dim),
            nn.SiLU(),
            nn.Linear(emb_dim, emb_dim),
        )
        self.label_embed = nn.Embedding(num_classes + 1, emb_dim)
        self.omega_embed = nn.Sequential(
            SinusoidalEmbedding(emb_dim),
            nn.Linear(emb_dim, emb_dim),
            nn.SiLU(),
            nn.Linear(emb_dim, emb_dim),
        )
        nn.init.zeros_(self.omega_embed[-1].weight)
        nn.init.zeros_(self.omega_embed[-1].bias)
        self.unet = CondUNet(channels, base_width, emb_dim)
        self.eval_count = 0

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        omega: torch.Tensor,
        label: torch.Tensor,
    ) -> torch.Tensor:
        self.eval_count += 1
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        if label.ndim == 0:
            label = label.expand(z.shape[0])
        if omega.ndim == 0:
            omega = omega.expand(z.shape[0])
        emb = (
            self.time_embed(t)
            + self.label_embed(label)
            + self.omega_embed(omega * self.OMEGA_SCALE)
        )
        return self.unet(z, emb)


class VaeEncoderNet(nn.Module):
    """3x32x32 image -> diagonal Gaussian over a 4x8x8 latent."""

    def __init__(self, image_channels: int = 3, latent_channels: int = 4, width: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(image_channels, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width * 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width * 2, width * 2, 4, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Conv2d(width * 2, latent_channels * 2, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.head(self.body(x))
        mu, log_var = torch.chunk(h, 2, dim=1)
        return mu, log_var


class VaeDecoderNet(nn.Module):
    """4x8x8 latent -> 3x32x32 image (unclamped; caller clamps to [-1, 1])."""

    def __init__(self, image_channels: int = 3, latent_channels: int = 4, width: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(latent_channels, width * 2, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(width * 2, width * 2, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(width * 2, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, image_channels, 3, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.body(z)


class SurrogateClassifier(nn.Module):
    """4-layer conv classifier used as the black-box adversarial target."""

    def __init__(self, image_channels: int = 3, num_classes: int = 10, feat_dim: int = 64):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(image_channels, 16, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, 64, 4, stride=2, padding=1),
            nn.SiLU(),
        )
        self.feat = nn.Linear(64 * 2 * 2, feat_dim)
        self.head = nn.Linear(feat_dim, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.convs(x).flatten(1)
        return self.feat(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(F.silu(self.features(x)))
