"""Encoder and conditional noise-prediction networks.

The noise predictor is a residual U-Net in which every residual block applies
group normalization followed by a per-channel scale and shift computed from a
shared embedding of (timestep, latent code): the timestep enters through a
sinusoidal embedding and the latent code through a linear projection, summed.
The encoder reuses the U-Net's downsampling half (without conditioning) and
ends in global average pooling and a linear head of width 2J.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "LOGVAR_CLAMP",
    "EncoderOutput",
    "NetworkConfig",
    "Encoder",
    "ConditionalUNet",
    "build_networks",
    "reparameterize",
    "count_parameters",
]

# Keeps exp(log_sigma2) finite in the KL terms.
LOGVAR_CLAMP = 20.0


class EncoderOutput(NamedTuple):
    """Variational posterior parameters (mu_phi, log sigma^2_phi), each (B, J)."""

    mu_phi: torch.Tensor
    log_sigma2_phi: torch.Tensor


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters shared by the encoder and the noise predictor."""

    image_shape: Tuple[int, int, int]  # (C, H, W)
    latent_dim: int
    base_channels: int = 16
    channel_mults: Tuple[int, ...] = (1, 2)
    groups: int = 4
    seed: int = 0

    def __post_init__(self):
        c, h, w = self.image_shape
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.base_channels < 1 or any(m < 1 for m in self.channel_mults):
            raise ValueError("channel widths must be positive")
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        factor = 2 ** (len(self.channel_mults) - 1)
        if h % factor or w % factor:
            raise ValueError(f"image size {h}x{w} not divisible by downsampling factor {factor}")
        for mult in self.channel_mults:
            if (self.base_channels * mult) % self.groups:
                raise ValueError(
                    f"group count {self.groups} must divide channel width {self.base_channels * mult}"
                )

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def emb_dim(self) -> int:
        return 4 * self.base_channels

    def to_dict(self):
        return {
            "image_shape": list(self.image_shape),
            "latent_dim": self.latent_dim,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "groups": self.groups,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            image_shape=tuple(d["image_shape"]),
            latent_dim=int(d["latent_dim"]),
            base_channels=int(d["base_channels"]),
            channel_mults=tuple(d["channel_mults"]),
            groups=int(d["groups"]),
            seed=int(d["seed"]),
        )


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype if t.is_floating_point() else torch.get_default_dtype(), device=t.device) / half
    )
    args = t.float().to(freqs.dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class CondResBlock(nn.Module):
    """Residual block with adaptive group normalization conditioning."""

    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb_proj(F.silu(emb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class PlainResBlock(nn.Module):
    """Unconditioned residual block (encoder half)."""

    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalUNet(nn.Module):
    """Noise predictor eps_theta(x_t, t, z)."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        c_img = config.image_shape[0]
        widths = config.widths
        emb = config.emb_dim
        g = config.groups

        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_channels, emb), nn.SiLU(), nn.Linear(emb, emb)
        )
        self.z_proj = nn.Linear(config.latent_dim, emb)

        self.stem = nn.Conv2d(c_img, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down_blocks.append(CondResBlock(prev, w, emb, g))
            prev = w
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid = CondResBlock(widths[-1], widths[-1], emb, g)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        prev = widths[-1]
        for i in reversed(range(len(widths))):
            self.up_blocks.append(CondResBlock(prev + widths[i], widths[i], emb, g))
            prev = widths[i]
            if i > 0:
                self.upsamples.append(nn.Conv2d(widths[i], widths[i - 1], 3, padding=1))
                prev = widths[i - 1]
        self.out_norm = nn.GroupNorm(g, widths[0])
        self.out_conv = nn.Conv2d(widths[0], c_img, 3, padding=1)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if tuple(x_t.shape[1:]) != cfg.image_shape:
            raise ValueError(f"x_t shape {tuple(x_t.shape[1:])} != configured {cfg.image_shape}")
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ValueError(f"z must be (B, {cfg.latent_dim}), got {tuple(z.shape)}")
        if not isinstance(t, torch.Tensor):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
        emb = self.time_mlp(sinusoidal_embedding(t, cfg.base_channels).to(x_t.dtype))
        emb = emb + self.z_proj(z.to(x_t.dtype))

        h = self.stem(x_t)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        h = self.mid(h, emb)
        for i, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if i < len(self.upsamples):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)
        return self.out_conv(F.silu(self.out_norm(h)))


class Encoder(nn.Module):
    """Variational encoder f_phi(x0) -> (mu_phi, log sigma^2_phi)."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        g = config.groups
        self.stem = nn.Conv2d(config.image_shape[0], widths[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.blocks.append(PlainResBlock(prev, w, g))
            prev = w
            if i < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.out_norm = nn.GroupNorm(g, widths[-1])
        self.head = nn.Linear(widths[-1], 2 * config.latent_dim)

    def forward(self, x0: torch.Tensor) -> EncoderOutput:
        if tuple(x0.shape[1:]) != self.config.image_shape:
            raise ValueError(
                f"x0 shape {tuple(x0.shape[1:])} != configured {self.config.image_shape}"
            )
        h = self.stem(x0)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        h = F.silu(self.out_norm(h)).mean(dim=(2, 3))
        out = self.head(h)
        mu, logvar = out.chunk(2, dim=-1)
        return EncoderOutput(mu, logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))


def reparameterize(enc: EncoderOutput, eps: torch.Tensor) -> torch.Tensor:
    """z = mu_phi + exp(0.5 * log sigma^2_phi) * eps, elementwise."""
    if eps.shape != enc.mu_phi.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != mu shape {tuple(enc.mu_phi.shape)}")
    return enc.mu_phi + torch.exp(0.5 * enc.log_sigma2_phi) * eps


def build_networks(config: NetworkConfig) -> Tuple[Encoder, ConditionalUNet]:
    """Construct (encoder, noise predictor) with parameters seeded from config.seed."""
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        encoder = Encoder(config)
        unet = ConditionalUNet(config)
    return encoder, unet


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
