"""
Class-Conditioned Denoiser
Purpose: U-Net noise predictor rho_theta(x_t, y, t) with residual blocks
Uses: group normalization (well defined per sample, so DP-SGD applies)

The timestep and class embeddings are projected to a few channel maps and
concatenated to the noisy image before the first convolution.
"""

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigError
from models.seeding import seeded

GROUPS = 8


@dataclass
class DenoiserConfig:
    image_size: int = 32
    image_channels: int = 1
    class_count: int = 10
    timesteps: int = 1000
    widths: Tuple[int, int, int, int] = (16, 64, 128, 256)
    bottleneck_blocks: int = 3
    embed_dim: int = 128
    embed_channels: int = 8
    seed: int = 0

    @classmethod
    def sized(cls, size: str = "default", **kwargs) -> "DenoiserConfig":
        """default or small (every width halved)"""
        if size == "small":
            kwargs.setdefault("widths", (8, 32, 64, 128))
            kwargs.setdefault("embed_dim", 64)
        elif size != "default":
            raise ConfigError(f"Unknown denoiser size {size!r}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["widths"] = list(self.widths)
        payload["kind"] = "denoiser"
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "DenoiserConfig":
        values = {k: v for k, v in payload.items() if k != "kind"}
        values["widths"] = tuple(values["widths"])
        return cls(**values)

    def validate(self):
        if self.image_size % 8 != 0:
            raise ConfigError(f"image size {self.image_size} is not divisible by 8 (three 2x downsamples)")
        if min(self.widths) <= 0 or len(self.widths) != 4:
            raise ConfigError(f"widths must be four positive channel counts, got {self.widths}")
        if any(w % GROUPS for w in self.widths):
            raise ConfigError(f"widths must be multiples of {GROUPS} for group normalization")
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if self.timesteps < 1:
            raise ConfigError("timesteps must be >= 1")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps"""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=t.device, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(GROUPS, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm2 = nn.GroupNorm(GROUPS, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, kernel_size=1)
            if in_channels != out_channels else nn.Identity()
        )

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ConditionalDenoiser(nn.Module):
    """
    Three downsampling and three upsampling stages (1/8 total downsampling)
    with skip connections and a residual bottleneck
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        c0, c1, c2, c3 = config.widths
        d = config.embed_dim

        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.class_embedding = nn.Embedding(config.class_count, d)
        self.embed_proj = nn.Linear(d, config.embed_channels)

        self.in_conv = nn.Conv2d(config.image_channels + config.embed_channels, c0, kernel_size=3, padding=1)
        self.enc0 = ResidualBlock(c0, c0)
        self.enc1 = ResidualBlock(c0, c1)
        self.enc2 = ResidualBlock(c1, c2)
        self.enc3 = ResidualBlock(c2, c3)
        self.bottleneck = nn.Sequential(*[ResidualBlock(c3, c3) for _ in range(config.bottleneck_blocks)])
        self.dec3 = ResidualBlock(c3 + c3, c2)
        self.dec2 = ResidualBlock(c2 + c2, c1)
        self.dec1 = ResidualBlock(c1 + c1, c0)
        self.dec0 = ResidualBlock(c0 + c0, c0)
        self.out_norm = nn.GroupNorm(GROUPS, c0)
        self.out_conv = nn.Conv2d(c0, config.image_channels, kernel_size=3, padding=1)

    def embed(self, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(timestep_embedding(t, self.config.embed_dim)) + self.class_embedding(y)
        return self.embed_proj(F.silu(emb))

    def forward(self, x: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """
        Args:
            x: Noisy images, batch x Ch x H x W
            y: Class labels, batch
            t: Timesteps in [1, T], batch

        Returns:
            Predicted noise with the shape of x
        """
        emb = self.embed(y, t)[:, :, None, None].expand(-1, -1, x.shape[-2], x.shape[-1])
        h0 = self.enc0(self.in_conv(torch.cat([x, emb], dim=1)))
        h1 = self.enc1(F.avg_pool2d(h0, 2))
        h2 = self.enc2(F.avg_pool2d(h1, 2))
        h3 = self.enc3(F.avg_pool2d(h2, 2))

        h = self.bottleneck(h3)
        h = self.dec3(torch.cat([h, h3], dim=1))
        h = self.dec2(torch.cat([F.interpolate(h, scale_factor=2, mode="nearest"), h2], dim=1))
        h = self.dec1(torch.cat([F.interpolate(h, scale_factor=2, mode="nearest"), h1], dim=1))
        h = self.dec0(torch.cat([F.interpolate(h, scale_factor=2, mode="nearest"), h0], dim=1))
        return self.out_conv(F.silu(self.out_norm(h)))


def build_denoiser(config: DenoiserConfig) -> ConditionalDenoiser:
    """Build a denoiser with deterministic initialization under config.seed"""
    config.validate()
    with seeded(config.seed):
        return ConditionalDenoiser(config)
