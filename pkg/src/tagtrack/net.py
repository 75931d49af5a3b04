"""Fully convolutional posterior network for the velocity field."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .losses import PosteriorParams


@dataclass(frozen=True)
class NetConfig:
    enc: tuple[int, ...] = (16, 32, 32, 32)
    dec: tuple[int, ...] = (32, 32, 32, 16)
    kernel: int = 3
    slope: float = 0.2
    # interior optimum of the KL term, -log(4 * lam) at lam = 10
    log_var_init: float = -math.log(40.0)

    def __post_init__(self):
        object.__setattr__(self, "enc", tuple(int(c) for c in self.enc))
        object.__setattr__(self, "dec", tuple(int(c) for c in self.dec))
        if len(self.enc) < 2:
            raise ValueError("encoder depth must be >= 2")
        if len(self.dec) != len(self.enc):
            raise ValueError("decoder must have one width per encoder level")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def stride(self) -> int:
        """Total downsampling factor; inputs must be divisible by it."""
        return 2 ** len(self.enc)

    def to_dict(self) -> dict:
        return asdict(self)


class PosteriorNet(nn.Module):
    """Encoder-decoder with skip connections mapping a frame pair to
    per-pixel mean and log-variance of the stationary velocity field.

    Encoder levels halve the resolution with strided convolutions; the
    decoder upsamples by nearest neighbour and concatenates the matching
    encoder activation (the raw input pair at full resolution).
    """

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        k, pad = cfg.kernel, cfg.kernel // 2
        self.enc = nn.ModuleList()
        prev = 2
        skips = [2]
        for width in cfg.enc:
            self.enc.append(nn.Conv2d(prev, width, k, stride=2, padding=pad))
            prev = width
            skips.append(width)
        # skips[i] is the channel count at resolution 1 / 2**i
        self.dec = nn.ModuleList()
        for level, width in enumerate(cfg.dec):
            self.dec.append(nn.Conv2d(prev, width, k, padding=pad))
            prev = width + skips[len(cfg.enc) - 1 - level]
        self.final = nn.Conv2d(prev, cfg.dec[-1], k, padding=pad)
        self.mu_head = nn.Conv2d(cfg.dec[-1], 2, k, padding=pad)
        self.log_var_head = nn.Conv2d(cfg.dec[-1], 2, k, padding=pad)
        # variance-preserving trunk init; the default one washes out image content
        for conv in [*self.enc, *self.dec, self.final]:
            nn.init.kaiming_normal_(conv.weight, a=cfg.slope, nonlinearity="leaky_relu")
            nn.init.zeros_(conv.bias)
        nn.init.zeros_(self.mu_head.weight)
        nn.init.zeros_(self.mu_head.bias)
        nn.init.zeros_(self.log_var_head.weight)
        nn.init.constant_(self.log_var_head.bias, cfg.log_var_init)

    def forward(self, x: Tensor, y: Tensor) -> PosteriorParams:
        """``x`` is the moving image, ``y`` the fixed one; both ``(B, H, W)``."""
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
        if x.dim() == 2:
            return self.forward(x[None], y[None])[0]
        h, w = x.shape[-2:]
        s = self.cfg.stride
        if h % s or w % s:
            raise ValueError(f"image size {h}x{w} must be divisible by {s}")
        a = torch.stack((x, y), dim=1)
        acts = [a]
        for conv in self.enc:
            a = F.leaky_relu(conv(a), self.cfg.slope)
            acts.append(a)
        for level, conv in enumerate(self.dec):
            a = F.leaky_relu(conv(a), self.cfg.slope)
            a = F.interpolate(a, scale_factor=2, mode="nearest")
            a = torch.cat((a, acts[len(self.enc) - 1 - level]), dim=1)
        a = F.leaky_relu(self.final(a), self.cfg.slope)
        return PosteriorParams(self.mu_head(a), self.log_var_head(a))


def sample_z(post: PosteriorParams, generator: torch.Generator | int | None = None, samples: int | None = None) -> Tensor:
    """Reparameterized draw ``mu + eps * exp(log_var / 2)``.

    ``generator`` may be a seeded ``torch.Generator`` or an integer seed. With
    ``samples`` set, a leading sample dimension of that size is added.
    """
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    shape = post.mu.shape if samples is None else (samples, *post.mu.shape)
    eps = torch.randn(shape, generator=generator, dtype=post.mu.dtype)
    return post.mu + eps * torch.exp(0.5 * post.log_var)
