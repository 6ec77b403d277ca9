"""Convolutional decoder and patch discriminator."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ImageBatch, LatentBatch, TokenizerConfig
from .errors import NormalizedLatentError, ShapeError


class Decoder(nn.Module):
    """Latents ``(B, h, w, d)`` to images ``(B, h*f, w*f, 3)`` in ``[0, 1]``.

    One nearest-neighbour 2x upsample per stage, widths halving from ``width``.
    """

    def __init__(self, d: int = 32, f: int = 8, width: int = 64):
        super().__init__()
        n_up = int(math.log2(f))
        if 2 ** n_up != f:
            raise ShapeError("f must be a power of two")
        self.d, self.f = d, f
        self.conv_in = nn.Conv2d(d, width, 3, padding=1)
        self.mid = nn.Conv2d(width, width, 3, padding=1)
        stages = []
        ch = width
        for _ in range(n_up):
            out = max(ch // 2, 8)
            stages.append(nn.ModuleDict({
                "conv1": nn.Conv2d(ch, out, 3, padding=1),
                "conv2": nn.Conv2d(out, out, 3, padding=1),
            }))
            ch = out
        self.stages = nn.ModuleList(stages)
        self.conv_out = nn.Conv2d(ch, 3, 3, padding=1)
        # inputs arrive channel-last; matching weight layout is ~3x faster on CPU
        self.to(memory_format=torch.channels_last)

    @classmethod
    def from_config(cls, cfg: TokenizerConfig) -> "Decoder":
        return cls(cfg.d, cfg.f, cfg.dec_width)

    @property
    def last_layer(self) -> nn.Parameter:
        return self.conv_out.weight

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[-1] != self.d:
            raise ShapeError(f"decoder expects (B, h, w, {self.d}) latents, got {tuple(z.shape)}")
        h = F.silu(self.conv_in(z.permute(0, 3, 1, 2)))
        h = h + F.silu(self.mid(h))
        for stage in self.stages:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.silu(stage["conv1"](h))
            h = h + F.silu(stage["conv2"](h))
        return torch.sigmoid(self.conv_out(h)).permute(0, 2, 3, 1)


class PatchDiscriminator(nn.Module):
    """Strided conv stack emitting a ``(B, H/2^n, W/2^n, 1)`` patch logit map."""

    def __init__(self, width: int = 32, n_layers: int = 3):
        super().__init__()
        layers = []
        ch = 3
        for i in range(n_layers):
            out = width * 2 ** i
            layers.append(nn.Conv2d(ch, out, 4, stride=2, padding=1))
            ch = out
        self.convs = nn.ModuleList(layers)
        self.head = nn.Conv2d(ch, 1, 1)
        self.to(memory_format=torch.channels_last)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"expected (B, H, W, 3) images, got {tuple(x.shape)}")
        h = x.permute(0, 3, 1, 2) * 2 - 1
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return self.head(h).permute(0, 2, 3, 1)


def decode(dec: Decoder, z) -> ImageBatch:
    if isinstance(z, LatentBatch):
        if z.normalized:
            raise NormalizedLatentError("denormalize latents before decoding")
        z = z.codes
    return ImageBatch(dec(z))


def discriminate(disc: PatchDiscriminator, x) -> torch.Tensor:
    return disc(x.pixels if isinstance(x, ImageBatch) else x)
