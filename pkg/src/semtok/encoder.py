"""Toy pretrained encoder, position-wise adapter, tokenization and frozen snapshots.

The encoder is a small ViT: patch embedding, a stack of pre-norm transformer
blocks and a final LayerNorm, producing a ``(B, H/f, W/f, enc_dim)`` feature map.
It stands in for a large foundation encoder behind the same interface.
"""

from __future__ import annotations

import copy
import hashlib
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ImageBatch, LatentBatch, TokenizerConfig
from .errors import DatasetTooSmall, ShapeError


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 2.0, qk_norm: bool = False):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.qk_norm = qk_norm
        if qk_norm:
            self.q_norm = nn.LayerNorm(dim // heads)
            self.k_norm = nn.LayerNorm(dim // heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, N, C = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        if self.qk_norm:
            q, k = self.q_norm(q), self.k_norm(k)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, N, C))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ToyEncoder(nn.Module):
    """ViT-style feature extractor; channel-last in, channel-last out."""

    def __init__(self, image_size: int = 64, f: int = 8, patch_size: int = 8, dim: int = 128,
                 depth: int = 2, heads: int = 4):
        super().__init__()
        if image_size % f:
            raise ShapeError("image_size not divisible by f")
        self.image_size, self.f, self.patch_size, self.dim = image_size, f, patch_size, dim
        self.grid = image_size // f
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.patch_embed.to(memory_format=torch.channels_last)
        self.pos_embed = nn.Parameter(torch.randn(1, self.grid * self.grid, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    @classmethod
    def from_config(cls, cfg: TokenizerConfig) -> "ToyEncoder":
        return cls(cfg.image_size, cfg.f, cfg.patch_size, cfg.enc_dim, cfg.enc_depth, cfg.enc_heads)

    @property
    def last_layer(self) -> nn.Parameter:
        return self.blocks[-1].fc2.weight if len(self.blocks) else self.patch_embed.weight

    def _prepare(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"expected (B, H, W, 3) images, got {tuple(x.shape)}")
        if x.shape[1] != self.image_size or x.shape[2] != self.image_size:
            raise ShapeError(f"encoder expects {self.image_size}x{self.image_size} images, "
                             f"got {x.shape[1]}x{x.shape[2]}")
        x = x.permute(0, 3, 1, 2)
        if self.patch_size != self.f:
            # resize so the patch grid matches the latent grid (H/f, W/f)
            side = self.grid * self.patch_size
            x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False,
                              antialias=side < self.image_size)
        return x

    def forward_layers(self, x: torch.Tensor, upto: Optional[int] = None) -> list:
        """Token maps ``(B, N, dim)`` after the patch embedding and after every block.

        The last map is layer-normed. ``upto`` stops after that many blocks.
        """
        depth = len(self.blocks) if upto is None else min(upto, len(self.blocks))
        x = self.patch_embed(self._prepare(x)).flatten(2).transpose(1, 2) + self.pos_embed
        layers = [x]
        for blk in self.blocks[:depth]:
            x = blk(x)
            layers.append(x)
        if depth == len(self.blocks):
            layers[-1] = self.norm(x)
        return layers

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.forward_layers(x)[-1]
        return tokens.reshape(x.shape[0], self.grid, self.grid, self.dim)


class Adapter(nn.Module):
    """Two-layer MLP applied independently at every spatial position."""

    def __init__(self, in_dim: int = 128, out_dim: int = 32, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or in_dim
        self.in_dim, self.out_dim = in_dim, out_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    @property
    def last_layer(self) -> nn.Parameter:
        return self.fc2.weight

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.in_dim:
            raise ShapeError(f"adapter expects last axis {self.in_dim}, got {feats.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(feats)))


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter's bytes, in registration order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _pixels(x) -> torch.Tensor:
    return x.pixels if isinstance(x, ImageBatch) else x


def _codes(z) -> torch.Tensor:
    return z.codes if isinstance(z, LatentBatch) else z


def encode_features(enc: ToyEncoder, x) -> torch.Tensor:
    return enc(_pixels(x))


def adapt(adp: Adapter, feats) -> LatentBatch:
    feats = _codes(feats)
    if feats.ndim != 4:
        raise ShapeError(f"expected (B, h, w, D) features, got {tuple(feats.shape)}")
    return LatentBatch(adp(feats))


def tokenize(enc: ToyEncoder, adp: Adapter, x) -> LatentBatch:
    return adapt(adp, encode_features(enc, x))


class FrozenTokenizerRef:
    """Immutable deep copy of an (encoder, adapter) pair.

    Produces the regression target for semantic preservation; its outputs never
    carry gradient.
    """

    def __init__(self, encoder: ToyEncoder, adapter: Adapter, stage_tag: str):
        self.encoder = copy.deepcopy(encoder).eval().requires_grad_(False)
        self.adapter = copy.deepcopy(adapter).eval().requires_grad_(False)
        self.stage_tag = stage_tag

    @torch.no_grad()
    def features(self, x) -> torch.Tensor:
        return encode_features(self.encoder, x)

    @torch.no_grad()
    def tokenize(self, x) -> LatentBatch:
        return tokenize(self.encoder, self.adapter, x)

    def checksum(self) -> str:
        return param_checksum(self.encoder) + param_checksum(self.adapter)


def snapshot_frozen(enc: ToyEncoder, adp: Adapter, stage_tag: str) -> FrozenTokenizerRef:
    return FrozenTokenizerRef(enc, adp, stage_tag)


class PerceptualNet(nn.Module):
    """Frozen feature network for perceptual and Frechet-proxy measurements.

    Wraps a private copy of the pretrained encoder; ``layers`` picks which token
    maps of ``forward_layers`` are compared.
    """

    def __init__(self, encoder: ToyEncoder, layers: tuple = (0, 1)):
        super().__init__()
        self.encoder = copy.deepcopy(encoder).eval().requires_grad_(False)
        self.layers = tuple(layers)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list:
        maps = self.encoder.forward_layers(x, upto=max(self.layers))
        return [maps[i] for i in self.layers]

    @torch.no_grad()
    def pooled(self, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        """Mean-pooled final-layer features, ``(N, dim)``."""
        out = [self.encoder(x[i:i + batch_size]).mean(dim=(1, 2)) for i in range(0, x.shape[0], batch_size)]
        return torch.cat(out)


def pretrain_toy_encoder(dataset, epochs: int, seed: int, cfg: Optional[TokenizerConfig] = None,
                         batch_size: int = 64, lr: float = 1e-3, log=None) -> ToyEncoder:
    """Supervised pretraining: mean-pooled features feed a linear classification head.

    Deterministic given ``seed``. ``epochs=0`` returns the seeded random init.
    """
    cfg = cfg or TokenizerConfig(image_size=dataset.images.shape[1])
    counts = torch.bincount(dataset.labels, minlength=dataset.num_classes)
    if dataset.num_classes < 2 or counts.min() < 10:
        raise DatasetTooSmall("pretraining needs >= 2 classes with >= 10 examples each")
    torch.manual_seed(seed)
    enc = ToyEncoder.from_config(cfg)
    head = nn.Linear(enc.dim, dataset.num_classes)
    params = list(enc.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.05)
    g = torch.Generator().manual_seed(seed)
    n = len(dataset)
    steps_per_epoch = max(1, n // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=max(1, epochs * steps_per_epoch),
                                                pct_start=0.1)
    enc.train()
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=g)
        total = 0.0
        for i in range(steps_per_epoch):
            idx = perm[i * batch_size:(i + 1) * batch_size]
            logits = head(enc(dataset.images[idx]).mean(dim=(1, 2)))
            loss = F.cross_entropy(logits, dataset.labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
        if log is not None:
            log(epoch, total / steps_per_epoch)
    return enc.eval()
