"""Flow matching over tokenizer latents: velocity network, training objective,
classifier-free guidance and the Euler sampler.

The path runs from data at ``t = 0`` to Gaussian noise at ``t = 1``:
``z_t = (1 - t) z0 + t z1`` with constant velocity ``u = z1 - z0``. Sampling
integrates from ``t = 1`` back to ``t = 0``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, asdict
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import load_container, save_container
from .datamodel import (LatentBatch, LatentStats, MetricRecord, append_records, compute_latent_stats,
                        denormalize_latents, normalize_latents)
from .encoder import Block
from .errors import ConfigError, DomainError, NonFiniteLoss, ShapeError
from .trainer import ema_update

ALL_CHANNELS = "all"


@dataclass
class DiffusionConfig:
    dim: int = 128
    depth: int = 4
    heads: int = 4
    qk_norm: bool = False
    lr: float = 3e-4
    batch_size: int = 32
    steps: int = 2000
    null_prob: float = 0.1
    ema_decay: float = 0.999
    seed: int = 0


def warmup_decay(decay: float, step: int) -> float:
    # short runs would otherwise sample from a shadow still anchored to the zero-init head
    return min(decay, (1.0 + step) / (10.0 + step))


@dataclass
class SamplerConfig:
    """Euler sampler settings. ``cfg_channels`` is ``"all"`` or the number of leading channels guided."""

    steps: int = 30
    cfg_scale: float = 4.0
    cfg_channels: Union[str, int] = 3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler steps must be >= 1")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")
        if self.cfg_channels != ALL_CHANNELS and int(self.cfg_channels) < 0:
            raise ConfigError("cfg_channels must be 'all' or a non-negative channel count")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def sincos_2d(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sin/cos position table ``(h*w, dim)``; works for any grid."""
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                            indexing="ij")
    out = [torch.sin(ys.reshape(-1, 1) * omega), torch.cos(ys.reshape(-1, 1) * omega),
           torch.sin(xs.reshape(-1, 1) * omega), torch.cos(xs.reshape(-1, 1) * omega)]
    table = torch.cat(out, dim=1)
    return F.pad(table, (0, dim - table.shape[1])).to(dtype)


class VelocityNet(nn.Module):
    """Transformer over latent positions (patch size 1) predicting the flow velocity.

    Class id ``num_classes`` is the null (unconditional) label.
    """

    def __init__(self, d: int = 32, num_classes: int = 10, dim: int = 128, depth: int = 4, heads: int = 4,
                 qk_norm: bool = False):
        super().__init__()
        self.d, self.num_classes, self.dim = d, num_classes, dim
        self.in_proj = nn.Linear(d, dim)
        self.t_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.class_emb = nn.Embedding(num_classes + 1, dim)
        self.blocks = nn.ModuleList(Block(dim, heads, qk_norm=qk_norm) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, d)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def null_id(self) -> int:
        return self.num_classes

    def forward(self, z: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[-1] != self.d:
            raise ShapeError(f"expected (B, h, w, {self.d}) latents, got {tuple(z.shape)}")
        B, h, w, _ = z.shape
        t = torch.as_tensor(t, dtype=z.dtype).reshape(-1).expand(B)
        emb = self.t_mlp(timestep_embedding(t, self.dim)) + self.class_emb(cond)
        x = self.in_proj(z.reshape(B, h * w, self.d)) + sincos_2d(h, w, self.dim, z.dtype)
        for blk in self.blocks:
            x = blk(x + emb[:, None])
        return self.out(self.norm(x)).reshape(B, h, w, self.d)


def _codes(z) -> torch.Tensor:
    return z.codes if isinstance(z, LatentBatch) else z


def interpolate_path(z0, z1, t) -> torch.Tensor:
    z0, z1 = _codes(z0), _codes(z1)
    if z0.shape != z1.shape:
        raise ShapeError("interpolate_path: endpoint shapes differ")
    t = torch.as_tensor(t, dtype=z0.dtype)
    if (t < 0).any() or (t > 1).any():
        raise DomainError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (z0.ndim - 1)))
    return (1 - t) * z0 + t * z1


def velocity_target(z0, z1) -> torch.Tensor:
    z0, z1 = _codes(z0), _codes(z1)
    if z0.shape != z1.shape:
        raise ShapeError("velocity_target: endpoint shapes differ")
    return z1 - z0


def flow_matching_loss(model, z0, cond_ids: torch.Tensor, rng: torch.Generator, null_prob: float = 0.1,
                       null_id: Optional[int] = None) -> torch.Tensor:
    """Mean squared velocity error on one draw of noise, timesteps and label dropout.

    Draw order from ``rng``: noise ``z1``, timesteps ``t``, dropout uniforms.
    """
    z0 = _codes(z0)
    B = z0.shape[0]
    z1 = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    t = torch.rand(B, generator=rng, dtype=z0.dtype)
    drop = torch.rand(B, generator=rng) < null_prob
    if null_id is None:
        null_id = getattr(model, "null_id", None)
    cond = cond_ids if null_id is None else torch.where(drop, torch.full_like(cond_ids, null_id), cond_ids)
    zt = interpolate_path(z0, z1, t)
    v = model(zt, t, cond)
    return ((v - velocity_target(z0, z1)) ** 2).mean()


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float, cfg_channels=ALL_CHANNELS):
    """``v_uncond + scale * (v_cond - v_uncond)`` on the guided channels; others keep ``v_cond``."""
    if v_cond.shape != v_uncond.shape:
        raise ShapeError("cfg_combine: shape mismatch")
    if scale < 0:
        raise ConfigError("cfg scale must be >= 0")
    if scale == 1.0:
        return v_cond
    guided = v_uncond + scale * (v_cond - v_uncond)
    if cfg_channels == ALL_CHANNELS:
        return guided
    k = int(cfg_channels)
    if k > v_cond.shape[-1]:
        raise ShapeError(f"cannot guide {k} of {v_cond.shape[-1]} channels")
    return torch.cat([guided[..., :k], v_cond[..., k:]], dim=-1)


def guided_velocity(model, z, t, cond, scale: float, cfg_channels=ALL_CHANNELS, null_id=None):
    B = z.shape[0]
    tt = torch.full((B,), float(t), dtype=z.dtype)
    if scale == 1.0:
        return model(z, tt, cond)
    null_id = getattr(model, "null_id", None) if null_id is None else null_id
    v = model(torch.cat([z, z]), torch.cat([tt, tt]), torch.cat([cond, torch.full_like(cond, null_id)]))
    return cfg_combine(v[:B], v[B:], scale, cfg_channels)


@torch.no_grad()
def euler_sample(model, sampler_cfg: SamplerConfig, cond_id, latent_shape, noise: Optional[torch.Tensor] = None,
                 null_id: Optional[int] = None) -> LatentBatch:
    """Integrate ``dz/dt = v`` from noise at ``t = 1`` to ``t = 0`` on a uniform grid.

    Returns latents in normalized space. ``noise`` overrides the seeded start.
    """
    if noise is None:
        g = torch.Generator().manual_seed(sampler_cfg.seed)
        z = torch.randn(tuple(latent_shape), generator=g)
    else:
        z = noise.clone()
    B, dtype = z.shape[0], z.dtype
    cond = torch.as_tensor(cond_id, dtype=torch.long).reshape(-1).expand(B).clone()
    ts = torch.linspace(1.0, 0.0, sampler_cfg.steps + 1, dtype=torch.float64)
    # the state is accumulated in float64 so long step counts do not drift
    z = z.double()
    for i in range(sampler_cfg.steps):
        dt = float(ts[i] - ts[i + 1])
        v = guided_velocity(model, z.to(dtype), float(ts[i]), cond, sampler_cfg.cfg_scale,
                            sampler_cfg.cfg_channels, null_id)
        z = z - dt * v.double()
    return LatentBatch(z.to(dtype), normalized=True)


class DiffusionModel:
    """Velocity network, its EMA copy and the latent statistics it was trained with."""

    def __init__(self, cfg: DiffusionConfig, d: int = 32, grid: int = 8, num_classes: int = 10):
        self.cfg, self.d, self.grid, self.num_classes = cfg, d, grid, num_classes
        torch.manual_seed(cfg.seed)
        self.net = VelocityNet(d, num_classes, cfg.dim, cfg.depth, cfg.heads, cfg.qk_norm)
        self.ema = copy.deepcopy(self.net).eval().requires_grad_(False)
        self.stats: Optional[LatentStats] = None
        self.step = 0
        self.history: list = []

    def sample(self, sampler_cfg: SamplerConfig, cond_id, n: int, use_ema: bool = True) -> LatentBatch:
        net = self.ema if use_ema else self.net
        return euler_sample(net, sampler_cfg, cond_id, (n, self.grid, self.grid, self.d))

    def generate(self, tokenizer, sampler_cfg: SamplerConfig, cond_id, n: int, use_ema: bool = True) -> torch.Tensor:
        """Sample latents, undo standardization and decode to images."""
        z = denormalize_latents(self.sample(sampler_cfg, cond_id, n, use_ema), self.stats)
        return tokenizer.decode(z.codes)

    def save(self, path) -> None:
        tensors = {f"net/{k}": v for k, v in self.net.named_parameters()}
        tensors.update({f"ema/{k}": v for k, v in self.ema.named_parameters()})
        if self.stats is not None:
            tensors["stats/mean"], tensors["stats/std"] = self.stats.mean, self.stats.std
        meta = {"config": asdict(self.cfg), "d": self.d, "grid": self.grid, "num_classes": self.num_classes,
                "step": self.step}
        save_container(path, tensors, kind="diffusion", meta=meta)

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        tensors, manifest = load_container(path)
        if manifest["kind"] != "diffusion":
            raise ValueError(f"{path} is a {manifest['kind']} checkpoint, not a diffusion model")
        meta = manifest["meta"]
        model = cls(DiffusionConfig(**meta["config"]), meta["d"], meta["grid"], meta["num_classes"])
        with torch.no_grad():
            for prefix, net in (("net", model.net), ("ema", model.ema)):
                for k, p in net.named_parameters():
                    p.copy_(tensors[f"{prefix}/{k}"])
        if "stats/mean" in tensors:
            model.stats = LatentStats(tensors["stats/mean"], tensors["stats/std"])
        model.step = meta["step"]
        return model


def encode_dataset(tokenizer, dataset, stats: Optional[LatentStats] = None):
    """Standardized latents of every image; statistics are computed if not given."""
    raw = LatentBatch(tokenizer.encode(dataset.images))
    stats = stats if stats is not None else compute_latent_stats([raw])
    return normalize_latents(raw, stats), stats


def train_diffusion(model: DiffusionModel, tokenizer, dataset, steps: Optional[int] = None, *,
                    stats: Optional[LatentStats] = None, records_path=None, log_every: int = 100,
                    probe_size: int = 64) -> DiffusionModel:
    """Train ``model`` by flow matching on the frozen tokenizer's standardized latents.

    ``tokenizer`` is a TokenizerBundle or anything with ``encode``. The flow
    matching loss on a fixed probe batch (fixed noise and timesteps) is
    recorded in ``model.history`` at the start, every ``log_every`` steps and
    at the end.
    """
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    if hasattr(tokenizer, "inference"):
        stats = stats if stats is not None else tokenizer.stats
        tokenizer = tokenizer.inference()
    latents, model.stats = encode_dataset(tokenizer, dataset, stats)
    z_all = latents.codes
    labels = dataset.labels if model.num_classes > 1 else torch.zeros_like(dataset.labels)
    if labels.max() >= model.num_classes:
        raise ConfigError("dataset has more classes than the diffusion model")

    net = model.net.train()
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=0.0)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    probe_idx = torch.arange(min(probe_size, len(z_all)))

    def probe_loss():
        with torch.no_grad():
            g = torch.Generator().manual_seed(cfg.seed + 12345)
            return flow_matching_loss(net, z_all[probe_idx], labels[probe_idx], g, null_prob=0.0).item()

    def log(step, loss):
        p = probe_loss()
        model.history.append((step, loss, p))
        if records_path is not None:
            append_records(records_path, [MetricRecord(step, "diffusion/fm_loss", loss, {}),
                                          MetricRecord(step, "diffusion/fm_probe", p, {})])

    model.history.append((model.step, float("nan"), probe_loss()))
    for _ in range(steps):
        idx = torch.randint(len(z_all), (cfg.batch_size,), generator=rng)
        loss = flow_matching_loss(net, z_all[idx], labels[idx], rng, cfg.null_prob)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite flow matching loss at step {model.step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ema_update(dict(model.ema.named_parameters()), dict(net.named_parameters()),
                   warmup_decay(cfg.ema_decay, model.step))
        model.step += 1
        if model.step % log_every == 0 or _ == steps - 1:
            log(model.step, loss.item())
    net.eval()
    return model
