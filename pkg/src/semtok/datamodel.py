"""Core value types, configuration, metric records and latent standardization.

All image and latent tensors are channel-last: images are ``(B, H, W, 3)`` in
``[0, 1]`` and latents are ``(B, H/f, W/f, d)``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import torch

from .errors import ConfigError, DoubleNormalize, EmptyInput, ShapeError

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ImageBatch:
    pixels: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[-1] != 3:
            raise ShapeError(f"expected (B, H, W, 3) pixels, got {tuple(self.pixels.shape)}")
        if self.labels is not None and self.labels.shape[0] != self.pixels.shape[0]:
            raise ShapeError("labels length does not match batch size")

    def __len__(self):
        return self.pixels.shape[0]

    def check(self, f: Optional[int] = None) -> "ImageBatch":
        """Verify the pixel-range and divisibility invariants."""
        p = self.pixels
        if not torch.isfinite(p).all() or p.min() < 0 or p.max() > 1:
            raise ShapeError("pixels must be finite and within [0, 1]")
        if f is not None and (p.shape[1] % f or p.shape[2] % f):
            raise ShapeError(f"image size {tuple(p.shape[1:3])} not divisible by f={f}")
        return self


@dataclass(frozen=True)
class LatentBatch:
    codes: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        if self.codes.ndim != 4:
            raise ShapeError(f"expected (B, h, w, d) latents, got {tuple(self.codes.shape)}")

    def __len__(self):
        return self.codes.shape[0]

    @property
    def channels(self) -> int:
        return self.codes.shape[-1]


@dataclass(frozen=True)
class LatentStats:
    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("mean and std must be matching vectors")
        if not (self.std > 0).all():
            raise ConfigError("latent std entries must be strictly positive")


@dataclass
class TokenizerConfig:
    """Hyperparameters of the tokenizer and its three-stage alignment schedule.

    ``gan_warmup_steps`` of ``None`` resolves to 5% of the stage-1 budget.
    """

    f: int = 8
    d: int = 32
    image_size: int = 64
    patch_size: int = 8
    enc_dim: int = 128
    enc_depth: int = 2
    enc_heads: int = 4
    dec_width: int = 64
    disc_width: int = 16
    w_p: float = 1.0
    w_g: float = 0.5
    w_sp: float = 1.0
    sp_mode: str = "post_adapter"
    gan_warmup_steps: Optional[int] = None
    stage1_steps: int = 3000
    stage2_steps: int = 3000
    stage3_steps: int = 3000
    lr_stage1: float = 1e-4
    lr_stage2: float = 1e-5
    lr_stage3: float = 1e-4
    lr_disc: float = 1e-4
    batch_size: int = 16
    ema_enabled: bool = True
    ema_decay: float = 0.999
    seed: int = 0

    @property
    def warmup_steps(self) -> int:
        if self.gan_warmup_steps is not None:
            return self.gan_warmup_steps
        return int(round(0.05 * self.stage1_steps))

    @property
    def latent_size(self) -> int:
        return self.image_size // self.f

    def replace(self, **changes) -> "TokenizerConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return config_hash(self)


def config_hash(cfg) -> str:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def validate_config(cfg: TokenizerConfig) -> TokenizerConfig:
    """Return ``cfg`` unchanged, or raise ConfigError naming the first violation."""
    if cfg.f < 1 or cfg.d < 1:
        raise ConfigError("f and d must be positive")
    if cfg.image_size % cfg.f:
        raise ConfigError("image_size not divisible by f")
    for name in ("w_p", "w_g", "w_sp"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    if not 0.0 < cfg.ema_decay < 1.0:
        raise ConfigError("ema_decay must be in (0,1)")
    if cfg.sp_mode not in ("post_adapter", "pre_adapter"):
        raise ConfigError(f"unknown sp_mode {cfg.sp_mode!r}")
    if cfg.enc_dim % cfg.enc_heads:
        raise ConfigError("enc_dim must be divisible by enc_heads")
    if cfg.f & (cfg.f - 1):
        raise ConfigError("f must be a power of two for the upsampling decoder")
    if cfg.gan_warmup_steps is not None and cfg.gan_warmup_steps < 0:
        raise ConfigError("gan_warmup_steps must be >= 0")
    for name in ("stage1_steps", "stage2_steps", "stage3_steps"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return cfg


# -- structured text config files ------------------------------------------------

def _coerce(raw: str, annotation: str, key: str):
    raw = raw.strip()
    if annotation.startswith("Optional") and raw.lower() in ("none", "null", ""):
        return None
    base = annotation.replace("Optional[", "").rstrip("]")
    try:
        if base == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw.strip("\"'")


def parse_config_text(text: str, cls=TokenizerConfig):
    """Parse flat ``key = value`` lines into a config dataclass.

    Blank lines and ``#`` comments are ignored; unknown keys are an error.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(raw, str(fields[key].type), key)
    return cls(**values)


def format_config_text(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def load_config(path: Union[str, Path], cls=TokenizerConfig):
    return parse_config_text(Path(path).read_text(), cls)


def save_config(cfg, path: Union[str, Path]) -> None:
    Path(path).write_text(format_config_text(cfg))


# -- metric records --------------------------------------------------------------

@dataclass(frozen=True)
class MetricRecord:
    step: int
    name: str
    value: float
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.name} is not finite: {self.value}")

    def to_json(self) -> str:
        return json.dumps(
            {"step": int(self.step), "name": self.name, "value": float(self.value),
             "tags": {str(k): str(v) for k, v in self.tags.items()}},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "MetricRecord":
        obj = json.loads(line)
        if set(obj) != {"step", "name", "value", "tags"}:
            raise ValueError(f"malformed record keys: {sorted(obj)}")
        return cls(int(obj["step"]), obj["name"], float(obj["value"]), dict(obj["tags"]))


def append_records(path: Union[str, Path], records: Iterable[MetricRecord]) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path: Union[str, Path]) -> list:
    with open(path) as fh:
        return [MetricRecord.from_json(line) for line in fh if line.strip()]


# -- latent standardization ------------------------------------------------------

def compute_latent_stats(latents: Sequence[LatentBatch]) -> LatentStats:
    """Per-channel mean and std over every batch, position and sample."""
    latents = list(latents)
    if not latents:
        raise EmptyInput("compute_latent_stats needs at least one batch")
    if any(z.normalized for z in latents):
        raise DoubleNormalize("latent stats must be computed on unnormalized codes")
    flat = torch.cat([z.codes.reshape(-1, z.channels).double() for z in latents])
    mean = flat.mean(0)
    var = ((flat - mean) ** 2).mean(0)
    std = var.sqrt().clamp_min(STD_FLOOR)
    return LatentStats(mean.float(), std.float())


def normalize_latents(z: LatentBatch, stats: LatentStats) -> LatentBatch:
    if z.normalized:
        raise DoubleNormalize("latents are already normalized")
    return LatentBatch((z.codes - stats.mean) / stats.std, normalized=True)


def denormalize_latents(z: LatentBatch, stats: LatentStats) -> LatentBatch:
    if not z.normalized:
        raise DoubleNormalize("latents are not normalized")
    return LatentBatch(z.codes * stats.std + stats.mean, normalized=False)
