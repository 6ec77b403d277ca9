"""Desk-scale datasets: procedural synthetic shapes and image-folder ingestion."""

from __future__ import annotations

import colorsys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .container import load_container, save_container
from .errors import ConfigError, EmptyDataset

SHAPES = ("circle", "square", "triangle", "cross", "ring")
# hue ranges of the colour families, in [0, 1)
COLOR_FAMILIES = {
    "warm": (0.0, 0.12),
    "cool": (0.55, 0.68),
    "green": (0.25, 0.40),
    "magenta": (0.80, 0.92),
}
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}


@dataclass
class DatasetSpec:
    source: str = "synthetic_shapes"
    K: int = 10
    n_per_class: int = 200
    image_size: int = 64
    seed: int = 0
    path: Optional[str] = None

    def validate(self, f: int = 1) -> "DatasetSpec":
        if self.source not in ("synthetic_shapes", "image_folder"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.image_size % f:
            raise ConfigError("image_size not divisible by f")
        if self.source == "synthetic_shapes":
            if self.K > len(SHAPES) * len(COLOR_FAMILIES):
                raise ConfigError(f"synthetic_shapes supports at most "
                                  f"{len(SHAPES) * len(COLOR_FAMILIES)} classes")
            if self.n_per_class < 1:
                raise ConfigError("n_per_class must be >= 1")
        elif not self.path:
            raise ConfigError("image_folder source needs a path")
        return self


@dataclass
class Dataset:
    """In-memory labelled images, channel-last float32 in [0, 1]."""

    images: torch.Tensor
    labels: torch.Tensor
    class_names: list = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    def subset(self, idx) -> "Dataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names))

    def split(self, frac: float = 0.8, seed: int = 0):
        """Seeded random split into two datasets."""
        g = torch.Generator().manual_seed(seed)
        perm = torch.randperm(len(self), generator=g)
        n = int(round(frac * len(self)))
        return self.subset(perm[:n]), self.subset(perm[n:])

    def sample_batch(self, batch_size: int, generator: torch.Generator):
        idx = torch.randint(len(self), (batch_size,), generator=generator)
        return self.images[idx], self.labels[idx]

    def save(self, path: Union[str, Path]) -> None:
        save_container(path, {"images": self.images, "labels": self.labels},
                       kind="dataset", meta={"class_names": list(self.class_names)})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Dataset":
        tensors, manifest = load_container(path)
        return cls(tensors["images"], tensors["labels"], manifest["meta"]["class_names"])


def class_name(k: int) -> str:
    shape = SHAPES[k % len(SHAPES)]
    family = list(COLOR_FAMILIES)[k // len(SHAPES)]
    return f"{family}_{shape}"


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.sqrt(u ** 2 + v ** 2)
    if shape == "circle":
        return r <= 1.0
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if shape == "triangle":
        return (v >= -0.85) & (v <= 0.85) & (np.abs(u) <= 0.55 * (v + 0.85))
    if shape == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 0.95))
    if shape == "ring":
        return (r <= 1.0) & (r >= 0.55)
    raise ValueError(shape)


def render_shape(k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one image of class ``k`` with random pose, colour and background."""
    shape = SHAPES[k % len(SHAPES)]
    lo, hi = COLOR_FAMILIES[list(COLOR_FAMILIES)[k // len(SHAPES)]]
    ys, xs = (np.mgrid[0:size, 0:size] + 0.5) / size

    # background: low-saturation base colour with a random linear gradient
    bg = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.25), rng.uniform(0.25, 0.75)))
    gdir = rng.normal(size=2)
    grad = (gdir[0] * (xs - 0.5) + gdir[1] * (ys - 0.5)) * rng.uniform(0.0, 0.3)
    img = bg[None, None, :] + grad[..., None]

    radius = rng.uniform(0.18, 0.34)
    cx, cy = rng.uniform(radius, 1 - radius, size=2)
    angle = rng.uniform(-0.3, 0.3)
    c, s = np.cos(angle), np.sin(angle)
    u = (c * (xs - cx) + s * (ys - cy)) / radius
    v = (-s * (xs - cx) + c * (ys - cy)) / radius
    mask = _shape_mask(shape, u, v)
    fg = np.array(colorsys.hsv_to_rgb(rng.uniform(lo, hi), rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)))
    img = np.where(mask[..., None], fg[None, None, :], img)

    img = img + rng.normal(scale=0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: DatasetSpec) -> Dataset:
    """Class-balanced synthetic shapes; item ``i`` has label ``i % K``.

    Every item draws from its own child seed of ``spec.seed``, so the output is
    bit-identical for a given spec regardless of how generation is scheduled.
    """
    if spec.source != "synthetic_shapes":
        raise ConfigError("generate_synthetic needs source = synthetic_shapes")
    spec.validate()
    n = spec.K * spec.n_per_class
    children = np.random.SeedSequence(spec.seed).spawn(n)
    images = np.empty((n, spec.image_size, spec.image_size, 3), dtype=np.float32)
    labels = np.arange(n) % spec.K
    for i in range(n):
        images[i] = render_shape(int(labels[i]), spec.image_size, np.random.default_rng(children[i]))
    return Dataset(torch.from_numpy(images), torch.from_numpy(labels).long(),
                   [class_name(k) for k in range(spec.K)])


def _resize_crop(img, image_size: int, crop: str, rng: Optional[np.random.Generator]):
    from PIL import Image

    w, h = img.size
    scale = image_size / min(w, h)
    nw, nh = max(image_size, round(w * scale)), max(image_size, round(h * scale))
    img = img.resize((nw, nh), Image.BICUBIC)
    if crop == "random":
        left = int(rng.integers(0, nw - image_size + 1))
        top = int(rng.integers(0, nh - image_size + 1))
    else:
        left, top = (nw - image_size) // 2, (nh - image_size) // 2
    img = img.crop((left, top, left + image_size, top + image_size))
    return np.asarray(img, dtype=np.float32) / 255.0


def ingest_folder(path: Union[str, Path], image_size: int, crop: str = "center",
                  seed: int = 0) -> Dataset:
    """Load ``path/<class>/<image>`` files; labels follow sorted class-directory names.

    Images are resized so the shorter edge equals ``image_size`` and then cropped
    square (``crop="center"`` for evaluation, ``"random"`` for training).
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    if not root.is_dir():
        raise EmptyDataset(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, name in enumerate(classes):
        for file in sorted((root / name).iterdir()):
            if file.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(file) as im:
                    arr = _resize_crop(im.convert("RGB"), image_size, crop, rng)
            except (OSError, UnidentifiedImageError) as exc:
                warnings.warn(f"skipping unreadable image {file}: {exc}")
                continue
            images.append(arr)
            labels.append(label)
    if not images:
        raise EmptyDataset(f"no readable images under {root}")
    return Dataset(torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.long), classes)


def load_dataset(spec: DatasetSpec, f: int = 1) -> Dataset:
    spec.validate(f)
    if spec.source == "synthetic_shapes":
        return generate_synthetic(spec)
    return ingest_folder(spec.path, spec.image_size, seed=spec.seed)
