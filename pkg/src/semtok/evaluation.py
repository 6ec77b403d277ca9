"""Desk-scale metrics: PSNR, Frechet feature distance and latent linear probing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from .datamodel import LatentBatch, MetricRecord
from .errors import DatasetTooSmall, ShapeError

PSNR_CAP = 100.0
FRECHET_EPS = 1e-6
PROBE_L2 = 1e-3


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    chance_level: float
    n_train: int
    n_test: int


def psnr(x, x_hat) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 100 dB."""
    x = torch.as_tensor(x, dtype=torch.float64)
    x_hat = torch.as_tensor(x_hat, dtype=torch.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"psnr: shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    err = ((x - x_hat) ** 2).mean().item()
    if err < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eps: float = FRECHET_EPS) -> float:
    """Frechet distance between two Gaussians.

    ``trace(sqrt(C_a C_b))`` is evaluated as the trace of the square root of the
    symmetric PSD matrix ``C_a^1/2 C_b C_a^1/2``, which has the same spectrum.
    """
    cov_a = np.asarray(cov_a, dtype=np.float64) + eps * np.eye(len(mu_a))
    cov_b = np.asarray(cov_b, dtype=np.float64) + eps * np.eye(len(mu_b))
    root_a = _sqrt_psd(cov_a)
    middle = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((middle + middle.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = np.asarray(mu_a, dtype=np.float64) - np.asarray(mu_b, dtype=np.float64)
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def frechet_from_features(feats_a, feats_b) -> float:
    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ShapeError("Frechet distance needs at least two samples per set")
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError("feature dimensions differ")
    return frechet_distance(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def frechet_feature_distance(feat_net, set_a, set_b) -> float:
    """Frechet distance between mean-pooled ``feat_net`` features of two image sets."""
    return frechet_from_features(feat_net.pooled(torch.as_tensor(set_a)).numpy(),
                                 feat_net.pooled(torch.as_tensor(set_b)).numpy())


def _pooled(latents) -> np.ndarray:
    if isinstance(latents, LatentBatch):
        latents = latents.codes
    elif isinstance(latents, (list, tuple)):
        latents = torch.cat([z.codes if isinstance(z, LatentBatch) else torch.as_tensor(z) for z in latents])
    arr = torch.as_tensor(latents).double()
    if arr.ndim == 4:
        arr = arr.mean(dim=(1, 2))
    elif arr.ndim != 2:
        raise ShapeError(f"expected (N, h, w, d) or (N, d) latents, got {tuple(arr.shape)}")
    return arr.numpy()


def linear_probe_accuracy(latents, labels, split_seed: int = 0) -> ProbeResult:
    """Held-out accuracy of a multinomial logistic probe on spatially mean-pooled latents.

    Fixed seeded 80/20 split, features standardized with training statistics,
    L2 penalty ``PROBE_L2`` on the mean cross-entropy, fit by full-batch L-BFGS.
    """
    x = _pooled(latents)
    y = np.asarray(torch.as_tensor(labels)).astype(np.int64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError("latents and labels differ in length")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < 10:
        raise DatasetTooSmall("linear probe needs >= 2 classes with >= 10 examples each")
    perm = np.random.default_rng(split_seed).permutation(len(y))
    n_train = int(round(0.8 * len(y)))
    tr, te = perm[:n_train], perm[n_train:]
    mu, sd = x[tr].mean(0), x[tr].std(0) + 1e-8
    xtr, xte = (x[tr] - mu) / sd, (x[te] - mu) / sd
    # sklearn minimises 0.5*||w||^2 + C*sum(loss); this matches mean(loss) + PROBE_L2*||w||^2
    clf = LogisticRegression(C=1.0 / (2 * PROBE_L2 * n_train), max_iter=2000, tol=1e-8)
    clf.fit(xtr, y[tr])
    acc = float((clf.predict(xte) == y[te]).mean())
    return ProbeResult(acc, 1.0 / len(classes), len(tr), len(te))


def evaluate_tokenizer(tokenizer, dataset, feat_net, step: int = 0, tags: Optional[dict] = None,
                       split_seed: int = 0) -> list:
    """Reconstruction and semantic metrics on a held-out dataset.

    ``tokenizer`` needs ``encode(images) -> latents`` and ``decode(latents) ->
    images`` (channel-last). Returns MetricRecords named ``psnr``, ``l1``,
    ``rfid_proxy`` and ``probe_acc``.
    """
    tags = dict(tags or {})
    x = dataset.images
    z = tokenizer.encode(x)
    x_hat = tokenizer.decode(z)
    l1 = (x - x_hat).abs().mean().item()
    rfid = frechet_feature_distance(feat_net, x, x_hat)
    probe = linear_probe_accuracy(z, dataset.labels, split_seed)
    return [
        MetricRecord(step, "psnr", psnr(x, x_hat), tags),
        MetricRecord(step, "l1", l1, tags),
        MetricRecord(step, "rfid_proxy", rfid, tags),
        MetricRecord(step, "probe_acc", probe.accuracy, tags),
    ]


def metrics_dict(records: Sequence[MetricRecord]) -> dict:
    return {r.name: r.value for r in records}
