"""Training objectives for the tokenizer.

Reconstruction is ``l1 + w_p * perceptual + w_g * r_gan * gan_g`` where ``r_gan``
equalizes the generator term's gradient norm with that of ``l1 + w_p *
perceptual`` at the last decoder layer. Perceptual alignment adds ``w_sp * r_sp *
sp`` with ``r_sp`` anchored at the last encoder-side layer. There is no KL term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .datamodel import ImageBatch, LatentBatch
from .errors import ShapeError

RESCALE_EPS = 1e-8
RESCALE_MAX = 1e4


@dataclass
class LossReport:
    """Scalar loss summary.

    ``total`` equals ``l1 + w_p*perceptual + w_g*r_gan*gan_g + w_sp*r_sp*sp`` with
    the GAN term present only when ``weights["gan_enabled"]`` is set. ``loss``
    keeps the differentiable total when the report came from a live graph.
    """

    total: float
    components: dict
    rescale_factors: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    loss: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def recompute_total(self) -> float:
        c, w, r = self.components, self.weights, self.rescale_factors
        total = c["l1"] + w.get("w_p", 0.0) * c["perceptual"]
        if w.get("gan_enabled"):
            total += w["w_g"] * r["gan"] * c["gan_g"]
        if "w_sp" in w:
            total += w["w_sp"] * r["sp"] * c["sp"]
        return total


def _t(x) -> torch.Tensor:
    if isinstance(x, ImageBatch):
        return x.pixels
    if isinstance(x, LatentBatch):
        return x.codes
    return x


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(x, x_hat) -> torch.Tensor:
    x, x_hat = _t(x), _t(x_hat)
    _same_shape(x, x_hat, "l1_loss")
    return (x - x_hat).abs().mean()


def mse(a, b, what="mse") -> torch.Tensor:
    a, b = _t(a), _t(b)
    _same_shape(a, b, what)
    return ((a - b) ** 2).mean()


def perceptual_loss(feat_net, x, x_hat) -> torch.Tensor:
    """Mean over the designated layers of the feature-map mean squared distance."""
    x, x_hat = _t(x), _t(x_hat)
    _same_shape(x, x_hat, "perceptual_loss")
    with torch.set_grad_enabled(torch.is_grad_enabled() and x.requires_grad):
        fa = feat_net(x)
    fb = feat_net(x_hat)
    return sum(((a - b) ** 2).mean() for a, b in zip(fa, fb)) / len(fa)


def hinge_generator_loss(logits_fake: torch.Tensor) -> torch.Tensor:
    return -logits_fake.mean()


def hinge_discriminator_loss(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - logits_real).mean() + F.relu(1.0 + logits_fake).mean()


def gan_generator_loss(disc, x_hat) -> torch.Tensor:
    return hinge_generator_loss(disc(_t(x_hat)))


def gan_discriminator_loss(disc, x, x_hat) -> torch.Tensor:
    x, x_hat = _t(x), _t(x_hat)
    _same_shape(x, x_hat, "gan_discriminator_loss")
    return hinge_discriminator_loss(disc(x), disc(x_hat.detach()))


def grad_norm_rescale(primary_grad_norm: float, secondary_grad_norm: float) -> float:
    """Scale that makes the secondary loss's gradient norm match the primary's."""
    scale = float(primary_grad_norm) / max(float(secondary_grad_norm), RESCALE_EPS)
    return min(max(scale, 0.0), RESCALE_MAX)


def layer_grad_norm(loss: torch.Tensor, layer: torch.Tensor) -> float:
    (g,) = torch.autograd.grad(loss, layer, retain_graph=True, allow_unused=True)
    return 0.0 if g is None else g.norm().item()


def reconstruction_loss(x, x_hat, feat_net, disc, w_p: float, w_g: float, gan_enabled: bool,
                        last_layer: Optional[torch.Tensor] = None) -> LossReport:
    """Composite reconstruction objective.

    ``last_layer`` is the decoder's final weight; when given (and the graph is
    live) the generator term is rescaled against it, otherwise the factor is 1.
    """
    x, x_hat = _t(x), _t(x_hat)
    l1 = l1_loss(x, x_hat)
    perc = perceptual_loss(feat_net, x, x_hat) if w_p > 0 else torch.zeros((), dtype=x.dtype)
    base = l1 + w_p * perc
    components = {"l1": l1.item(), "perceptual": perc.item(), "gan_g": 0.0, "gan_d": 0.0, "sp": 0.0}
    rescale = {"gan": 0.0}
    diagnostics = {}
    total = base
    if gan_enabled:
        if disc is None:
            raise ValueError("gan_enabled needs a discriminator")
        gan_g = gan_generator_loss(disc, x_hat)
        r = 1.0
        if last_layer is not None and x_hat.requires_grad:
            base_norm = layer_grad_norm(base, last_layer)
            gan_norm = layer_grad_norm(gan_g, last_layer)
            r = grad_norm_rescale(base_norm, gan_norm)
            # measured by a separate backward pass, not inferred from r
            diagnostics.update(rec_last_layer_norm=base_norm, gan_last_layer_norm=gan_norm,
                               gan_last_layer_norm_scaled=layer_grad_norm(r * gan_g, last_layer))
        total = base + w_g * r * gan_g
        components["gan_g"] = gan_g.item()
        rescale["gan"] = r
    return LossReport(total.item(), components, rescale,
                      {"w_p": w_p, "w_g": w_g, "gan_enabled": bool(gan_enabled)}, diagnostics, total)


def semantic_preservation_loss(z_live, z_frozen) -> torch.Tensor:
    """Mean squared distance to the frozen previous-stage latents (no gradient into the target)."""
    return mse(z_live, _t(z_frozen).detach(), "semantic_preservation_loss")


def pre_adapter_sp_loss(feats_live, feats_frozen) -> torch.Tensor:
    """Semantic preservation on encoder features, before the adapter."""
    return mse(feats_live, _t(feats_frozen).detach(), "pre_adapter_sp_loss")


def perceptual_alignment_loss(rec_report: LossReport, sp_value, w_sp: float, sp_rescale: float) -> LossReport:
    sp_tensor = sp_value if torch.is_tensor(sp_value) else torch.tensor(float(sp_value))
    components = dict(rec_report.components, sp=float(sp_tensor.detach()))
    weights = dict(rec_report.weights, w_sp=float(w_sp))
    rescale = dict(rec_report.rescale_factors, sp=float(sp_rescale))
    loss = None
    if rec_report.loss is not None:
        loss = rec_report.loss + w_sp * sp_rescale * sp_tensor
    total = rec_report.total + w_sp * sp_rescale * float(sp_tensor.detach())
    return LossReport(total, components, rescale, weights, dict(rec_report.diagnostics), loss)
