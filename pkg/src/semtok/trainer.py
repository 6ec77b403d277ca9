"""Three-stage alignment of a pretrained encoder into a latent tokenizer.

Stage 1 (latent alignment) trains the adapter and decoder around the frozen
encoder. Stage 2 (perceptual alignment) trains everything jointly, pulling the
latents toward a frozen snapshot of the stage-1 tokenizer. Stage 3 (decoder
refinement) trains only the decoder, leaving the latent space untouched.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import torch

from .container import load_container, save_container
from .datamodel import (ImageBatch, LatentBatch, LatentStats, MetricRecord, TokenizerConfig,
                        append_records, compute_latent_stats, validate_config)
from .decoder import Decoder, PatchDiscriminator
from .encoder import Adapter, FrozenTokenizerRef, PerceptualNet, ToyEncoder, param_checksum, snapshot_frozen
from .errors import ConfigError, NonFiniteLoss, ShapeError, StageOrderError
from .losses import (LossReport, gan_discriminator_loss, grad_norm_rescale, perceptual_alignment_loss,
                     pre_adapter_sp_loss, reconstruction_loss, semantic_preservation_loss)

log = logging.getLogger(__name__)

GROUPS = ("encoder", "adapter", "decoder", "discriminator")
GENERATOR_GROUPS = ("encoder", "adapter", "decoder")


class Stage(IntEnum):
    # SCRATCH is the reconstruction-only baseline: random encoder, all groups trained, no SP
    SCRATCH = 0
    LATENT_ALIGNMENT = 1
    PERCEPTUAL_ALIGNMENT = 2
    DECODER_REFINEMENT = 3


_TRAINABLE = {
    Stage.SCRATCH: frozenset(GROUPS),
    Stage.LATENT_ALIGNMENT: frozenset({"adapter", "decoder", "discriminator"}),
    Stage.PERCEPTUAL_ALIGNMENT: frozenset(GROUPS),
    Stage.DECODER_REFINEMENT: frozenset({"decoder", "discriminator"}),
}


@dataclass(frozen=True)
class StageSchedule:
    stage: Stage
    steps: int
    lr: float
    trainable: frozenset
    sp_enabled: bool
    sp_mode: str = "post_adapter"

    def __post_init__(self):
        stage = Stage(self.stage)
        if self.trainable != _TRAINABLE[stage]:
            raise ConfigError(f"{stage.name} must train exactly {sorted(_TRAINABLE[stage])}")
        if self.sp_enabled != (stage == Stage.PERCEPTUAL_ALIGNMENT):
            raise ConfigError(f"{stage.name}: sp_enabled must be {stage == Stage.PERCEPTUAL_ALIGNMENT}")
        if self.sp_mode not in ("post_adapter", "pre_adapter"):
            raise ConfigError(f"unknown sp_mode {self.sp_mode!r}")
        if self.steps < 0 or self.lr <= 0:
            raise ConfigError("steps must be >= 0 and lr > 0")

    @classmethod
    def for_stage(cls, stage, cfg: TokenizerConfig, steps: Optional[int] = None) -> "StageSchedule":
        stage = Stage(stage)
        if stage == Stage.SCRATCH:
            default_steps = cfg.stage1_steps + cfg.stage2_steps + cfg.stage3_steps
            lr = cfg.lr_stage1
        else:
            default_steps = getattr(cfg, f"stage{int(stage)}_steps")
            lr = getattr(cfg, f"lr_stage{int(stage)}")
        return cls(stage, default_steps if steps is None else steps, lr, _TRAINABLE[stage],
                   stage == Stage.PERCEPTUAL_ALIGNMENT, cfg.sp_mode)


def gan_warmup_gate(step_index: int, stage, warmup_steps: int) -> bool:
    """GAN terms are off for the first ``warmup_steps`` of stage 1 and on afterwards."""
    if Stage(stage) in (Stage.LATENT_ALIGNMENT, Stage.SCRATCH):
        return step_index >= warmup_steps
    return True


def ema_update(shadow, live, decay: float):
    """``decay * shadow + (1 - decay) * live``, elementwise; dicts are updated per key in place."""
    if not 0.0 <= decay <= 1.0:
        raise ConfigError("decay must be in [0, 1]")
    if isinstance(shadow, dict):
        for name, s in shadow.items():
            ema_update(s, live[name], decay)
        return shadow
    if shadow.shape != live.shape:
        raise ShapeError(f"ema shape mismatch {tuple(shadow.shape)} vs {tuple(live.shape)}")
    with torch.no_grad():
        shadow.copy_(decay * shadow + (1.0 - decay) * live.detach())
    return shadow


class InferenceTokenizer:
    """Read-only (encoder, adapter, decoder) triple used for evaluation and diffusion."""

    def __init__(self, encoder: ToyEncoder, adapter: Adapter, decoder: Decoder):
        self.encoder = encoder.eval().requires_grad_(False)
        self.adapter = adapter.eval().requires_grad_(False)
        self.decoder = decoder.eval().requires_grad_(False)

    @torch.no_grad()
    def features(self, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        return torch.cat([self.encoder(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])

    @torch.no_grad()
    def encode(self, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        return torch.cat([self.adapter(self.encoder(x[i:i + batch_size]))
                          for i in range(0, x.shape[0], batch_size)])

    @torch.no_grad()
    def decode(self, z: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        return torch.cat([self.decoder(z[i:i + batch_size]) for i in range(0, z.shape[0], batch_size)])

    def tokenize(self, x) -> LatentBatch:
        return LatentBatch(self.encode(x.pixels if isinstance(x, ImageBatch) else x))

    def checksum(self) -> str:
        return "".join(param_checksum(m) for m in (self.encoder, self.adapter, self.decoder))


class TokenizerBundle:
    """All tokenizer state: parameter groups, EMA shadows, latent stats, optimizers and stage position."""

    def __init__(self, cfg: TokenizerConfig, encoder: ToyEncoder, perceptual_source: Optional[ToyEncoder] = None):
        self.cfg = validate_config(cfg)
        self.encoder = copy.deepcopy(encoder).train()
        self.encoder.requires_grad_(True)
        torch.manual_seed(cfg.seed)
        self.adapter = Adapter(cfg.enc_dim, cfg.d)
        self.decoder = Decoder.from_config(cfg)
        self.discriminator = PatchDiscriminator(cfg.disc_width)
        self.perceptual = PerceptualNet(perceptual_source if perceptual_source is not None else encoder)
        self.ema: dict = {}
        self.stats: Optional[LatentStats] = None
        self.history: list = []
        self.active: Optional[Stage] = None
        self.stage_step = 0
        self.sp_target: Optional[FrozenTokenizerRef] = None
        self.gen_opt: Optional[torch.optim.Optimizer] = None
        self.disc_opt: Optional[torch.optim.Optimizer] = None
        self.batch_rng = torch.Generator().manual_seed(cfg.seed)

    @classmethod
    def scratch(cls, cfg: TokenizerConfig, perceptual_source: ToyEncoder) -> "TokenizerBundle":
        """Baseline bundle whose encoder is randomly initialised (same architecture)."""
        torch.manual_seed(cfg.seed + 7919)
        return cls(cfg, ToyEncoder.from_config(cfg), perceptual_source)

    @property
    def groups(self) -> dict:
        return {"encoder": self.encoder, "adapter": self.adapter, "decoder": self.decoder,
                "discriminator": self.discriminator}

    def checksums(self) -> dict:
        return {name: param_checksum(m) for name, m in self.groups.items()}

    @property
    def completed_stage(self) -> Optional[Stage]:
        return self.history[-1] if self.history else None

    @property
    def uses_ema(self) -> bool:
        return self.cfg.ema_enabled and self.completed_stage in (
            Stage.PERCEPTUAL_ALIGNMENT, Stage.DECODER_REFINEMENT, Stage.SCRATCH)

    def inference(self) -> InferenceTokenizer:
        mods = [copy.deepcopy(self.groups[g]) for g in GENERATOR_GROUPS]
        if self.uses_ema:
            for g, m in zip(GENERATOR_GROUPS, mods):
                _load_params(m, self.ema[g])
        return InferenceTokenizer(*mods)

    def trainable_params(self, schedule: StageSchedule) -> list:
        return [p for g in GENERATOR_GROUPS if g in schedule.trainable for p in self.groups[g].parameters()]

    def _make_optimizers(self, schedule: StageSchedule):
        self.gen_opt = torch.optim.Adam(self.trainable_params(schedule), lr=schedule.lr, betas=(0.5, 0.9))
        self.disc_opt = torch.optim.Adam(self.discriminator.parameters(), lr=self.cfg.lr_disc, betas=(0.5, 0.9))

    def set_trainable(self, schedule: StageSchedule):
        for name, module in self.groups.items():
            module.requires_grad_(name in schedule.trainable)

    def begin_stage(self, schedule: StageSchedule):
        stage = Stage(schedule.stage)
        expected = {Stage.SCRATCH: [], Stage.LATENT_ALIGNMENT: [],
                    Stage.PERCEPTUAL_ALIGNMENT: [Stage.LATENT_ALIGNMENT],
                    Stage.DECODER_REFINEMENT: [Stage.LATENT_ALIGNMENT, Stage.PERCEPTUAL_ALIGNMENT]}[stage]
        if self.history != expected or self.active is not None:
            done = [s.name for s in self.history]
            raise StageOrderError(f"{stage.name} requires completed stages {[s.name for s in expected]}, have {done}")
        if stage == Stage.PERCEPTUAL_ALIGNMENT:
            self.sp_target = snapshot_frozen(self.encoder, self.adapter, "stage1")
        if self.cfg.ema_enabled and stage != Stage.LATENT_ALIGNMENT:
            self.ema = {g: {n: p.detach().clone() for n, p in self.groups[g].named_parameters()}
                        for g in GENERATOR_GROUPS}
        self.set_trainable(schedule)
        self._make_optimizers(schedule)
        self.batch_rng.manual_seed(self.cfg.seed * 1000 + int(stage))
        self.active = stage
        self.stage_step = 0

    def finish_stage(self, dataset=None):
        self.history.append(self.active)
        self.active = None
        self.stage_step = 0
        self.gen_opt = self.disc_opt = None
        if self.uses_ema:
            # the averaged weights are the stage result; later stages continue from them
            for g in GENERATOR_GROUPS:
                _load_params(self.groups[g], self.ema[g])
        for module in self.groups.values():
            module.requires_grad_(False)
        if dataset is not None:
            tok = self.inference()
            self.stats = compute_latent_stats([LatentBatch(tok.encode(dataset.images))])


def _load_params(module: torch.nn.Module, params: dict):
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(params[name])


def _global_norm(g: Optional[torch.Tensor]) -> float:
    return 0.0 if g is None else g.norm().item()


def train_step(bundle: TokenizerBundle, batch, schedule: StageSchedule, step_index: int) -> LossReport:
    """One generator update, one discriminator update (when GAN is on) and one EMA update.

    Only groups in ``schedule.trainable`` change.
    """
    cfg = bundle.cfg
    x = batch.pixels if isinstance(batch, ImageBatch) else batch
    if x.shape[1] != cfg.image_size or x.shape[2] != cfg.image_size:
        raise ShapeError(f"batch images must be {cfg.image_size}x{cfg.image_size}")
    enc_train = "encoder" in schedule.trainable
    adp_train = "adapter" in schedule.trainable
    disc = bundle.discriminator

    with torch.set_grad_enabled(enc_train):
        feats = bundle.encoder(x)
    with torch.set_grad_enabled(enc_train or adp_train):
        z = bundle.adapter(feats)
    x_hat = bundle.decoder(z)

    gan_on = cfg.w_g > 0 and gan_warmup_gate(step_index, schedule.stage, cfg.warmup_steps)
    disc.requires_grad_(False)
    rec = reconstruction_loss(x, x_hat, bundle.perceptual, disc, cfg.w_p, cfg.w_g, gan_on,
                              last_layer=bundle.decoder.last_layer)
    params = bundle.trainable_params(schedule)
    bundle.gen_opt.zero_grad(set_to_none=True)

    if schedule.sp_enabled:
        if schedule.sp_mode == "post_adapter":
            sp = semantic_preservation_loss(z, bundle.sp_target.tokenize(x))
            anchor = bundle.adapter.last_layer
        else:
            sp = pre_adapter_sp_loss(feats, bundle.sp_target.features(x))
            anchor = bundle.encoder.last_layer
        if cfg.w_sp > 0:
            g_rec = torch.autograd.grad(rec.loss, params, retain_graph=True, allow_unused=True)
            g_sp = torch.autograd.grad(sp, params, allow_unused=True)
            k = next(i for i, p in enumerate(params) if p is anchor)
            r_sp = grad_norm_rescale(_global_norm(g_rec[k]), _global_norm(g_sp[k]))
            report = perceptual_alignment_loss(rec, sp, cfg.w_sp, r_sp)
            for p, a, b in zip(params, g_rec, g_sp):
                if a is None and b is None:
                    continue
                p.grad = (0 if a is None else a) + (0 if b is None else cfg.w_sp * r_sp * b)
        else:
            report = perceptual_alignment_loss(rec, sp.detach(), 0.0, 0.0)
            rec.loss.backward()
    else:
        rec.loss.backward()

    if not math.isfinite(report.total if schedule.sp_enabled else rec.total):
        raise NonFiniteLoss(f"non-finite loss at {Stage(schedule.stage).name} step {step_index}",
                            report if schedule.sp_enabled else rec)
    if not schedule.sp_enabled:
        report = rec
    bundle.gen_opt.step()

    if gan_on:
        disc.requires_grad_(True)
        d_loss = gan_discriminator_loss(disc, x, x_hat.detach())
        bundle.disc_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        bundle.disc_opt.step()
        report.components["gan_d"] = d_loss.item()

    if bundle.ema:
        for g in GENERATOR_GROUPS:
            if g in schedule.trainable:
                live = dict(bundle.groups[g].named_parameters())
                ema_update(bundle.ema[g], live, cfg.ema_decay)
    report.loss = None
    return report


def run_stage(bundle: TokenizerBundle, schedule: StageSchedule, dataset, *, checkpoint_path=None,
              records_path=None, log_every: int = 100, max_steps: Optional[int] = None,
              callback=None) -> TokenizerBundle:
    """Run (or resume) one stage to completion.

    ``max_steps`` stops early without finishing the stage, which is how
    mid-stage checkpoints are produced. ``callback(bundle, report)`` runs after
    every step.
    """
    if bundle.active != Stage(schedule.stage):
        bundle.begin_stage(schedule)
    else:
        bundle.set_trainable(schedule)
    tag = Stage(schedule.stage).name.lower()
    done = 0
    while bundle.stage_step < schedule.steps:
        if max_steps is not None and done >= max_steps:
            return bundle
        images, _ = dataset.sample_batch(bundle.cfg.batch_size, bundle.batch_rng)
        report = train_step(bundle, images, schedule, bundle.stage_step)
        bundle.stage_step += 1
        done += 1
        if callback is not None:
            callback(bundle, report)
        if records_path is not None and (bundle.stage_step % log_every == 0 or bundle.stage_step == schedule.steps):
            recs = [MetricRecord(bundle.stage_step, f"train/{k}", v, {"stage": tag})
                    for k, v in report.components.items()]
            recs += [MetricRecord(bundle.stage_step, f"train/rescale_{k}", v, {"stage": tag})
                     for k, v in report.rescale_factors.items()]
            recs.append(MetricRecord(bundle.stage_step, "train/total", report.total, {"stage": tag}))
            append_records(records_path, recs)
        if bundle.stage_step % 500 == 0:
            log.info("%s step %d/%d total=%.4f", tag, bundle.stage_step, schedule.steps, report.total)
    bundle.finish_stage(dataset)
    if checkpoint_path is not None:
        save_checkpoint(bundle, checkpoint_path)
    return bundle


# -- checkpoints -----------------------------------------------------------------

def _opt_tensors(prefix: str, opt: torch.optim.Optimizer, out: dict) -> list:
    sd = opt.state_dict()
    for idx, state in sd["state"].items():
        for key, value in state.items():
            out[f"{prefix}/{idx}/{key}"] = value if torch.is_tensor(value) else torch.tensor(float(value))
    groups = []
    for grp in sd["param_groups"]:
        groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in grp.items()})
    return groups


def _restore_opt(opt: torch.optim.Optimizer, prefix: str, groups: list, tensors: dict):
    state = {}
    for name, t in tensors.items():
        if name.startswith(prefix + "/"):
            _, idx, key = name.rsplit("/", 2)
            state.setdefault(int(idx), {})[key] = t.reshape(()) if key == "step" else t
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(bundle: TokenizerBundle, path) -> None:
    tensors = {}
    for g, module in bundle.groups.items():
        for n, p in module.named_parameters():
            tensors[f"{g}/{n}"] = p
    for n, p in bundle.perceptual.encoder.named_parameters():
        tensors[f"perceptual/{n}"] = p
    for g, shadow in bundle.ema.items():
        for n, t in shadow.items():
            tensors[f"ema/{g}/{n}"] = t
    if bundle.stats is not None:
        tensors["stats/mean"], tensors["stats/std"] = bundle.stats.mean, bundle.stats.std
    if bundle.sp_target is not None:
        for g in ("encoder", "adapter"):
            for n, p in getattr(bundle.sp_target, g).named_parameters():
                tensors[f"sp_target/{g}/{n}"] = p
    meta = {"config": bundle.cfg.to_dict(), "config_hash": bundle.cfg.config_hash(),
            "history": [int(s) for s in bundle.history],
            "stage": int(bundle.completed_stage) if bundle.history else None,
            "active": None if bundle.active is None else int(bundle.active),
            "stage_step": bundle.stage_step,
            "perceptual_layers": list(bundle.perceptual.layers)}
    if bundle.active is not None:
        meta["gen_opt"] = _opt_tensors("opt/gen", bundle.gen_opt, tensors)
        meta["disc_opt"] = _opt_tensors("opt/disc", bundle.disc_opt, tensors)
        tensors["rng/batch"] = bundle.batch_rng.get_state()
    save_container(path, tensors, kind="tokenizer", meta=meta)


def load_checkpoint(path) -> TokenizerBundle:
    tensors, manifest = load_container(path)
    if manifest["kind"] != "tokenizer":
        raise ValueError(f"{path} is a {manifest['kind']} checkpoint, not a tokenizer")
    meta = manifest["meta"]
    cfg = TokenizerConfig(**meta["config"])

    def group(prefix):
        return {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}

    perceptual_src = ToyEncoder.from_config(cfg)
    _load_params(perceptual_src, group("perceptual"))
    bundle = TokenizerBundle(cfg, ToyEncoder.from_config(cfg), perceptual_src)
    bundle.perceptual.layers = tuple(meta.get("perceptual_layers", bundle.perceptual.layers))
    for g, module in bundle.groups.items():
        _load_params(module, group(g))
        module.requires_grad_(False)
    bundle.ema = {g: group(f"ema/{g}") for g in GENERATOR_GROUPS if group(f"ema/{g}")}
    if "stats/mean" in tensors:
        bundle.stats = LatentStats(tensors["stats/mean"], tensors["stats/std"])
    if group("sp_target/encoder"):
        enc, adp = ToyEncoder.from_config(cfg), Adapter(cfg.enc_dim, cfg.d)
        _load_params(enc, group("sp_target/encoder"))
        _load_params(adp, group("sp_target/adapter"))
        bundle.sp_target = FrozenTokenizerRef(enc, adp, "stage1")
    bundle.history = [Stage(s) for s in meta["history"]]
    bundle.stage_step = meta["stage_step"]
    if meta["active"] is not None:
        bundle.active = Stage(meta["active"])
        schedule = StageSchedule.for_stage(bundle.active, cfg)
        bundle.set_trainable(schedule)
        bundle._make_optimizers(schedule)
        _restore_opt(bundle.gen_opt, "opt/gen", meta["gen_opt"], tensors)
        _restore_opt(bundle.disc_opt, "opt/disc", meta["disc_opt"], tensors)
        bundle.batch_rng.set_state(tensors["rng/batch"])
    return bundle
