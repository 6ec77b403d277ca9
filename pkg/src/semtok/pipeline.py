"""Run-directory orchestration shared by the command line and the demos.

A run directory holds ``manifest.json``, ``records.jsonl`` (one MetricRecord
per line), ``checkpoints/``, ``samples/`` and ``plots/``. Every phase stores
the hash of the configuration it ran under; re-running a completed phase with
the same hash is a no-op, with a different hash it is refused unless forced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import uuid
from contextlib import contextmanager
from dataclasses import field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from filelock import FileLock, Timeout
from PIL import Image

from .container import load_container, save_container
from .data import DatasetSpec, ingest_folder, load_dataset
from .datamodel import MetricRecord, TokenizerConfig, append_records, read_records, validate_config
from .diffusion import DiffusionConfig, DiffusionModel, SamplerConfig, train_diffusion
from .encoder import ToyEncoder, pretrain_toy_encoder
from .errors import ConfigError, HashMismatch, MissingArtifact, RunLocked
from .evaluation import evaluate_tokenizer, frechet_feature_distance
from .trainer import Stage, StageSchedule, TokenizerBundle, load_checkpoint, run_stage

log = logging.getLogger(__name__)

ENCODER_ARCH = ("image_size", "f", "patch_size", "enc_dim", "enc_depth", "enc_heads")
DATA_KEYS = ("source", "K", "n_per_class", "data_seed", "data_path", "image_size", "eval_per_class")
SAMPLER_KEYS = ("sample_steps", "cfg_scale", "cfg_channels", "sample_seed")

_EXTRA_FIELDS = [
    ("source", "str", "synthetic_shapes"),
    ("K", "int", 10),
    ("n_per_class", "int", 200),
    ("data_seed", "int", 0),
    ("data_path", "Optional[str]", None),
    ("eval_per_class", "int", 50),
    ("pretrain_epochs", "int", 20),
    ("pretrain_lr", "float", 1e-3),
] + [(f"diff_{f.name}", f.type, f.default) for f in dataclasses.fields(DiffusionConfig)] + [
    ("sample_steps", "int", 30),
    ("cfg_scale", "float", 4.0),
    ("cfg_channels", "str", "3"),
    ("sample_seed", "int", 0),
    ("n_samples", "int", 20),
    ("class_id", "int", -1),
    ("gen_per_class", "int", 50),
]

RunConfig = dataclasses.make_dataclass(
    "RunConfig",
    [(f.name, f.type, field(default=f.default)) for f in dataclasses.fields(TokenizerConfig)]
    + [(name, typ, field(default=default)) for name, typ, default in _EXTRA_FIELDS],
    namespace={"__doc__": "Every setting a run can take: tokenizer, dataset, diffusion and sampler keys."},
)


def tokenizer_config(rc) -> TokenizerConfig:
    return validate_config(TokenizerConfig(**{f.name: getattr(rc, f.name)
                                              for f in dataclasses.fields(TokenizerConfig)}))


def diffusion_config(rc) -> DiffusionConfig:
    return DiffusionConfig(**{f.name: getattr(rc, f"diff_{f.name}") for f in dataclasses.fields(DiffusionConfig)})


def sampler_config(rc) -> SamplerConfig:
    channels = rc.cfg_channels if rc.cfg_channels == "all" else int(rc.cfg_channels)
    if channels != "all" and channels > rc.d:
        raise ConfigError(f"cfg_channels {channels} exceeds latent channels {rc.d}")
    return SamplerConfig(rc.sample_steps, rc.cfg_scale, channels, rc.sample_seed)


def dataset_specs(rc):
    """Training and held-out dataset specs. Synthetic held-out data uses the next seed."""
    train = DatasetSpec(rc.source, rc.K, rc.n_per_class, rc.image_size, rc.data_seed, rc.data_path)
    held = DatasetSpec(rc.source, rc.K, rc.eval_per_class, rc.image_size, rc.data_seed + 1, rc.data_path)
    return train, held


def load_datasets(rc):
    train_spec, held_spec = dataset_specs(rc)
    if train_spec.source == "synthetic_shapes":
        return load_dataset(train_spec, rc.f), load_dataset(held_spec, rc.f)
    train_spec.validate(rc.f)
    # one seeded random crop per training image, center crops for evaluation
    cropped = ingest_folder(train_spec.path, train_spec.image_size, crop="random", seed=rc.data_seed)
    centred = ingest_folder(train_spec.path, train_spec.image_size, crop="center")
    train_idx, held_idx = _split_indices(len(centred), 0.8, rc.data_seed)
    return cropped.subset(train_idx), centred.subset(held_idx)


def _split_indices(n: int, frac: float, seed: int):
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    k = int(round(frac * n))
    return perm[:k], perm[k:]


def _hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _pick(rc, keys) -> dict:
    return {k: getattr(rc, k) for k in keys}


class RunDir:
    def __init__(self, root):
        self.root = Path(root)
        self.manifest_path = self.root / "manifest.json"
        self.records = self.root / "records.jsonl"
        self.checkpoints = self.root / "checkpoints"
        self.samples = self.root / "samples"
        self.plots = self.root / "plots"

    def create(self):
        for d in (self.root, self.checkpoints, self.samples, self.plots):
            d.mkdir(parents=True, exist_ok=True)
        if not self.manifest_path.exists():
            self.write_manifest({"run_id": uuid.uuid4().hex[:12], "created": time.time(), "config": {},
                                 "records": self.records.name, "phases": {}})
        self.records.touch()
        return self

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        lk = FileLock(str(self.root / "lock"), timeout=0)
        try:
            lk.acquire()
        except Timeout:
            raise RunLocked(f"another process holds the lock on {self.root}") from None
        try:
            yield self
        finally:
            lk.release()

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"phases": {}}
        return json.loads(self.manifest_path.read_text())

    def write_manifest(self, manifest: dict):
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        tmp.replace(self.manifest_path)

    def phase(self, name: str) -> Optional[dict]:
        return self.manifest()["phases"].get(name)

    def require(self, name: str, what: str) -> dict:
        entry = self.phase(name)
        if entry is None or not all((self.root / p).exists() for p in entry["artifacts"]):
            raise MissingArtifact(f"{what} not found in {self.root}; run the {name} phase first")
        return entry

    def path(self, rel: str) -> Path:
        return self.root / rel

    def check_rerun(self, name: str, config_hash: str, force: bool) -> bool:
        """True when the phase is already complete under ``config_hash``."""
        entry = self.phase(name)
        if entry is None or force:
            return False
        if entry["config_hash"] != config_hash:
            raise HashMismatch(f"{name} already exists with config hash {entry['config_hash']}, "
                               f"now {config_hash}; pass --force to overwrite")
        if all((self.root / p).exists() for p in entry["artifacts"]):
            return True
        return False

    def complete(self, name: str, config_hash: str, artifacts: list, rc=None, **extra):
        m = self.manifest()
        m["phases"][name] = {"config_hash": config_hash, "artifacts": [str(a) for a in artifacts],
                             "completed": time.time(), **extra}
        if rc is not None:
            m["config"] = dataclasses.asdict(rc)
        self.write_manifest(m)


@dataclasses.dataclass
class PhaseResult:
    name: str
    skipped: bool
    artifacts: list


# -- encoder ---------------------------------------------------------------------

def save_encoder(enc: ToyEncoder, path, meta: dict):
    save_container(path, dict(enc.named_parameters()), kind="encoder", meta=meta)


def load_encoder(path) -> ToyEncoder:
    tensors, manifest = load_container(path)
    if manifest["kind"] != "encoder":
        raise ValueError(f"{path} is not an encoder checkpoint")
    arch = manifest["meta"]["arch"]
    enc = ToyEncoder(arch["image_size"], arch["f"], arch["patch_size"], arch["enc_dim"], arch["enc_depth"],
                     arch["enc_heads"])
    with torch.no_grad():
        for n, p in enc.named_parameters():
            p.copy_(tensors[n])
    return enc.eval().requires_grad_(False)


def pretrain_phase(run: RunDir, rc, force: bool = False) -> PhaseResult:
    cfg = tokenizer_config(rc)
    h = _hash("encoder", _pick(rc, ENCODER_ARCH + DATA_KEYS), rc.pretrain_epochs, rc.pretrain_lr, rc.seed)
    if run.check_rerun("encoder", h, force):
        return PhaseResult("encoder", True, run.phase("encoder")["artifacts"])
    train, _ = load_datasets(rc)

    def note(epoch, loss):
        append_records(run.records, [MetricRecord(epoch, "pretrain/loss", loss, {})])

    enc = pretrain_toy_encoder(train, rc.pretrain_epochs, rc.seed, cfg, lr=rc.pretrain_lr, log=note)
    rel = "checkpoints/encoder.ckpt"
    save_encoder(enc, run.path(rel), {"arch": _pick(rc, ENCODER_ARCH), "epochs": rc.pretrain_epochs,
                                      "config_hash": h})
    run.complete("encoder", h, [rel], rc)
    return PhaseResult("encoder", False, [rel])


# -- alignment -------------------------------------------------------------------

def _stage_name(stage: int) -> str:
    return f"stage{stage}"


def align_phase(run: RunDir, rc, stage: int, force: bool = False) -> PhaseResult:
    if stage not in (1, 2, 3):
        raise ConfigError("stage must be 1, 2 or 3")
    cfg = tokenizer_config(rc)
    enc_entry = run.require("encoder", "pretrained encoder checkpoint")
    prev = enc_entry if stage == 1 else run.require(_stage_name(stage - 1), f"stage-{stage - 1} checkpoint")
    name = _stage_name(stage)
    h = _hash(name, prev["config_hash"], cfg.to_dict(), _pick(rc, DATA_KEYS))
    if run.check_rerun(name, h, force):
        return PhaseResult(name, True, run.phase(name)["artifacts"])
    if stage == 1:
        enc = load_encoder(run.path(enc_entry["artifacts"][0]))
        arch = {k: getattr(enc, k) for k in ("image_size", "f", "patch_size", "dim")}
        if arch != {"image_size": cfg.image_size, "f": cfg.f, "patch_size": cfg.patch_size, "dim": cfg.enc_dim}:
            raise HashMismatch("encoder checkpoint architecture differs from the tokenizer config")
        bundle = TokenizerBundle(cfg, enc)
    else:
        bundle = load_checkpoint(run.path(prev["artifacts"][0]))
        bundle.cfg = cfg
    train, held = load_datasets(rc)
    rel = f"checkpoints/{name}.ckpt"
    run_stage(bundle, StageSchedule.for_stage(Stage(stage), cfg), train, checkpoint_path=run.path(rel),
              records_path=run.records)
    recs = evaluate_tokenizer(bundle.inference(), held, bundle.perceptual, step=stage,
                              tags={"stage": Stage(stage).name.lower()}, split_seed=rc.seed)
    append_records(run.records, [dataclasses.replace(r, name=f"eval/{r.name}") for r in recs])
    run.complete(name, h, [rel], rc, metrics={r.name: r.value for r in recs})
    return PhaseResult(name, False, [rel])


# -- diffusion -------------------------------------------------------------------

def diffusion_phase(run: RunDir, rc, force: bool = False) -> PhaseResult:
    tok_entry = run.require("stage3", "completed tokenizer (stage-3 checkpoint)")
    dcfg = diffusion_config(rc)
    h = _hash("diffusion", tok_entry["config_hash"], dataclasses.asdict(dcfg), _pick(rc, DATA_KEYS))
    if run.check_rerun("diffusion", h, force):
        return PhaseResult("diffusion", True, run.phase("diffusion")["artifacts"])
    bundle = load_checkpoint(run.path(tok_entry["artifacts"][0]))
    train, _ = load_datasets(rc)
    model = DiffusionModel(dcfg, bundle.cfg.d, bundle.cfg.latent_size, train.num_classes)
    train_diffusion(model, bundle, train, records_path=run.records)
    rel = "checkpoints/diffusion.ckpt"
    model.save(run.path(rel))
    run.complete("diffusion", h, [rel], rc, probe_loss_start=model.history[0][2],
                 probe_loss_end=model.history[-1][2])
    return PhaseResult("diffusion", False, [rel])


def to_uint8(images: torch.Tensor) -> np.ndarray:
    return (images.clamp(0, 1) * 255).round().to(torch.uint8).numpy()


def image_grid(images: torch.Tensor, ncol: int) -> np.ndarray:
    arr = to_uint8(images)
    n, h, w, c = arr.shape
    nrow = -(-n // ncol)
    grid = np.full((nrow * h, ncol * w, c), 255, dtype=np.uint8)
    for i in range(n):
        r, col = divmod(i, ncol)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = arr[i]
    return grid


def generate_images(model: DiffusionModel, tokenizer, sampler_cfg: SamplerConfig, class_ids, batch_size: int = 64):
    """Decode one sample per entry of ``class_ids``; batch ``i`` uses seed ``sampler_cfg.seed + i``."""
    class_ids = torch.as_tensor(class_ids, dtype=torch.long)
    out = []
    for i in range(0, len(class_ids), batch_size):
        sc = dataclasses.replace(sampler_cfg, seed=sampler_cfg.seed + i // batch_size)
        ids = class_ids[i:i + batch_size]
        out.append(model.generate(tokenizer, sc, ids, len(ids)))
    return torch.cat(out)


def gfid_proxy(model: DiffusionModel, tokenizer, feat_net, real_images, sampler_cfg: SamplerConfig,
               per_class: int) -> float:
    """Frechet proxy between ``per_class`` generations of every class and the real images."""
    ids = [i % model.num_classes for i in range(per_class * model.num_classes)]
    gen = generate_images(model, tokenizer, sampler_cfg, ids)
    return frechet_feature_distance(feat_net, real_images, gen)


def _class_ids(rc, num_classes: int):
    if rc.class_id >= 0:
        if rc.class_id >= num_classes:
            raise ConfigError(f"class_id {rc.class_id} out of range for {num_classes} classes")
        return [rc.class_id] * rc.n_samples
    return [i % num_classes for i in range(rc.n_samples)]


def sample_phase(run: RunDir, rc, force: bool = False) -> PhaseResult:
    diff_entry = run.require("diffusion", "diffusion checkpoint")
    tok_entry = run.require("stage3", "completed tokenizer (stage-3 checkpoint)")
    sc = sampler_config(rc)
    h = _hash("samples", diff_entry["config_hash"], _pick(rc, SAMPLER_KEYS), rc.n_samples, rc.class_id)
    if run.check_rerun("samples", h, force):
        return PhaseResult("samples", True, run.phase("samples")["artifacts"])
    model = DiffusionModel.load(run.path(diff_entry["artifacts"][0]))
    tok = load_checkpoint(run.path(tok_entry["artifacts"][0])).inference()
    ids = _class_ids(rc, model.num_classes)
    images = generate_images(model, tok, sc, ids)
    arts = []
    for i, (img, k) in enumerate(zip(to_uint8(images), ids)):
        rel = f"samples/sample_{i:04d}_class{k}.png"
        Image.fromarray(img).save(run.path(rel))
        arts.append(rel)
    Image.fromarray(image_grid(images, ncol=min(10, len(ids)))).save(run.path("samples/grid.png"))
    arts.append("samples/grid.png")
    run.complete("samples", h, arts, rc)
    return PhaseResult("samples", False, arts)


# -- evaluation and plots ----------------------------------------------------------

def evaluate_phase(run: RunDir, rc, force: bool = False) -> PhaseResult:
    tok_entry = run.require("stage3", "completed tokenizer (stage-3 checkpoint)")
    diff_entry = run.phase("diffusion")
    sc = sampler_config(rc)
    h = _hash("evaluation", tok_entry["config_hash"], diff_entry and diff_entry["config_hash"],
              _pick(rc, SAMPLER_KEYS + DATA_KEYS), rc.gen_per_class)
    if run.check_rerun("evaluation", h, force):
        return PhaseResult("evaluation", True, run.phase("evaluation")["artifacts"])
    bundle = load_checkpoint(run.path(tok_entry["artifacts"][0]))
    tok = bundle.inference()
    _, held = load_datasets(rc)
    recs = evaluate_tokenizer(tok, held, bundle.perceptual, step=0, tags={"phase": "tokenizer"},
                              split_seed=rc.seed)
    if diff_entry is not None:
        model = DiffusionModel.load(run.path(diff_entry["artifacts"][0]))
        value = gfid_proxy(model, tok, bundle.perceptual, held.images, sc, rc.gen_per_class)
        recs.append(MetricRecord(model.step, "gfid_proxy", value, {"phase": "generation"}))
    append_records(run.records, [dataclasses.replace(r, name=f"final/{r.name}") for r in recs])
    rel = "evaluation.json"
    run.path(rel).write_text(json.dumps({r.name: r.value for r in recs}, indent=2, sort_keys=True))
    run.complete("evaluation", h, [rel], rc)
    return PhaseResult("evaluation", False, [rel])


def plot_phase(run: RunDir, rc=None, force: bool = False) -> PhaseResult:
    from .plots import plot_alignment, plot_diffusion

    if not run.records.exists():
        raise MissingArtifact(f"no records file in {run.root}")
    h = hashlib.sha256(run.records.read_bytes()).hexdigest()[:16]
    if run.check_rerun("plots", h, force):
        return PhaseResult("plots", True, run.phase("plots")["artifacts"])
    records = read_records(run.records)
    arts = []
    for rel, fn in (("plots/alignment.png", plot_alignment), ("plots/diffusion.png", plot_diffusion)):
        if fn(records, run.path(rel)):
            arts.append(rel)
    if not arts:
        raise MissingArtifact("records file holds nothing to plot")
    run.complete("plots", h, arts)
    return PhaseResult("plots", False, arts)
