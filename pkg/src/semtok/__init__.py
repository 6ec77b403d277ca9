"""Semantic-encoder tokenizers aligned for reconstruction, plus a flow-matching latent generator."""

from .datamodel import (ImageBatch, LatentBatch, LatentStats, MetricRecord, TokenizerConfig, compute_latent_stats,
                        denormalize_latents, load_config, normalize_latents, save_config, validate_config)
from .data import Dataset, DatasetSpec, generate_synthetic, ingest_folder, load_dataset
from .encoder import Adapter, FrozenTokenizerRef, PerceptualNet, ToyEncoder, pretrain_toy_encoder, tokenize
from .decoder import Decoder, PatchDiscriminator, decode
from .losses import LossReport, grad_norm_rescale, reconstruction_loss, semantic_preservation_loss
from .trainer import (Stage, StageSchedule, TokenizerBundle, load_checkpoint, run_stage, save_checkpoint,
                      train_step)
from .diffusion import (DiffusionConfig, DiffusionModel, SamplerConfig, VelocityNet, cfg_combine, euler_sample,
                        flow_matching_loss, interpolate_path, train_diffusion, velocity_target)
from .evaluation import evaluate_tokenizer, frechet_distance, linear_probe_accuracy, psnr

__version__ = "0.1.0"

__all__ = [
    "ImageBatch",
    "LatentBatch",
    "LatentStats",
    "MetricRecord",
    "TokenizerConfig",
    "compute_latent_stats",
    "denormalize_latents",
    "load_config",
    "normalize_latents",
    "save_config",
    "validate_config",
    "Dataset",
    "DatasetSpec",
    "generate_synthetic",
    "ingest_folder",
    "load_dataset",
    "Adapter",
    "FrozenTokenizerRef",
    "PerceptualNet",
    "ToyEncoder",
    "pretrain_toy_encoder",
    "tokenize",
    "Decoder",
    "PatchDiscriminator",
    "decode",
    "LossReport",
    "grad_norm_rescale",
    "reconstruction_loss",
    "semantic_preservation_loss",
    "Stage",
    "StageSchedule",
    "TokenizerBundle",
    "load_checkpoint",
    "run_stage",
    "save_checkpoint",
    "train_step",
    "DiffusionConfig",
    "DiffusionModel",
    "SamplerConfig",
    "VelocityNet",
    "cfg_combine",
    "euler_sample",
    "flow_matching_loss",
    "interpolate_path",
    "train_diffusion",
    "velocity_target",
    "evaluate_tokenizer",
    "frechet_distance",
    "linear_probe_accuracy",
    "psnr",
]
