"""Diffusion stages, the relation VAE and their training loops."""
from .batch import FieldLayout, StageBatch, attach_graphs, candidate_slots, stage_batch
from .core import (
    cotrain,
    cotrain_loss,
    ddpm_sample,
    eps_loss,
    recon_loss,
    relation_accuracy,
    train_stage,
    train_vae,
    vae_decode,
    vae_encode,
    vae_loss,
)
from .models import RelationVAE, StageDenoiser
from .schedule import NoiseSchedule, ddpm_loop, q_sample

__all__ = [
    "FieldLayout",
    "StageBatch",
    "attach_graphs",
    "candidate_slots",
    "stage_batch",
    "cotrain",
    "cotrain_loss",
    "ddpm_sample",
    "eps_loss",
    "recon_loss",
    "relation_accuracy",
    "train_stage",
    "train_vae",
    "vae_decode",
    "vae_encode",
    "vae_loss",
    "RelationVAE",
    "StageDenoiser",
    "NoiseSchedule",
    "ddpm_loop",
    "q_sample",
]
