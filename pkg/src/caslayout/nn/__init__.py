"""Differentiable compute layer: functional ops, parameter modules, AdamW, checkpoints."""
from . import functional
from .checkpoint import dumps as dump_checkpoint, loads as load_checkpoint
from .modules import MLP, Attention, Embedding, LayerNorm, Linear, TransformerBlock, init_parameters
from .optim import ParamStore, adamw_step, decayed_lr

__all__ = [
    "functional",
    "dump_checkpoint",
    "load_checkpoint",
    "MLP",
    "Attention",
    "Embedding",
    "LayerNorm",
    "Linear",
    "TransformerBlock",
    "init_parameters",
    "ParamStore",
    "adamw_step",
    "decayed_lr",
]
