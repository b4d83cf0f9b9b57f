"""Minimal reverse-mode autodiff over dense 4-D (N, C, H, W) arrays."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamW, AdamWConfig, adamw_update
from .tensor import Tensor, backward
from . import ops

__all__ = [
    "Tensor",
    "backward",
    "ops",
    "AdamW",
    "AdamWConfig",
    "adamw_update",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]
