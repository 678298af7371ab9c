"""Differentiable numerics: tensors, reverse-mode tape, Adam, checkpoints."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .optim import Adam, MissingGradientError, PlateauSchedule, clip_gradients
from .tape import (
    DomainError,
    Parameter,
    Tape,
    Tensor,
    PRIMITIVES,
    backward,
    primitive_forward_backward,
)

__all__ = [
    "Adam",
    "Checkpoint",
    "DomainError",
    "MissingGradientError",
    "Parameter",
    "PlateauSchedule",
    "PRIMITIVES",
    "Tape",
    "Tensor",
    "backward",
    "clip_gradients",
    "load_checkpoint",
    "primitive_forward_backward",
    "save_checkpoint",
]
