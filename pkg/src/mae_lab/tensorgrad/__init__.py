"""Minimal dense-tensor autodiff: tape-based reverse mode plus AdamW."""

from . import ops
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import AdamWState, adamw_step
from .tensor import NumericOverflowError, Tensor, as_tensor, backward, no_grad, tag, trace

__all__ = [
    "AdamWState",
    "CheckpointFormatError",
    "NumericOverflowError",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "backward",
    "grad_check",
    "load_checkpoint",
    "no_grad",
    "ops",
    "save_checkpoint",
    "tag",
    "trace",
]
