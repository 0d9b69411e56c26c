"""Differentiable recurrent policy: tape autodiff, GRU actor-critic, Adam."""

from __future__ import annotations

from verlite.nncore import autodiff
from verlite.nncore.autodiff import GradientError, Tensor, backward
from verlite.nncore.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from verlite.nncore.optim import Adam, cosine_lr
from verlite.nncore.policy import (
    Categorical,
    DiagGaussian,
    NonFiniteInputError,
    Params,
    PolicyConfig,
    StepOutput,
    as_tensors,
    final_states,
    forward_packed,
    init_params,
    sample,
    step,
    zero_params,
)

__all__ = [
    "Adam", "Categorical", "Checkpoint", "DiagGaussian", "GradientError", "NonFiniteInputError",
    "Params", "PolicyConfig", "StepOutput", "Tensor", "as_tensors", "autodiff", "backward",
    "cosine_lr", "final_states", "forward_packed", "init_params", "load_checkpoint", "sample",
    "save_checkpoint", "step", "zero_params",
]
