"""Dense numeric substrate: tape gradients, layers, parameter trees, optimiser."""
from __future__ import annotations

import numpy as np

from .layers import (
    AttentionBlockParams,
    MlpParams,
    attention_forward,
    init_attention_block,
    init_mlp,
    mlp_forward,
)
from .oracle import finite_diff_grad, relative_error
from .tape import Tape, Var, grad_backward, value_of

# Dense 2-D matrix, row-major, finite.
Tensor2 = np.ndarray

__all__ = [
    "AttentionBlockParams",
    "MlpParams",
    "Tape",
    "Tensor2",
    "Var",
    "attention_forward",
    "finite_diff_grad",
    "grad_backward",
    "init_attention_block",
    "init_mlp",
    "mlp_forward",
    "relative_error",
    "value_of",
]
