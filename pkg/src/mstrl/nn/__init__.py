"""Dense-array neural-network substrate with masked parameters."""
from __future__ import annotations

import numpy as np

from .params import (
    MaskedParameter,
    OptimizerConfig,
    adamw_step,
    clip_grad_norm,
    xavier_bound,
    xavier_uniform_init,
)
from .tensor import ContractError, Var, backward, const
from . import tensor as ops
from .kernels import tune_allocator

tune_allocator()


def linear_forward(x, p: MaskedParameter, bias) -> np.ndarray:
    """Array-level masked linear map: x (mask * weight)^T + bias."""
    x = np.atleast_2d(np.asarray(x, dtype=p.weight.dtype))
    b = Var(np.asarray(bias, dtype=p.weight.dtype))
    return ops.linear(Var(x), Var(p.weight), p.mask, b).value


def layer_norm_forward(x, gain, shift, eps: float = 1e-5) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return ops.layer_norm(Var(x), Var(np.asarray(gain, dtype=x.dtype)),
                          Var(np.asarray(shift, dtype=x.dtype)), eps).value


def activation(x, kind: str) -> np.ndarray:
    return ops.activation(Var(np.asarray(x, dtype=np.float64)), kind).value


__all__ = [
    "ContractError", "MaskedParameter", "OptimizerConfig", "Var", "activation",
    "adamw_step", "backward", "clip_grad_norm", "const", "layer_norm_forward",
    "linear_forward", "ops", "xavier_bound", "xavier_uniform_init",
]
