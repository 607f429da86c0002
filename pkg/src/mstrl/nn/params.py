"""Masked parameters, initialization, AdamW and global-norm clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Var


class MaskedParameter:
    """A weight array with a binary mask and per-entry AdamW moments.

    ``grad`` holds the masked gradient consumed by the optimizer while
    ``dense_grad`` keeps the unmasked gradient that topology growth ranks.
    Only weights marked ``sparsifiable`` take part in sparsity bookkeeping;
    biases and layer-norm parameters keep an all-ones mask.
    """

    def __init__(self, weight: np.ndarray, name: str = "", sparsifiable: bool = False):
        self.name = name
        self.weight = weight
        self.mask = np.ones(weight.shape, dtype=bool)
        self.grad = np.zeros_like(weight)
        self.dense_grad = np.zeros_like(weight)
        self.m1 = np.zeros_like(weight)
        self.m2 = np.zeros_like(weight)
        self.step_count = 0
        self.sparsifiable = sparsifiable

    @property
    def shape(self):
        return self.weight.shape

    @property
    def size(self) -> int:
        return self.weight.size

    def active_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def var(self, track: bool = True) -> Var:
        return Var(self.weight, requires_grad=track, param=self if track else None)

    def mask_array(self):
        """Mask to apply in forward passes; None when the parameter is dense."""
        return self.mask if self.sparsifiable else None

    def accumulate_grad(self, g: np.ndarray) -> None:
        self.dense_grad += g
        if self.sparsifiable:
            self.grad += g * self.mask
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad.fill(0.0)
        self.dense_grad.fill(0.0)

    def set_mask(self, mask: np.ndarray) -> None:
        """Install a new mask and zero weights and moments outside it."""
        if mask.shape != self.weight.shape:
            raise ContractError(f"{self.name}: mask shape {mask.shape} != {self.weight.shape}")
        self.mask = mask.astype(bool, copy=True)
        self.apply_mask()

    def apply_mask(self) -> None:
        np.multiply(self.weight, self.mask, out=self.weight)
        np.multiply(self.m1, self.mask, out=self.m1)
        np.multiply(self.m2, self.mask, out=self.m2)

    def __repr__(self):
        return f"MaskedParameter({self.name!r}, shape={self.weight.shape}, active={self.active_count()})"


@dataclass
class OptimizerConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ContractError("grad_clip_norm must be positive when set")


def adamw_step(p: MaskedParameter, cfg: OptimizerConfig) -> None:
    """One AdamW update with bias correction and decoupled weight decay.

    Masked-out entries never move: their gradient is already masked, their
    moments are held at zero and the weight is re-zeroed afterwards.
    """
    g = p.grad
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    p.step_count += 1
    t = p.step_count
    w = p.weight
    if cfg.weight_decay:
        w *= 1.0 - cfg.learning_rate * cfg.weight_decay
    p.m1 *= cfg.beta1
    p.m1 += (1.0 - cfg.beta1) * g
    p.m2 *= cfg.beta2
    p.m2 += (1.0 - cfg.beta2) * (g * g)
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    denom = np.sqrt(p.m2 / bc2)
    denom += cfg.epsilon
    w -= (cfg.learning_rate / bc1) * p.m1 / denom
    if p.sparsifiable:
        p.apply_mask()


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    if not max_norm > 0:
        raise ContractError("max_norm must be positive")
    total = 0.0
    for p in params:
        total += float(np.vdot(p.grad, p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_uniform_init(shape: tuple[int, int], rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out)); shape is (out, in)."""
    fan_out, fan_in = shape
    b = xavier_bound(fan_in, fan_out)
    return rng.uniform(-b, b, size=shape).astype(dtype, copy=False)
