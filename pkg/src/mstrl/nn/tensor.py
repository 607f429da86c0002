"""Tiny reverse-mode autodiff over numpy arrays.

Only the operations needed by the block MLPs and the agent losses are
provided. Every op checks whether any input requires a gradient; if none does
the result is a plain constant node and no backward closure is kept, so target
network forwards cost no more than raw numpy.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "param")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, param=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def const(x, dtype=None) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=dtype))


def _node(value, parents: Sequence[Var], backward_fn: Callable) -> Var:
    if any(p.requires_grad for p in parents):
        return Var(value, tuple(parents), backward_fn, True)
    return Var(value)


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into every parameter reached by the graph.

    Parameter leaves receive the raw gradient in ``dense_grad`` and the masked
    gradient in ``grad``; both are accumulated, so callers zero them first.
    """
    if not isinstance(loss, Var):
        raise ContractError("backward needs the Var produced by a forward pass")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        # constant graph: nothing to propagate
        return

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node.backward_fn is not None:
            grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
        if node.param is not None:
            node.param.accumulate_grad(g)
        if node.backward_fn is not None:
            # interior nodes free their gradient; leaves keep it for inspection
            node.grad = None


# --- elementwise / structural ops -------------------------------------------------

def add(a: Var, b: Var) -> Var:
    def bw(g):
        return g, g
    return _node(a.value + b.value, (a, b), bw)


def sub(a: Var, b: Var) -> Var:
    def bw(g):
        return g, -g
    return _node(a.value - b.value, (a, b), bw)


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value

    def bw(g):
        return g * bv, g * av
    return _node(av * bv, (a, b), bw)


def scale(a: Var, c: float) -> Var:
    def bw(g):
        return (g * c,)
    return _node(a.value * c, (a,), bw)


def relu(x: Var) -> Var:
    xv = x.value
    pos = xv > 0

    def bw(g):
        return (g * pos,)
    return _node(np.where(pos, xv, 0.0).astype(xv.dtype, copy=False), (x,), bw)


def elu(x: Var) -> Var:
    xv = x.value
    neg = np.expm1(np.minimum(xv, 0.0))
    y = np.where(xv > 0, xv, neg)

    def bw(g):
        # slope 1 at x == 0 (right limit)
        return (g * np.where(xv >= 0, 1.0, neg + 1.0),)
    return _node(y, (x,), bw)


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)

    def bw(g):
        return (g * (1.0 - y * y),)
    return _node(y, (x,), bw)


def activation(x: Var, kind: str) -> Var:
    if kind == "relu":
        return relu(x)
    if kind == "elu":
        return elu(x)
    raise ContractError(f"unknown activation {kind!r}")


def concat(parts: Sequence[Var]) -> Var:
    widths = [p.value.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))
    return _node(np.concatenate([p.value for p in parts], axis=1), tuple(parts), bw)


def columns(x: Var, start: int, stop: int) -> Var:
    xv = x.value

    def bw(g):
        out = np.zeros_like(xv)
        out[:, start:stop] = g
        return (out,)
    return _node(xv[:, start:stop], (x,), bw)


def linear(x: Var, w: Var, mask: np.ndarray | None, b: Var | None) -> Var:
    """y = x (mask * w)^T + b."""
    xv = x.value
    if xv.ndim != 2 or xv.shape[1] != w.value.shape[1]:
        raise ContractError(
            f"linear: input shape {xv.shape} does not match weight shape {w.value.shape}")
    weff = w.value if mask is None else w.value * mask
    y = xv @ weff.T
    if b is not None:
        if b.value.shape != (weff.shape[0],):
            raise ContractError(f"linear: bias shape {b.value.shape} != ({weff.shape[0]},)")
        y += b.value
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ weff if x.requires_grad else None
        gw = g.T @ xv if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)
    return _node(y, parents, bw)


def layer_norm(x: Var, gain: Var, shift: Var, eps: float = 1e-5) -> Var:
    xv = x.value
    if gain.value.shape != (xv.shape[1],) or shift.value.shape != (xv.shape[1],):
        raise ContractError("layer_norm: gain/shift length must equal the number of columns")
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gain.value
    y = xhat * gv + shift.value

    def bw(g):
        dxhat = g * gv
        gx = None
        if x.requires_grad:
            gx = rstd * (dxhat - dxhat.mean(axis=1, keepdims=True)
                         - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
        ggain = (g * xhat).sum(axis=0) if gain.requires_grad else None
        gshift = g.sum(axis=0) if shift.requires_grad else None
        return gx, ggain, gshift
    return _node(y, (x, gain, shift), bw)


def norm_act(x: Var, gain: Var | None, shift: Var | None, kind: str, eps: float = 1e-5) -> Var:
    """activation(layer_norm(x)) in one fused pass; no norm when gain is None."""
    from .kernels import norm_act_backward, norm_act_forward

    if kind not in ("relu", "elu"):
        raise ContractError(f"unknown activation {kind!r}")
    use_ln = gain is not None
    use_elu = kind == "elu"
    xv = np.ascontiguousarray(x.value)
    if use_ln:
        if gain.value.shape != (xv.shape[1],) or shift.value.shape != (xv.shape[1],):
            raise ContractError("layer_norm: gain/shift length must equal the number of columns")
        gv, sv = gain.value, shift.value
    else:
        gv = sv = np.zeros(0, dtype=xv.dtype)
    y, xhat, rstd = norm_act_forward(xv, gv, sv, eps, use_ln, use_elu)

    def bw(g):
        dx, dgain, dshift = norm_act_backward(np.ascontiguousarray(g), y, xhat, rstd, gv,
                                              use_ln, use_elu, x.requires_grad)
        if not use_ln:
            return (dx,)
        return (dx if x.requires_grad else None,
                dgain if gain.requires_grad else None,
                dshift if shift.requires_grad else None)
    parents = (x, gain, shift) if use_ln else (x,)
    return _node(y, parents, bw)


# --- reductions and loss heads ------------------------------------------------------

def weighted_sum(v: Var, w: np.ndarray) -> Var:
    """Scalar sum_i w_i v_i over a 1-D vector of per-row losses."""
    vv = v.value

    def bw(g):
        return (g * w,)
    return _node(np.asarray(np.dot(vv, w)), (v,), bw)


def mean(x: Var) -> Var:
    n = x.value.size

    def bw(g):
        return (np.full_like(x.value, g / n),)
    return _node(np.asarray(x.value.mean()), (x,), bw)


def add_scalars(*terms: Var) -> Var:
    def bw(g):
        return tuple(g for _ in terms)
    return _node(np.asarray(sum(t.value for t in terms)), terms, bw)


def row_mse(pred: Var, target: np.ndarray) -> Var:
    """Per-row mean squared error against a constant target."""
    d = pred.value - target
    n = d.shape[1]

    def bw(g):
        return (g[:, None] * (2.0 / n) * d,)
    return _node(np.mean(d * d, axis=1), (pred,), bw)


def row_soft_cross_entropy(logits: Var, target_probs: np.ndarray) -> Var:
    """Per-row cross entropy -sum_k p_k log softmax(logits)_k."""
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse

    def bw(g):
        soft = np.exp(logp)
        return (g[:, None] * (soft * target_probs.sum(axis=1, keepdims=True) - target_probs),)
    return _node(-(target_probs * logp).sum(axis=1), (logits,), bw)


def row_huber(pred: Var, target: np.ndarray, delta: float = 1.0) -> Var:
    """Per-row Huber loss for a single-column prediction."""
    d = pred.value[:, 0] - target
    ad = np.abs(d)
    quad = ad <= delta
    loss = np.where(quad, 0.5 * d * d, delta * (ad - 0.5 * delta))

    def bw(g):
        dd = np.where(quad, d, delta * np.sign(d))
        return ((g * dd)[:, None],)
    return _node(loss, (pred,), bw)


def row_square_sum(x: Var) -> Var:
    """Per-row mean of squares."""
    xv = x.value
    n = xv.shape[1]

    def bw(g):
        return (g[:, None] * (2.0 / n) * xv,)
    return _node(np.mean(xv * xv, axis=1), (x,), bw)


def row_mean(x: Var) -> Var:
    xv = x.value
    n = xv.shape[1]

    def bw(g):
        return (np.repeat(g[:, None] / n, n, axis=1),)
    return _node(xv.mean(axis=1), (x,), bw)
