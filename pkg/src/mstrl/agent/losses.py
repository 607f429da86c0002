"""Reward two-hot targets and the encoder / critic / actor objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..nn import Var, ops

log = logging.getLogger(__name__)

NUM_BINS = 65
BIN_LOW, BIN_HIGH = -10.0, 10.0
BIN_CENTERS = np.linspace(BIN_LOW, BIN_HIGH, NUM_BINS)
BIN_WIDTH = (BIN_HIGH - BIN_LOW) / (NUM_BINS - 1)
HUBER_DELTA = 1.0


@dataclass
class LossWeights:
    lambda_dynamics: float = 1.0
    lambda_reward: float = 0.1
    lambda_terminal: float = 0.1
    lambda_pre_activ: float = 1e-5
    h_enc: int = 5
    h_q: int = 3
    gamma: float = 0.99

    def __post_init__(self):
        for k in ("lambda_dynamics", "lambda_reward", "lambda_terminal", "lambda_pre_activ", "gamma"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be nonnegative")
        if self.h_q > self.h_enc:
            raise ValueError("multi-step horizon may not exceed the encoder horizon")


def symlog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def two_hot_encode(r) -> np.ndarray:
    """Split symlog(r) linearly between its two neighbouring bin centers.

    Accepts a scalar or a 1-D array and returns [..., 65] probabilities.
    """
    r = np.asarray(r, dtype=np.float64)
    u = np.clip(symlog(r), BIN_LOW, BIN_HIGH)
    pos = (u - BIN_LOW) / BIN_WIDTH
    lo = np.clip(np.floor(pos).astype(np.int64), 0, NUM_BINS - 1)
    hi = np.minimum(lo + 1, NUM_BINS - 1)
    w_hi = pos - lo
    out = np.zeros(u.shape + (NUM_BINS,))
    np.put_along_axis(out, lo[..., None], (1.0 - w_hi)[..., None], axis=-1)
    # at the top edge lo == hi and w_hi == 0, so this adds nothing
    hi_vals = np.take_along_axis(out, hi[..., None], axis=-1) + w_hi[..., None]
    np.put_along_axis(out, hi[..., None], hi_vals, axis=-1)
    return out


def two_hot_decode(p) -> np.ndarray:
    return np.asarray(p) @ BIN_CENTERS


def encoder_loss(enc, batch: dict, w: LossWeights, target_zs: np.ndarray) -> tuple[Var, dict]:
    """Unrolled latent-dynamics loss.

    ``target_zs`` is [batch x horizon x z_s] from the frozen state encoder on
    the next states. Steps after a terminal transition are masked.
    """
    states, actions = batch["state"], batch["action"]
    bsz, horizon = states.shape[0], w.h_enc
    if horizon > states.shape[1]:
        raise AssertionError("sub-trajectories are shorter than the encoder horizon")
    alive = batch["alive"]
    zs_dim = enc.zs_dim
    zs = enc.f.forward(states[:, 0], track=True)
    terms = []
    parts = {"dynamics": 0.0, "reward": 0.0, "terminal": 0.0}
    for t in range(horizon):
        pred = enc.predict(zs, actions[:, t], track=True)
        pz = ops.columns(pred, 0, zs_dim)
        pr = ops.columns(pred, zs_dim, zs_dim + NUM_BINS)
        pd = ops.columns(pred, zs_dim + NUM_BINS, zs_dim + NUM_BINS + 1)
        l_dyn = ops.row_mse(pz, target_zs[:, t])
        l_rwd = ops.row_soft_cross_entropy(pr, two_hot_encode(batch["reward"][:, t]))
        l_trm = ops.row_mse(pd, batch["terminal"][:, t:t + 1])
        m = alive[:, t] / bsz
        for name, lam, lv in (("dynamics", w.lambda_dynamics, l_dyn),
                              ("reward", w.lambda_reward, l_rwd),
                              ("terminal", w.lambda_terminal, l_trm)):
            parts[name] += float(np.dot(lv.value, m))
            if lam:
                terms.append(ops.weighted_sum(lv, m * lam))
        zs = pz
    loss = ops.add_scalars(*terms)
    parts["total"] = float(loss.value)
    return loss, parts


def multistep_target(rewards: np.ndarray, alive: np.ndarray, bootstrap_alive: np.ndarray,
                     q_next: np.ndarray, gamma: float, r_bar: float, r_bar_target: float) -> np.ndarray:
    """(sum_t gamma^t r_t + gamma^H r_bar' min Q') / r_bar, masked after terminals."""
    h = rewards.shape[1]
    disc = np.float64(gamma) ** np.arange(h + 1)
    ret = (rewards * alive * disc[:h]).sum(axis=1)
    boot = bootstrap_alive * disc[h] * r_bar_target * q_next
    return (ret + boot) / r_bar


def huber(d, delta: float = HUBER_DELTA):
    ad = np.abs(d)
    return np.where(ad <= delta, 0.5 * d * d, delta * (ad - 0.5 * delta))


def critic_loss(critics, zsa: np.ndarray, target: np.ndarray) -> tuple[Var, np.ndarray, dict]:
    """Huber regression of both critics onto the shared normalized target.

    Returns the loss, critic-1 TD errors and logging scalars.
    """
    bsz = zsa.shape[0]
    wts = np.full(bsz, 1.0 / bsz)
    terms = []
    qs = []
    for c in critics:
        q = c.forward(zsa, track=True)
        qs.append(q.value[:, 0])
        terms.append(ops.weighted_sum(ops.row_huber(q, target, HUBER_DELTA), wts))
    loss = ops.add_scalars(*terms)
    td = qs[0] - target
    return loss, td, {"value": float(loss.value), "q_mean": float(np.mean(qs[0]))}


def actor_loss(actor, enc, critics, zs: np.ndarray, lambda_reg: float) -> tuple[Var, dict]:
    """-1/2 (Q1 + Q2) on the policy action plus a penalty on pre-tanh outputs.

    Encoder and critic parameters are read as constants, so only the actor
    receives gradients.
    """
    bsz = zs.shape[0]
    pre = actor.forward(zs, track=True)
    a = ops.tanh(pre)
    zsa = enc.zsa(Var(zs), a, track=False)
    wts = np.full(bsz, 1.0 / bsz)
    terms = []
    qvals = []
    for c in critics:
        q = c.forward(zsa, track=False)
        qvals.append(float(q.value.mean()))
        terms.append(ops.weighted_sum(ops.row_mean(q), -0.5 * wts))
    penalty = ops.row_square_sum(pre)
    if lambda_reg:
        terms.append(ops.weighted_sum(penalty, lambda_reg * wts))
    loss = ops.add_scalars(*terms)
    return loss, {"policy": float(loss.value), "pre_activ": float(penalty.value.mean()),
                  "q_policy": float(np.mean(qvals))}
