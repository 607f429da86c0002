"""Plasticity diagnostics: stable rank, dormant ratio, norms and sparsity."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SRANK_DELTA = 0.01
DORMANT_TAU = 0.025
# cumulative-mass comparisons are made with this relative slack so that
# spectra of exactly equal singular values land on the intended k
_MASS_RTOL = 1e-12


def srank_from_singular_values(sv: np.ndarray, delta: float = SRANK_DELTA) -> int:
    sv = np.sort(np.abs(np.asarray(sv, dtype=np.float64)))[::-1]
    total = sv.sum()
    if total == 0.0:
        log.warning("srank of an all-zero feature matrix is defined as 0")
        return 0
    cum = np.cumsum(sv)
    return int(np.searchsorted(cum >= (1.0 - delta) * total * (1.0 - _MASS_RTOL), True) + 1)


def srank(features, delta: float = SRANK_DELTA) -> int:
    """Smallest k whose top-k singular values hold at least 1 - delta of the mass."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("srank expects a 2-D feature matrix")
    if not np.any(f):
        log.warning("srank of an all-zero feature matrix is defined as 0")
        return 0
    return srank_from_singular_values(np.linalg.svd(f, compute_uv=False), delta)


def neuron_scores(activations) -> np.ndarray:
    h = np.abs(np.asarray(activations, dtype=np.float64)).mean(axis=0)
    layer_mean = h.mean()
    if layer_mean == 0.0:
        return np.zeros_like(h)
    return h / layer_mean


def dormant_ratio(activations, tau: float = DORMANT_TAU) -> float:
    """Fraction of neurons whose normalized mean |activation| is at most tau."""
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] < 1:
        raise ValueError("dormant_ratio expects a [batch x neurons] matrix")
    if not np.any(a):
        return 1.0
    return float(np.mean(neuron_scores(a) <= tau))


def param_l2(params) -> float:
    return float(np.sqrt(sum(float(np.vdot(p.weight, p.weight)) for p in params)))


def sparsity_report(params) -> dict:
    """Per-layer and global fraction of masked-out entries."""
    layers = {}
    zeros = total = 0
    for p in params:
        z = p.size - p.active_count()
        layers[p.name] = z / p.size
        zeros += z
        total += p.size
    return {"layers": layers, "global": zeros / total if total else 0.0}


@dataclass
class DiagnosticsRecord:
    step: int
    srank: int
    dormant_ratio: float
    param_l2: float
    layer_sparsity: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def probe(step: int, features, params, delta: float = SRANK_DELTA,
          tau: float = DORMANT_TAU) -> DiagnosticsRecord:
    rep = sparsity_report([p for p in params if p.sparsifiable])
    return DiagnosticsRecord(step, srank(features, delta), dormant_ratio(features, tau),
                             param_l2(params), list(rep["layers"].values()))
