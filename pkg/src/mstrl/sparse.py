"""Sparsity allocation, pruning schedules and RigL topology updates."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import ContractError, MaskedParameter

log = logging.getLogger(__name__)

REGIMES = ("dense", "sst", "dst", "s2d", "d2s")


class InfeasibleSparsity(ValueError):
    pass


def round_count(x: float) -> int:
    # Python's round is half-to-even
    return int(round(x))


@dataclass
class RegimeConfig:
    kind: str = "dense"
    sparsity: float = 0.0
    allocation: str = "er"
    zeta_initial: float = 0.3
    zeta_final: float = 0.0
    update_interval: int = 1000
    s_i: float | None = None
    s_f: float | None = None
    t_start: int | None = None
    t_end: int | None = None
    lam: float = 2.0
    growth: str = "gradient"
    grow_dropped: bool = False
    exempt_io: bool = False

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ContractError(f"regime kind must be one of {REGIMES}, got {self.kind!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ContractError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.kind == "dense" and self.sparsity != 0.0:
            raise ContractError("dense regime requires sparsity 0")
        if self.allocation not in ("er", "uniform"):
            raise ContractError(f"unknown allocation {self.allocation!r}")
        if self.growth not in ("gradient", "random"):
            raise ContractError(f"unknown growth mode {self.growth!r}")
        if self.update_interval < 1:
            raise ContractError("update_interval must be >= 1")
        if not self.lam > 0:
            raise ContractError("lambda must be positive")
        if self.kind == "d2s":
            self.s_i = 0.0 if self.s_i is None else self.s_i
            self.s_f = self.sparsity if self.s_f is None else self.s_f
            if (self.s_i, self.s_f) != (0.0, self.sparsity):
                raise ContractError("d2s requires s_i = 0 and s_f = sparsity")
        elif self.kind == "s2d":
            self.s_i = self.sparsity if self.s_i is None else self.s_i
            self.s_f = 0.0 if self.s_f is None else self.s_f
            if (self.s_i, self.s_f) != (self.sparsity, 0.0):
                raise ContractError("s2d requires s_i = sparsity and s_f = 0")
        if self.t_start is not None and self.t_end is not None and not self.t_start < self.t_end:
            raise ContractError("t_start must precede t_end")

    @property
    def initial_sparsity(self) -> float:
        if self.kind in ("sst", "dst"):
            return self.sparsity
        if self.kind == "s2d":
            return self.s_i
        return 0.0

    @property
    def scheduled(self) -> bool:
        return self.kind in ("d2s", "s2d")


@dataclass
class LayerSparsityPlan:
    sparsities: list[float]
    counts: list[int]
    active: list[int]

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def pruned(self) -> int:
        return sum(n - a for n, a in zip(self.counts, self.active))

    @property
    def global_sparsity(self) -> float:
        return self.pruned / self.total


def _plan_from_active(counts, active) -> LayerSparsityPlan:
    return LayerSparsityPlan([1.0 - a / n for a, n in zip(active, counts)], list(counts), list(active))


def _integer_allocation(groups: list[tuple[int, int, float]], target: int) -> list[int]:
    """Pick an integer per-layer active count for each shape group.

    ``groups`` holds (layer count g, per-layer size N, continuous active a).
    Layers of one group share a count so equal shapes keep equal sparsity,
    which moves a group's total in steps of its size. Each group may shift
    up to the largest group size away from its rounded value, so singleton
    layers can absorb what a big group of identical layers cannot. A DP over
    these options hits the global target as closely as possible, preferring
    the smallest total rounding error.
    """
    reach = max(g for g, _, _ in groups)
    # state: total -> (rounding cost, choices)
    states: dict[int, tuple[float, tuple[int, ...]]] = {0: (0.0, ())}
    for g, n, a in groups:
        base = round_count(a)
        options = sorted({min(n, max(0, base + d)) for d in range(-reach, reach + 1)})
        nxt: dict[int, tuple[float, tuple[int, ...]]] = {}
        for tot, (cost, ch) in states.items():
            for v in options:
                key = tot + g * v
                c = cost + g * abs(v - a)
                if key not in nxt or c < nxt[key][0] - 1e-12:
                    nxt[key] = (c, ch + (v,))
        states = nxt
    best = min(states, key=lambda k: (abs(k - target), states[k][0]))
    return list(states[best][1])


def er_layer_sparsities(shapes, sparsity: float) -> LayerSparsityPlan:
    """Erdos-Renyi allocation: density proportional to (n_in + n_out) / (n_in n_out).

    The proportionality constant is found by bisection with densities capped
    at 1, then layer counts are rounded so the global pruned count lands
    within one parameter of ``sparsity * total``.
    """
    if not shapes:
        raise ContractError("ER allocation needs at least one layer")
    if not 0.0 <= sparsity < 1.0:
        raise ContractError(f"sparsity must lie in [0, 1), got {sparsity}")
    shapes = [(int(a), int(b)) for a, b in shapes]
    counts = [a * b for a, b in shapes]
    total = sum(counts)
    if sparsity == 0.0:
        return _plan_from_active(counts, counts)
    ratios = np.array([(a + b) / (a * b) for a, b in shapes])
    n = np.array(counts, dtype=np.float64)
    target = (1.0 - sparsity) * total

    def active_at(eps):
        return float(np.sum(np.minimum(1.0, eps * ratios) * n))

    lo, hi = 0.0, float(1.0 / ratios.min())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if active_at(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    eps = 0.5 * (lo + hi)
    dens = np.minimum(1.0, eps * ratios)

    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(shapes):
        groups.setdefault(s, []).append(i)
    keys = list(groups)
    layout = [(len(groups[k]), counts[groups[k][0]], dens[groups[k][0]] * counts[groups[k][0]]) for k in keys]
    per_group = _integer_allocation(layout, total - round_count(sparsity * total))
    active = [0] * len(shapes)
    for k, v in zip(keys, per_group):
        for i in groups[k]:
            active[i] = v
    if min(active) < 1:
        raise InfeasibleSparsity(
            f"sparsity {sparsity} leaves a layer with no connections under ER allocation")
    return _plan_from_active(counts, active)


def uniform_layer_sparsities(shapes, sparsity: float) -> LayerSparsityPlan:
    counts = [int(a) * int(b) for a, b in shapes]
    active = [n - round_count(sparsity * n) for n in counts]
    if min(active) < 1:
        raise InfeasibleSparsity(f"sparsity {sparsity} leaves a layer with no connections")
    return _plan_from_active(counts, active)


def layer_plan(shapes, sparsity: float, allocation: str = "er") -> LayerSparsityPlan:
    if allocation == "uniform":
        return uniform_layer_sparsities(shapes, sparsity)
    return er_layer_sparsities(shapes, sparsity)


def param_shapes(params: list[MaskedParameter]) -> list[tuple[int, int]]:
    # weights are stored (out, in)
    return [(p.shape[1], p.shape[0]) for p in params]


def one_shot_random_prune(params: list[MaskedParameter], plan: LayerSparsityPlan,
                          rng: np.random.Generator) -> None:
    """Zero exactly N_l - active_l uniformly chosen entries per layer."""
    for p, n, a in zip(params, plan.counts, plan.active):
        if p.size != n:
            raise ContractError(f"{p.name}: plan size {n} != parameter size {p.size}")
        k = n - a
        mask = np.ones(n, dtype=bool)
        if k:
            mask[rng.choice(n, size=k, replace=False)] = False
        p.set_mask(mask.reshape(p.shape))


def cosine_zeta(t: float, T: float, z_i: float, z_f: float) -> float:
    """Drop fraction decayed from z_i at t=0 to z_f at t=T along a half cosine."""
    if not 0 <= t <= T:
        raise ContractError(f"cosine_zeta needs 0 <= t <= T, got t={t}, T={T}")
    return z_f + 0.5 * (z_i - z_f) * (1.0 + math.cos(math.pi * t / T))


def sparsity_schedule(t: float, s_i: float, s_f: float, t_start: float, t_end: float,
                      lam: float = 2.0) -> float:
    """Polynomial interpolation from s_i to s_f over [t_start, t_end]."""
    if not t_start < t_end:
        raise ContractError("sparsity_schedule needs t_start < t_end")
    if t <= t_start:
        return s_i
    if t >= t_end:
        return s_f
    frac = 1.0 - (t - t_start) / (t_end - t_start)
    s = s_f + (s_i - s_f) * frac ** lam
    return min(max(s, min(s_i, s_f)), max(s_i, s_f))


def _zero_entries(p: MaskedParameter, idx: np.ndarray) -> None:
    p.weight.reshape(-1)[idx] = 0.0
    p.m1.reshape(-1)[idx] = 0.0
    p.m2.reshape(-1)[idx] = 0.0


def _smallest_active(p: MaskedParameter, k: int) -> np.ndarray:
    active = np.flatnonzero(p.mask)
    order = np.argsort(np.abs(p.weight.reshape(-1)[active]), kind="stable")
    return active[order[:k]]


def _largest_grad(candidates: np.ndarray, dense_grad: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-np.abs(dense_grad.reshape(-1)[candidates]), kind="stable")
    return candidates[order[:k]]


def rigl_update(p: MaskedParameter, dense_grad: np.ndarray, zeta_t: float, s_l: float,
                grow_dropped: bool = False, growth: str = "gradient",
                rng: np.random.Generator | None = None) -> tuple[int, int]:
    """Drop the k smallest-magnitude active weights and grow k inactive ones.

    k = round(zeta_t (1 - s_l) N_l), capped at the active count. Growth ranks
    entries that were inactive before the update by |dense_grad| (or picks
    them at random for ``growth="random"``); ties go to the smallest
    row-major index. Grown weights and their moments start at zero.
    Returns (dropped, grown).
    """
    if dense_grad.shape != p.shape:
        raise ContractError(f"{p.name}: dense gradient shape {dense_grad.shape} != {p.shape}")
    n = p.size
    k = min(round_count(zeta_t * (1.0 - s_l) * n), p.active_count())
    if k <= 0:
        return 0, 0
    mask = p.mask.reshape(-1)
    candidates = np.flatnonzero(~mask)
    drop = _smallest_active(p, k)
    if grow_dropped:
        candidates = np.sort(np.concatenate([candidates, drop]))
    if len(candidates) < k:
        log.warning("%s: only %d growth candidates for k=%d; keeping %d dropped weights",
                    p.name, len(candidates), k, k - len(candidates))
        k = len(candidates)
        drop = drop[:k]
        if k == 0:
            return 0, 0
    if growth == "random":
        if rng is None:
            raise ContractError("random growth needs an rng")
        grow = np.sort(rng.choice(candidates, size=k, replace=False))
    else:
        grow = _largest_grad(candidates, dense_grad, k)
    mask[drop] = False
    _zero_entries(p, drop)
    mask[grow] = True
    _zero_entries(p, grow)
    return len(drop), len(grow)


def retarget_active(p: MaskedParameter, target_active: int, dense_grad: np.ndarray) -> int:
    """Prune lowest-|w| actives or grow highest-|grad| inactives to hit a count.

    Returns the signed change in active entries.
    """
    cur = p.active_count()
    mask = p.mask.reshape(-1)
    if target_active < cur:
        drop = _smallest_active(p, cur - target_active)
        mask[drop] = False
        _zero_entries(p, drop)
    elif target_active > cur:
        grow = _largest_grad(np.flatnonzero(~mask), dense_grad, target_active - cur)
        mask[grow] = True
        _zero_entries(p, grow)
    return target_active - cur


@dataclass
class TopologyState:
    regime: RegimeConfig
    total_steps: int
    plan: LayerSparsityPlan
    shapes: list[tuple[int, int]]
    names: list[str]
    step: int = 0
    dropped: list[int] = field(default_factory=list)
    grown: list[int] = field(default_factory=list)
    trace: list[tuple[int, str, float]] | None = None

    def __post_init__(self):
        if not self.dropped:
            self.dropped = [0] * len(self.shapes)
        if not self.grown:
            self.grown = [0] * len(self.shapes)

    def record(self, t: int, params: list[MaskedParameter]) -> None:
        if self.trace is not None:
            for p in params:
                self.trace.append((t, p.name, 1.0 - p.active_count() / p.size))

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "layer", "sparsity"])
            w.writerows(self.trace or [])

    def to_dict(self) -> dict:
        return {"step": self.step, "dropped": list(self.dropped), "grown": list(self.grown),
                "plan_active": list(self.plan.active)}

    def load_dict(self, d: dict) -> None:
        self.step = int(d["step"])
        self.dropped = [int(x) for x in d["dropped"]]
        self.grown = [int(x) for x in d["grown"]]
        self.plan = _plan_from_active(self.plan.counts, [int(x) for x in d["plan_active"]])


def init_topology(params: list[MaskedParameter], regime: RegimeConfig, total_steps: int,
                  rng: np.random.Generator, trace: bool = False) -> TopologyState:
    """Build the initial masks for a module and return its topology state."""
    shapes = param_shapes(params)
    plan = layer_plan(shapes, regime.initial_sparsity, regime.allocation)
    if regime.kind in ("sst", "dst", "s2d"):
        one_shot_random_prune(params, plan, rng)
    state = TopologyState(regime, total_steps, plan, shapes, [p.name for p in params],
                          trace=[] if trace else None)
    state.record(0, params)
    return state


def regime_step(state: TopologyState, params: list[MaskedParameter], t: int,
                dense_grads: list[np.ndarray] | None = None,
                rng: np.random.Generator | None = None) -> None:
    """Apply one topology update for the module's regime at step t."""
    regime = state.regime
    state.step = t
    if regime.kind in ("dense", "sst"):
        return
    if dense_grads is None:
        dense_grads = [p.dense_grad for p in params]
    zeta = cosine_zeta(min(t, state.total_steps), state.total_steps,
                       regime.zeta_initial, regime.zeta_final)
    if regime.scheduled:
        s_t = sparsity_schedule(t, regime.s_i, regime.s_f, regime.t_start, regime.t_end, regime.lam)
        state.plan = layer_plan(state.shapes, s_t, regime.allocation)
        for i, (p, g, a) in enumerate(zip(params, dense_grads, state.plan.active)):
            delta = retarget_active(p, a, g)
            if delta < 0:
                state.dropped[i] -= delta
            else:
                state.grown[i] += delta
    for i, (p, g, s_l) in enumerate(zip(params, dense_grads, state.plan.sparsities)):
        if p.active_count() == p.size:
            # a fully dense layer has nothing to exchange
            continue
        d, gr = rigl_update(p, g, zeta, s_l, regime.grow_dropped, regime.growth, rng)
        state.dropped[i] += d
        state.grown[i] += gr
    state.record(t, params)
