"""Training driver: seeded runs, metrics streaming, checkpoints and sweeps."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .agent import Agent, module_param_counts
from .agent.agent import MODULES
from .config import ConfigError, ExperimentConfig, build_config, canonical_text
from .nn import ContractError

log = logging.getLogger(__name__)

WORKERS_ENV = "MSTRL_WORKERS"
SWEEP_AXES = ("regime", "arch_type", "scale")
REGIME_KINDS = ("dense", "sst", "dst", "s2d", "d2s")
EXIT_OK, EXIT_USAGE, EXIT_NAN = 0, 1, 2

LOSS_KEYS = ("encoder_dynamics", "encoder_reward", "encoder_terminal", "encoder_total",
             "critic_value", "critic_q_mean", "critic_grad_norm",
             "actor_policy", "actor_pre_activ", "actor_q_policy")
DIAG_KEYS = tuple(f"{m}_{k}" for m in MODULES for k in ("srank", "dormant_ratio", "param_l2"))


class NonFiniteError(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class RunResult:
    status: int
    step: int
    final_return: float | None
    out_dir: Path
    message: str = ""


def metrics_row(agent: Agent, step: int, eval_returns, diag: dict, wall: float) -> dict:
    row = {"step": step,
           "episode_return": None if eval_returns is None else float(sum(eval_returns) / len(eval_returns)),
           "eval_returns": eval_returns,
           "train_episode_return": agent.episode_returns[-1] if agent.episode_returns else None,
           "r_bar": agent.r_bar}
    for k in LOSS_KEYS:
        v = agent.last_losses.get(k)
        row[k] = None if v is None else float(v)
    for m in MODULES:
        params = agent.sparse_params[m]
        total = sum(p.size for p in params)
        active = [p.active_count() for p in params]
        row[f"{m}_sparsity"] = 1.0 - sum(active) / total if total else 0.0
        row[f"{m}_layer_active"] = active
        row[f"{m}_layer_target"] = list(agent.topology[m].plan.active)
    for k in DIAG_KEYS:
        row[k] = diag.get(k)
    row["wall_time"] = wall
    return row


def _check_finite(step: int, losses: dict) -> None:
    for k, v in losses.items():
        if v is not None and not math.isfinite(v):
            raise NonFiniteError(step, k)


def run_experiment(cfg: ExperimentConfig, out_dir=None, resume=None,
                   checkpoint_every: int | None = None, trace: bool = True) -> RunResult:
    """Train for ``cfg.agent.total_steps`` steps, writing into ``out_dir``.

    Files: ``config.txt`` (canonical config), ``metrics.jsonl`` (one row at
    step 0 unless resuming, then every eval interval and at the final step),
    ``checkpoint.bin`` (final state), ``ckpt_<step>.bin`` when
    ``checkpoint_every`` is set and ``sparsity_trace.csv``.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(canonical_text(cfg), encoding="utf-8")
    if resume is not None:
        agent = Agent.load_checkpoint(resume, cfg.agent, trace=trace)
    else:
        agent = Agent(cfg.agent, trace=trace)
    total = cfg.agent.total_steps
    start = time.perf_counter()
    diag: dict = {}
    mode = "a" if resume is not None else "w"
    status, message = EXIT_OK, ""
    with open(out / "metrics.jsonl", mode, encoding="utf-8") as fh:
        def emit(step):
            rets = agent.evaluate(cfg.eval_episodes)
            row = metrics_row(agent, step, rets, diag, time.perf_counter() - start)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.flush()
            return row

        if resume is None:
            emit(0)
        try:
            while agent.t < total:
                agent.train_step()
                t = agent.t
                _check_finite(t, agent.last_losses)
                if t % cfg.agent.probe_interval == 0 or t == total:
                    if len(agent.buffer) > 0:
                        diag = agent.diagnostics()
                        _check_finite(t, diag)
                if t % cfg.eval_interval == 0 or t == total:
                    emit(t)
                if checkpoint_every and t % checkpoint_every == 0:
                    agent.save_checkpoint(out / f"ckpt_{t}.bin")
        except (ArithmeticError, ContractError) as e:
            status = EXIT_USAGE if isinstance(e, ContractError) else EXIT_NAN
            message = f"step {agent.t}: {e}"
            log.error("run stopped at step %d: %s", agent.t, e)
            fh.write(json.dumps({"step": agent.t, "error": str(e)}) + "\n")
    agent.save_checkpoint(out / "checkpoint.bin")
    if trace:
        _write_trace(agent, out / "sparsity_trace.csv")
    final = agent.evaluate(cfg.eval_episodes) if status == EXIT_OK else None
    final_return = None if final is None else sum(final) / len(final)
    return RunResult(status, agent.t, final_return, out, message)


def _write_trace(agent: Agent, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "module", "layer", "sparsity"])
        for m in MODULES:
            for step, layer, s in agent.topology[m].trace or []:
                w.writerow([step, m, layer, repr(s)])


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- sweeps ------------------------------------------------------------------------------

def cell_overrides(axis: str, value, module: str, sparsity: float) -> dict:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    targets = MODULES if module == "all" else (module,)
    if module != "all" and module not in MODULES:
        raise ConfigError(f"unknown module {module!r}")
    if axis == "scale":
        return {"scale": int(value)}
    out = {}
    for m in targets:
        if axis == "arch_type":
            out[f"{m}.arch_type"] = int(value)
        else:
            if value not in REGIME_KINDS:
                raise ConfigError(f"unknown regime {value!r}")
            out[f"{m}.regime.kind"] = value
            out[f"{m}.regime.sparsity"] = 0.0 if value == "dense" else sparsity
    return out


def _run_cell(args):
    cfg, out_dir = args
    try:
        res = run_experiment(cfg, out_dir)
        return res.status, res.final_return, res.message
    except Exception as e:  # recorded per cell; the sweep carries on
        log.exception("cell %s failed", out_dir)
        return EXIT_USAGE, None, f"{type(e).__name__}: {e}"


def run_sweep(base: dict, axis: str, values, seeds, out_dir, preset: str | None = None,
              module: str = "critic", sparsity: float = 0.6, workers: int | None = None) -> list[dict]:
    """Run every (value, seed) cell and write ``summary.csv`` with one row per value."""
    values, seeds = list(values), list(seeds)
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(out_dir)
    jobs, cells = [], []
    for v in values:
        overrides = {**base, **cell_overrides(axis, v, module, sparsity)}
        cfg0 = build_config(overrides, preset)
        cells.append((v, cfg0))
        for s in seeds:
            cfg = replace(cfg0, agent=replace(cfg0.agent, seed=int(s)))
            jobs.append((cfg, out / f"{axis}={v}" / f"seed={s}"))
    workers = workers or int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows = []
    for i, (v, cfg0) in enumerate(cells):
        res = results[i * len(seeds):(i + 1) * len(seeds)]
        rets = [r for st, r, _ in res if st == EXIT_OK and r is not None]
        counts = module_param_counts(cfg0.agent)
        rows.append({
            "cell": f"{axis}={v}", "axis": axis, "value": v, "seeds": len(seeds),
            "failed": sum(1 for st, _, _ in res if st != EXIT_OK),
            "mean_return": statistics.fmean(rets) if rets else float("nan"),
            "std_return": statistics.pstdev(rets) if rets else float("nan"),
            **{f"params_{k}": n for k, n in counts.items()},
            "errors": "; ".join(m for st, _, m in res if st != EXIT_OK),
        })
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows
