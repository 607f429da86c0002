"""Command-line entry point: ``mstrl run | sweep | plot | inspect-checkpoint``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PRESETS, ConfigError, load_config, parse_text
from .runner import (EXIT_USAGE, SWEEP_AXES, WORKERS_ENV, read_metrics, run_experiment,
                     run_sweep)

log = logging.getLogger("mstrl")


def _flag_overrides(args) -> dict:
    out = {}
    for flag, key in (("task", "task"), ("seed", "seed"), ("steps", "total_steps"),
                      ("scale", "scale"), ("out", "out_dir"), ("eval_interval", "eval_interval"),
                      ("warmup", "warmup_steps"), ("dtype", "dtype")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out.update(parse_text(item))
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key/value config file")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--task", choices=("pendulum", "pointmass"))
    p.add_argument("--steps", type=int, help="total environment steps")
    p.add_argument("--scale", type=int)
    p.add_argument("--sparsity", type=float, help="target sparsity of the sparse modules")
    p.add_argument("--out", help="output directory")
    p.add_argument("--eval-interval", type=int, dest="eval_interval")
    p.add_argument("--warmup", type=int, help="random-action warmup steps")
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key; repeatable")


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1 so that exit 2 stays reserved for non-finite values
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mstrl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train one seeded agent")
    _add_common(run)
    run.add_argument("--seed", type=int)
    run.add_argument("--resume", help="checkpoint to continue from")
    run.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    run.add_argument("--print-config", action="store_true", help="print the canonical config and exit")

    sw = sub.add_parser("sweep", help=f"grid over one axis and several seeds ({WORKERS_ENV} sets workers)")
    _add_common(sw)
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    sw.add_argument("--seeds", required=True, help="comma-separated seeds")
    sw.add_argument("--module", default="critic", help="module the regime/arch_type axis applies to, or 'all'")

    pl = sub.add_parser("plot", help="plot metrics.jsonl files")
    pl.add_argument("metrics", nargs="+")
    pl.add_argument("--key", default="episode_return")
    pl.add_argument("--out", default="plot.png")

    ins = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary as JSON")
    ins.add_argument("path")
    return ap


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.preset, args.sparsity, _flag_overrides(args))
    if args.print_config:
        from .config import canonical_text
        sys.stdout.write(canonical_text(cfg))
        return 0
    res = run_experiment(cfg, resume=args.resume, checkpoint_every=args.checkpoint_every)
    if res.status:
        log.error("run failed: %s", res.message)
    else:
        log.info("finished %d steps, final return %.2f", res.step, res.final_return)
    return res.status


def cmd_sweep(args) -> int:
    seeds = [s for s in args.seeds.split(",") if s.strip()]
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not seeds:
        raise ConfigError("--seeds is empty")
    if args.axis in ("arch_type", "scale"):
        values = [int(v) for v in values]
    base = {}
    if args.config:
        base = parse_text(Path(args.config).read_text(encoding="utf-8"))
    base.update(_flag_overrides(args))
    out = base.pop("out_dir", None) or "runs/sweep"
    # validate the base before launching anything
    load_config(None, args.preset, args.sparsity, base)
    rows = run_sweep(base, args.axis, values, [int(s) for s in seeds], out, args.preset,
                     args.module, 0.6 if args.sparsity is None else args.sparsity)
    for r in rows:
        print(f"{r['cell']}: mean {r['mean_return']:.2f} std {r['std_return']:.2f} failed {r['failed']}")
    return 0 if all(r["failed"] == 0 for r in rows) else 1


def cmd_plot(args) -> int:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.error("plot needs matplotlib")
        return EXIT_USAGE
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in args.metrics:
        rows = [r for r in read_metrics(path) if r.get(args.key) is not None]
        ax.plot([r["step"] for r in rows], [r[args.key] for r in rows], label=str(Path(path).parent))
    ax.set_xlabel("step")
    ax.set_ylabel(args.key)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.out)
    return 0


def cmd_inspect(args) -> int:
    from .agent import read_checkpoint
    header, meta, _, arrays = read_checkpoint(args.path)
    summary = {**header, "t": meta["t"], "r_bar": meta["r_bar"],
               "buffer_size": meta["buffer"]["size"],
               "topology": meta["topology"],
               "episodes": len(meta["episode_returns"]),
               "arrays": {k: list(a.shape) for k, a in arrays.items()}}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "sweep": cmd_sweep, "plot": cmd_plot, "inspect-checkpoint": cmd_inspect}
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        ap.error(str(e))
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
