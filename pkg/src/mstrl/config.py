"""Experiment configuration: flat dotted key/value files and presets.

A config file holds one ``key = value`` pair per line, e.g.::

    task = "pendulum"
    total_steps = 100000
    critic.regime.kind = "dst"
    critic.regime.sparsity = 0.6

Values are JSON literals; bare words that are not valid JSON are read as
strings. ``#`` starts a comment. Module settings live under ``encoder.``,
``critic.`` and ``actor.``; loss weights under ``losses.``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

from .agent import AgentConfig, config_from_dict
from .agent.agent import MODULES

PRESETS = ("mst", "dense-all", "paper-default")
DEFAULT_SPARSITY = 0.6
EXPERIMENT_KEYS = {"eval_interval": 5000, "eval_episodes": 5, "out_dir": "runs/run"}


class ConfigError(ValueError):
    """Invalid configuration text or values."""


@dataclass
class ExperimentConfig:
    agent: AgentConfig = field(default_factory=AgentConfig)
    eval_interval: int = 5000
    eval_episodes: int = 5
    out_dir: str = "runs/run"

    def __post_init__(self):
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")

    def to_flat(self) -> dict:
        flat = flatten_agent(self.agent.to_dict())
        flat.update(eval_interval=self.eval_interval, eval_episodes=self.eval_episodes,
                    out_dir=self.out_dir)
        return flat


def flatten_agent(d: dict) -> dict:
    flat = {}

    def walk(prefix, node):
        for k, v in node.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict):
                walk(key + ".", v)
            else:
                flat[key] = v

    d = copy.deepcopy(d)
    modules = d.pop("modules")
    walk("", d)
    for name, m in modules.items():
        walk(f"{name}.", m)
    return flat


def _unflatten_agent(flat: dict) -> dict:
    out: dict = {"modules": {}}
    for key, v in flat.items():
        parts = key.split(".")
        node = out["modules"] if parts[0] in MODULES else out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return out


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str) -> dict:
    """Parse config text into a flat {dotted key: value} dict."""
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = parse_value(value)
    return flat


def _strip_comment(line: str) -> str:
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def dump_text(flat: dict) -> str:
    """Canonical form: sorted keys, JSON values."""
    return "".join(f"{k} = {json.dumps(flat[k])}\n" for k in sorted(flat))


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def preset_overrides(name: str, sparsity: float = DEFAULT_SPARSITY) -> dict:
    if name == "mst":
        return {"encoder.arch_type": 6, "critic.arch_type": 6, "actor.arch_type": 5,
                "encoder.regime.kind": "dense", "encoder.regime.sparsity": 0.0,
                "critic.regime.kind": "dst", "critic.regime.sparsity": sparsity,
                "actor.regime.kind": "sst", "actor.regime.sparsity": sparsity}
    if name == "dense-all":
        out = {"encoder.arch_type": 6, "critic.arch_type": 6, "actor.arch_type": 5}
        for m in MODULES:
            out[f"{m}.regime.kind"] = "dense"
            out[f"{m}.regime.sparsity"] = 0.0
        return out
    if name == "paper-default":
        out = {"encoder.arch_type": 4, "critic.arch_type": 4, "actor.arch_type": 3, "scale": 1}
        for m in MODULES:
            out[f"{m}.regime.kind"] = "dense"
            out[f"{m}.regime.sparsity"] = 0.0
        return out
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def set_sparsity(flat: dict, sparsity: float) -> None:
    """Apply one target sparsity to every module whose regime in ``flat`` is sparse."""
    for m in MODULES:
        if flat.get(f"{m}.regime.kind", "dense") != "dense":
            flat[f"{m}.regime.sparsity"] = sparsity
            flat[f"{m}.regime.s_i"] = None
            flat[f"{m}.regime.s_f"] = None


def build_config(overrides: dict | None = None, preset: str | None = None,
                 sparsity: float | None = None) -> ExperimentConfig:
    """Defaults, then preset, then ``overrides``, then the sparsity flag.

    Every key is checked against the known schema and every value against
    its default's type before the agent config is constructed, so invalid
    input fails before anything is allocated.
    """
    base = ExperimentConfig(agent=AgentConfig())
    flat = base.to_flat()
    overrides = dict(overrides or {})
    preset = overrides.pop("preset", None) if preset is None else preset
    overrides.pop("preset", None)
    merged: dict = {}
    if preset is not None:
        merged.update(preset_overrides(preset, DEFAULT_SPARSITY if sparsity is None else sparsity))
    merged.update(overrides)
    if sparsity is not None:
        if not 0.0 <= sparsity < 1.0:
            raise ConfigError(f"sparsity must lie in [0, 1), got {sparsity}")
        set_sparsity(merged, sparsity)
    for key, value in merged.items():
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
        flat[key] = _coerce(key, value, flat[key])
    # a scheduled regime recomputes its window unless given explicitly
    for m in MODULES:
        for k in ("t_start", "t_end"):
            key = f"{m}.regime.{k}"
            if key not in merged:
                flat[key] = None
    exp = {k: flat.pop(k) for k in EXPERIMENT_KEYS}
    try:
        agent = config_from_dict(_unflatten_agent(flat))
        return ExperimentConfig(agent=agent, **exp)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def load_config(path=None, preset: str | None = None, sparsity: float | None = None,
                overrides: dict | None = None) -> ExperimentConfig:
    flat = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            flat = parse_text(fh.read())
    flat.update(overrides or {})
    return build_config(flat, preset, sparsity)


def canonical_text(cfg: ExperimentConfig) -> str:
    return dump_text(cfg.to_flat())
