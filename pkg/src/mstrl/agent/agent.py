"""Desk-scale MR.Q-style actor-critic agent with per-module training regimes."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from ..arch import (ArchConfig, BlockMLP, LinearLayer, NetworkShape, build_block_mlp, make_linear,
                    param_count)
from ..diagnostics import dormant_ratio, param_l2, sparsity_report, srank
from ..envs import make_env
from ..nn import OptimizerConfig, Var, adamw_step, backward, clip_grad_norm, ops
from ..nn.checkpoint import params_from_bytes, params_to_bytes
from ..sparse import RegimeConfig, TopologyState, init_topology, regime_step
from .losses import (NUM_BINS, LossWeights, actor_loss, critic_loss, encoder_loss,
                     multistep_target)
from .replay import REWARD_SCALE_FLOOR, ReplayBuffer

log = logging.getLogger(__name__)

MODULES = ("encoder", "critic", "actor")
CHECKPOINT_MAGIC = b"MSTRLCKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModuleConfig:
    arch_type: int = 6
    hidden_dim: int = 128
    num_blocks: int = 1
    residual_placement: str = "pre_layer"
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig.from_type(self.arch_type, self.residual_placement)


@dataclass
class MstAssignment:
    encoder_regime: RegimeConfig
    critic_regime: RegimeConfig
    actor_regime: RegimeConfig

    @classmethod
    def mst(cls, sparsity: float = 0.6, **kw) -> "MstAssignment":
        return cls(RegimeConfig("dense"), RegimeConfig("dst", sparsity, **kw),
                   RegimeConfig("sst", sparsity, **kw))

    def as_dict(self) -> dict:
        return {"encoder": self.encoder_regime, "critic": self.critic_regime, "actor": self.actor_regime}


def default_modules() -> dict[str, ModuleConfig]:
    return {
        "encoder": ModuleConfig(6, optim=OptimizerConfig(1e-4, 1e-4)),
        "critic": ModuleConfig(6, optim=OptimizerConfig(3e-4, 1e-4, grad_clip_norm=20.0)),
        "actor": ModuleConfig(5, optim=OptimizerConfig(3e-4, 1e-4)),
    }


@dataclass
class AgentConfig:
    task: str = "pendulum"
    seed: int = 0
    total_steps: int = 100_000
    scale: int = 1
    zs_dim: int = 128
    zsa_dim: int = 128
    za_dim: int = 64
    modules: dict[str, ModuleConfig] = field(default_factory=default_modules)
    losses: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    target_update: int = 250
    warmup_steps: int = 10_000
    explore_noise: float = 0.2
    target_noise: float = 0.2
    target_noise_clip: float = 0.3
    dtype: str = "float64"
    probe_interval: int = 5000
    probe_size: int = 256

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        for name, m in self.modules.items():
            if name not in MODULES:
                raise ValueError(f"unknown module {name!r}")
            m.arch  # validates the type/placement
            r = m.regime
            if r.scheduled:
                if r.t_start is None:
                    r.t_start = self.warmup_steps
                if r.t_end is None:
                    r.t_end = max(r.t_start + 1, int(round(0.8 * self.total_steps)))
                RegimeConfig.__post_init__(r)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:32]


class Encoder:
    """State encoder f, action embedding, state-action encoder g and predictor m."""

    def __init__(self, f: BlockMLP, embed: LinearLayer, g: BlockMLP, m: LinearLayer, zs_dim: int):
        self.f, self.embed, self.g, self.m = f, embed, g, m
        self.zs_dim = zs_dim

    def zsa(self, zs: Var, a, track: bool) -> Var:
        if not isinstance(a, Var):
            a = Var(np.asarray(a, dtype=self.embed.weight.weight.dtype))
        return self.g.forward(ops.concat([zs, self.embed(a, track)]), track)

    def predict(self, zs: Var, a, track: bool) -> Var:
        return self.m(self.zsa(zs, a, track), track)

    def parameters(self):
        return self.f.parameters() + self.embed.params() + self.g.parameters() + self.m.params()

    def sparsifiable(self, exempt_io: bool = False):
        if exempt_io:
            return ([l.weight for l in self.f.linear_layers()[1:-1]]
                    + [l.weight for l in self.g.linear_layers()[1:-1]])
        return self.f.sparsifiable() + [self.embed.weight] + self.g.sparsifiable() + [self.m.weight]


def _net_sparsifiable(nets, exempt_io: bool):
    out = []
    for n in nets:
        layers = n.linear_layers()
        out += [l.weight for l in (layers[1:-1] if exempt_io else layers)]
    return out


class Agent:
    def __init__(self, cfg: AgentConfig, trace: bool = False):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        ss = np.random.SeedSequence(cfg.seed)
        init_ss, topo_ss, act_ss, sample_ss, env_ss, eval_ss = ss.spawn(6)
        init_rng = np.random.default_rng(init_ss)
        self.topo_rng = np.random.default_rng(topo_ss)
        self.act_rng = np.random.default_rng(act_ss)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.eval_seed = int(eval_ss.generate_state(1)[0])

        self.env = make_env(cfg.task, int(env_ss.generate_state(1)[0]))
        spec = self.env.spec
        self.obs_dim, self.act_dim = spec.obs_dim, spec.act_dim
        self.action_low = np.array(spec.action_low)
        self.action_high = np.array(spec.action_high)

        s = cfg.scale
        zs, zsa = cfg.zs_dim * s, cfg.zsa_dim * s
        self.zs_dim = zs
        mods = cfg.modules
        dt = self.dtype

        def shape(mod, n_in, n_out):
            m = mods[mod]
            return NetworkShape(n_in, m.hidden_dim, n_out, m.num_blocks, s)

        enc = mods["encoder"]
        f = build_block_mlp(shape("encoder", self.obs_dim, zs), enc.arch, init_rng, "encoder.f", dt)
        embed = make_linear(self.act_dim, cfg.za_dim, init_rng, "encoder.embed", dt)
        g = build_block_mlp(shape("encoder", zs + cfg.za_dim, zsa), enc.arch, init_rng, "encoder.g", dt)
        m = make_linear(zsa, zs + NUM_BINS + 1, init_rng, "encoder.m", dt)
        self.encoder = Encoder(f, embed, g, m, zs)
        self.critics = [build_block_mlp(shape("critic", zsa, 1), mods["critic"].arch, init_rng,
                                        f"critic.q{i + 1}", dt) for i in range(2)]
        self.actor = build_block_mlp(shape("actor", zs, self.act_dim), mods["actor"].arch, init_rng, "actor", dt)

        self.module_params = {
            "encoder": self.encoder.parameters(),
            "critic": [p for c in self.critics for p in c.parameters()],
            "actor": self.actor.parameters(),
        }
        self.sparse_params = {
            "encoder": self.encoder.sparsifiable(mods["encoder"].regime.exempt_io),
            "critic": _net_sparsifiable(self.critics, mods["critic"].regime.exempt_io),
            "actor": _net_sparsifiable([self.actor], mods["actor"].regime.exempt_io),
        }
        self.topology: dict[str, TopologyState] = {
            name: init_topology(self.sparse_params[name], mods[name].regime, cfg.total_steps, self.topo_rng,
                                trace)
            for name in MODULES
        }
        self.encoder_target = copy.deepcopy(self.encoder)
        self.critics_target = copy.deepcopy(self.critics)
        self.actor_target = copy.deepcopy(self.actor)

        self.buffer = ReplayBuffer(self.obs_dim, self.act_dim, cfg.buffer_capacity,
                                   max(cfg.losses.h_enc, cfg.losses.h_q), dtype=dt)
        self.r_bar = 1.0
        self.r_bar_target = 1.0
        self.t = 0
        self.obs = self.env.reset()
        self.episode_return = 0.0
        self.episode_returns: list[float] = []
        self.last_losses: dict[str, float] = {}
        self.probe_batch: dict | None = None

    # -- parameter groups ----------------------------------------------------------

    def target_params(self):
        enc = self.encoder_target.parameters()
        return enc + [p for c in self.critics_target for p in c.parameters()] + self.actor_target.parameters()

    def all_params(self):
        return self.module_params["encoder"] + self.module_params["critic"] + self.module_params["actor"]

    def sync_targets(self) -> None:
        for src, dst in zip(self.all_params(), self.target_params()):
            dst.weight[...] = src.weight
            dst.mask[...] = src.mask
        self.r_bar_target = self.r_bar

    # -- acting --------------------------------------------------------------------

    def to_env_action(self, a: np.ndarray) -> np.ndarray:
        return self.action_low + (np.asarray(a) + 1.0) * 0.5 * (self.action_high - self.action_low)

    def policy(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic normalized action in [-1, 1]."""
        zs = self.encoder.f.forward(np.atleast_2d(obs).astype(self.dtype), track=False)
        return np.tanh(self.actor.forward(zs, track=False).value)

    def act(self, obs, mode: str = "eval") -> np.ndarray:
        if mode == "warmup":
            a = self.act_rng.uniform(-1.0, 1.0, self.act_dim)
        elif mode == "explore":
            a = self.policy(obs)[0] + self.act_rng.normal(0.0, self.cfg.explore_noise, self.act_dim)
            a = np.clip(a, -1.0, 1.0)
        elif mode == "eval":
            a = self.policy(obs)[0]
        else:
            raise ValueError(f"unknown action mode {mode!r}")
        return self.to_env_action(a)

    # -- updates -------------------------------------------------------------------

    def _step_module(self, name: str) -> float | None:
        params = self.module_params[name]
        opt = self.cfg.modules[name].optim
        norm = None
        if opt.grad_clip_norm is not None:
            norm = clip_grad_norm(params, opt.grad_clip_norm)
        for p in params:
            adamw_step(p, opt)
        return norm

    def update(self) -> dict:
        cfg, w = self.cfg, self.cfg.losses
        idx, _ = self.buffer.sample_prioritized(cfg.batch_size, self.sample_rng)
        batch = self.buffer.windows(idx)
        bsz, h = cfg.batch_size, w.h_enc
        dt = self.dtype

        # frozen state encoder on every next state of the window
        nxt = batch["next_state"][:, :h].reshape(bsz * h, self.obs_dim)
        target_zs = self.encoder_target.f.forward(nxt, track=False).value.reshape(bsz, h, -1)

        for p in self.module_params["encoder"]:
            p.zero_grad()
        loss, enc_parts = encoder_loss(self.encoder, batch, w, target_zs)
        backward(loss)
        self._step_module("encoder")

        self.r_bar = self.buffer.reward_scale()
        hq = w.h_q
        zs = self.encoder.f.forward(batch["state"][:, 0], track=False)
        zsa = self.encoder.zsa(zs, batch["action"][:, 0], track=False).value
        zs_h = Var(target_zs[:, hq - 1].astype(dt, copy=False))
        a_h = np.tanh(self.actor_target.forward(zs_h, track=False).value)
        noise = np.clip(self.sample_rng.normal(0.0, cfg.target_noise, a_h.shape),
                        -cfg.target_noise_clip, cfg.target_noise_clip)
        a_h = np.clip(a_h + noise, -1.0, 1.0)
        zsa_h = self.encoder_target.zsa(zs_h, a_h, track=False)
        q_next = np.minimum(*[c.forward(zsa_h, track=False).value[:, 0] for c in self.critics_target])
        boot_alive = batch["alive"][:, hq - 1] * (1.0 - batch["terminal"][:, hq - 1])
        target = multistep_target(batch["reward"][:, :hq], batch["alive"][:, :hq], boot_alive,
                                  q_next, w.gamma, self.r_bar, self.r_bar_target).astype(dt)
        for p in self.module_params["critic"]:
            p.zero_grad()
        loss, td, crit_parts = critic_loss(self.critics, zsa, target)
        backward(loss)
        crit_parts["grad_norm"] = self._step_module("critic")
        self.buffer.update_priorities(idx, td)

        for p in self.module_params["actor"]:
            p.zero_grad()
        loss, act_parts = actor_loss(self.actor, self.encoder, self.critics, zs.value, w.lambda_pre_activ)
        backward(loss)
        self._step_module("actor")

        out = {f"encoder_{k}": v for k, v in enc_parts.items()}
        out.update({f"critic_{k}": v for k, v in crit_parts.items()})
        out.update({f"actor_{k}": v for k, v in act_parts.items()})
        out["r_bar"] = self.r_bar
        return out

    def train_step(self) -> dict:
        """One environment step, then one update per module once warmup is over."""
        cfg = self.cfg
        self.t += 1
        t = self.t
        mode = "warmup" if t <= cfg.warmup_steps else "explore"
        action = self.act(self.obs, mode)
        norm_action = 2.0 * (action - self.action_low) / (self.action_high - self.action_low) - 1.0
        nxt, reward, terminal, truncated = self.env.step(action)
        self.buffer.add(self.obs, norm_action, reward, nxt, terminal, truncated)
        self.episode_return += reward
        info: dict = {}
        if terminal or truncated:
            self.episode_returns.append(self.episode_return)
            info["episode_return"] = self.episode_return
            self.episode_return = 0.0
            self.obs = self.env.reset()
        else:
            self.obs = nxt
        if t > cfg.warmup_steps:
            self.last_losses = self.update()
            for name in MODULES:
                if t % cfg.modules[name].regime.update_interval == 0:
                    regime_step(self.topology[name], self.sparse_params[name], t, rng=self.topo_rng)
        if t % cfg.target_update == 0:
            self.sync_targets()
        return info

    # -- evaluation and diagnostics ------------------------------------------------

    def evaluate(self, episodes: int = 5, seed: int | None = None) -> list[float]:
        env = make_env(self.cfg.task)
        returns = []
        base = self.eval_seed if seed is None else seed
        for i in range(episodes):
            obs = env.reset(seed=base + i)
            total, done = 0.0, False
            while not done:
                obs, r, term, trunc = env.step(self.act(obs, "eval"))
                total += r
                done = term or trunc
            returns.append(total)
        return returns

    def _probe_batch(self) -> dict:
        if self.probe_batch is None:
            rng = np.random.default_rng(self.eval_seed)
            n = min(self.cfg.probe_size, len(self.buffer))
            idx = rng.choice(len(self.buffer), size=n, replace=False)
            self.probe_batch = {"state": self.buffer.state[idx].copy(),
                                "action": self.buffer.action[idx].copy()}
        return self.probe_batch

    def diagnostics(self) -> dict:
        """SRank and dormant ratio of each module's pre-output features."""
        pb = self._probe_batch()
        zs = self.encoder.f.forward(pb["state"], track=False)
        zsa = self.encoder.zsa(zs, pb["action"], track=False)
        enc_feat = self.encoder.g.features
        self.critics[0].forward(zsa, track=False)
        crit_feat = self.critics[0].features
        self.actor.forward(zs, track=False)
        act_feat = self.actor.features
        out = {}
        for name, feat in (("encoder", enc_feat), ("critic", crit_feat), ("actor", act_feat)):
            out[f"{name}_srank"] = srank(feat)
            out[f"{name}_dormant_ratio"] = dormant_ratio(feat)
            out[f"{name}_param_l2"] = param_l2(self.module_params[name])
        return out

    def sparsity(self) -> dict:
        return {name: sparsity_report(self.sparse_params[name]) for name in MODULES}

    # -- checkpoints -----------------------------------------------------------------

    def _state_json(self) -> dict:
        return {
            "t": self.t,
            "r_bar": self.r_bar,
            "r_bar_target": self.r_bar_target,
            "obs": self.obs.tolist(),
            "episode_return": self.episode_return,
            "episode_returns": self.episode_returns,
            "rng": {k: getattr(self, k).bit_generator.state for k in ("topo_rng", "act_rng", "sample_rng")},
            "env": self.env.get_state(),
            "buffer": self.buffer.state_dict(),
            "topology": {k: v.to_dict() for k, v in self.topology.items()},
            "probe": None if self.probe_batch is None else
            {k: v.tolist() for k, v in self.probe_batch.items()},
        }

    def save_checkpoint(self, path) -> None:
        n = self.buffer.size if self.buffer.size < self.buffer.capacity else self.buffer.capacity
        meta = self._state_json()
        arrays = []
        for name in ReplayBuffer.ARRAYS:
            a = np.ascontiguousarray(getattr(self.buffer, name)[:n])
            arrays.append((name, a))
        meta["arrays"] = [{"name": k, "dtype": a.dtype.str, "shape": list(a.shape)} for k, a in arrays]
        meta["config"] = self.cfg.to_dict()
        blob = json.dumps(meta, sort_keys=True, default=_json_default).encode()
        params = params_to_bytes(self.all_params() + self.target_params())
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(self.cfg.config_hash().encode("ascii"))
            fh.write(struct.pack("<Q", self.t))
            fh.write(struct.pack("<Q", len(params)))
            fh.write(params)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for _, a in arrays:
                fh.write(a.tobytes())

    @classmethod
    def load_checkpoint(cls, path, cfg: AgentConfig | None = None, trace: bool = False) -> "Agent":
        header, meta, params, arrays = read_checkpoint(path)
        if cfg is None:
            cfg = config_from_dict(meta["config"])
        if header["config_hash"] != cfg.config_hash():
            raise ValueError("checkpoint was written with a different configuration")
        agent = cls(cfg, trace)
        params_from_bytes(agent.all_params() + agent.target_params(), params)
        agent.t = int(meta["t"])
        agent.r_bar, agent.r_bar_target = float(meta["r_bar"]), float(meta["r_bar_target"])
        agent.obs = np.array(meta["obs"], dtype=np.float64)
        agent.episode_return = float(meta["episode_return"])
        agent.episode_returns = [float(x) for x in meta["episode_returns"]]
        for k, st in meta["rng"].items():
            getattr(agent, k).bit_generator.state = st
        agent.env.set_state(meta["env"])
        agent.buffer.load_state_dict(meta["buffer"])
        for name, a in arrays.items():
            getattr(agent.buffer, name)[:len(a)] = a
        for k, d in meta["topology"].items():
            agent.topology[k].load_dict(d)
            if trace:
                agent.topology[k].trace = []
                agent.topology[k].record(agent.t, agent.sparse_params[k])
        if meta["probe"] is not None:
            agent.probe_batch = {k: np.array(v, dtype=agent.dtype) for k, v in meta["probe"].items()}
        return agent


def module_param_counts(cfg: AgentConfig) -> dict[str, int]:
    """Closed-form parameter counts per module, without building the networks."""
    spec = make_env(cfg.task).spec
    s = cfg.scale
    zs, zsa = cfg.zs_dim * s, cfg.zsa_dim * s
    mods = cfg.modules

    def net(mod, n_in, n_out):
        m = mods[mod]
        return param_count(NetworkShape(n_in, m.hidden_dim, n_out, m.num_blocks, s), m.arch)

    def lin(n_in, n_out):
        return (n_in + 1) * n_out

    encoder = (net("encoder", spec.obs_dim, zs) + lin(spec.act_dim, cfg.za_dim)
               + net("encoder", zs + cfg.za_dim, zsa) + lin(zsa, zs + NUM_BINS + 1))
    counts = {"encoder": encoder, "critic": 2 * net("critic", zsa, 1),
              "actor": net("actor", zs, spec.act_dim)}
    counts["total"] = sum(counts.values())
    return counts


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


def read_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(8) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    chash = buf.read(32).decode("ascii")
    (step,) = struct.unpack("<Q", buf.read(8))
    (plen,) = struct.unpack("<Q", buf.read(8))
    params = buf.read(plen)
    (jlen,) = struct.unpack("<Q", buf.read(8))
    meta = json.loads(buf.read(jlen))
    arrays = {}
    for spec in meta["arrays"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"], dtype=np.int64)) * dt.itemsize
        arrays[spec["name"]] = np.frombuffer(buf.read(n), dtype=dt).reshape(spec["shape"])
    header = {"version": version, "config_hash": chash, "step": step}
    return header, meta, params, arrays


def config_from_dict(d: dict) -> AgentConfig:
    d = copy.deepcopy(d)
    mods = {}
    for name, m in d.pop("modules").items():
        regime = RegimeConfig(**m.pop("regime"))
        optim = OptimizerConfig(**m.pop("optim"))
        mods[name] = ModuleConfig(regime=regime, optim=optim, **m)
    losses = LossWeights(**d.pop("losses"))
    return AgentConfig(modules=mods, losses=losses, **d)
