"""The six block-MLP architecture variants.

Type  layer norm  activation  residual
 1    no          relu        no
 2    no          elu         no
 3    yes         relu        no
 4    yes         elu         no
 5    yes         relu        yes
 6    yes         elu         yes
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ContractError, MaskedParameter, Var, ops, xavier_uniform_init

ARCH_CONFIGS = {
    1: {"use_layer_norm": False, "activation": "relu", "use_residual": False},
    2: {"use_layer_norm": False, "activation": "elu", "use_residual": False},
    3: {"use_layer_norm": True, "activation": "relu", "use_residual": False},
    4: {"use_layer_norm": True, "activation": "elu", "use_residual": False},
    5: {"use_layer_norm": True, "activation": "relu", "use_residual": True},
    6: {"use_layer_norm": True, "activation": "elu", "use_residual": True},
}

LN_EPS = 1e-5


@dataclass(frozen=True)
class ArchConfig:
    use_layer_norm: bool
    activation: str
    use_residual: bool
    residual_placement: str = "pre_layer"
    arch_type: int = 0

    def __post_init__(self):
        if self.activation not in ("relu", "elu"):
            raise ContractError(f"activation must be relu or elu, got {self.activation!r}")
        if self.residual_placement not in ("pre_layer", "post_layer"):
            raise ContractError(f"unknown residual placement {self.residual_placement!r}")
        flags = {"use_layer_norm": self.use_layer_norm, "activation": self.activation,
                 "use_residual": self.use_residual}
        if self.arch_type:
            if ARCH_CONFIGS.get(self.arch_type) != flags:
                raise ContractError(f"flags {flags} do not match architecture type {self.arch_type}")
        else:
            object.__setattr__(self, "arch_type", arch_type_of(**flags))

    @classmethod
    def from_type(cls, arch_type: int, residual_placement: str = "pre_layer") -> "ArchConfig":
        if arch_type not in ARCH_CONFIGS:
            raise ContractError(f"architecture type must be 1..6, got {arch_type}")
        return cls(**ARCH_CONFIGS[arch_type], residual_placement=residual_placement,
                   arch_type=arch_type)


def arch_type_of(use_layer_norm: bool, activation: str, use_residual: bool) -> int:
    flags = {"use_layer_norm": use_layer_norm, "activation": activation, "use_residual": use_residual}
    for k, v in ARCH_CONFIGS.items():
        if v == flags:
            return k
    raise ContractError(f"no architecture type has flags {flags} (residual requires layer norm)")


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden_dim: int
    output_dim: int
    num_blocks: int = 1
    scale: int = 1
    width_scale: int | None = None
    depth_scale: int | None = None

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1 or self.num_blocks < 0:
            raise ContractError(f"invalid network dims {self}")
        if self.scale < 1:
            raise ContractError("scale must be >= 1")

    @property
    def effective_hidden(self) -> int:
        return self.hidden_dim * (self.width_scale or self.scale)

    @property
    def effective_blocks(self) -> int:
        return self.num_blocks * (self.depth_scale or self.scale)


def param_count(shape: NetworkShape, cfg: ArchConfig) -> int:
    """Closed-form parameter count of a BlockMLP."""
    h, b = shape.effective_hidden, shape.effective_blocks
    n = (shape.input_dim + 1) * h + b * 2 * (h * h + h) + (h + 1) * shape.output_dim
    if cfg.use_layer_norm:
        n += 2 * h * (2 * b + 1)
    return n


@dataclass
class LinearLayer:
    weight: MaskedParameter
    bias: MaskedParameter

    def __call__(self, x: Var, track: bool) -> Var:
        return ops.linear(x, self.weight.var(track), self.weight.mask_array(), self.bias.var(track))

    def params(self):
        return [self.weight, self.bias]


def make_linear(n_in: int, n_out: int, rng, name: str, dtype) -> LinearLayer:
    w = MaskedParameter(xavier_uniform_init((n_out, n_in), rng, dtype), f"{name}.weight", sparsifiable=True)
    b = MaskedParameter(np.zeros(n_out, dtype=dtype), f"{name}.bias")
    return LinearLayer(w, b)


@dataclass
class LayerNorm:
    gain: MaskedParameter
    shift: MaskedParameter

    def __call__(self, x: Var, track: bool) -> Var:
        return ops.layer_norm(x, self.gain.var(track), self.shift.var(track), LN_EPS)

    def params(self):
        return [self.gain, self.shift]


def make_layer_norm(h: int, name: str, dtype) -> LayerNorm:
    return LayerNorm(MaskedParameter(np.ones(h, dtype=dtype), f"{name}.gain"),
                     MaskedParameter(np.zeros(h, dtype=dtype), f"{name}.shift"))


@dataclass
class Block:
    linear1: LinearLayer
    linear2: LinearLayer
    ln_in: LayerNorm | None
    ln_mid: LayerNorm | None

    def params(self):
        out = self.linear1.params() + self.linear2.params()
        for ln in (self.ln_in, self.ln_mid):
            if ln is not None:
                out += ln.params()
        return out


@dataclass
class BlockMLP:
    projection: LinearLayer
    blocks: list[Block]
    final_ln: LayerNorm | None
    output: LinearLayer
    config: ArchConfig
    shape: NetworkShape
    name: str = "net"
    features: np.ndarray | None = field(default=None, repr=False)

    def _norm_act(self, x: Var, ln: LayerNorm | None, track: bool) -> Var:
        if ln is None:
            return ops.norm_act(x, None, None, self.config.activation)
        return ops.norm_act(x, ln.gain.var(track), ln.shift.var(track), self.config.activation, LN_EPS)

    def forward(self, x, track: bool = True) -> Var:
        """Run the network; ``track=False`` builds no graph over parameters.

        The pre-output features (after the final normalization/activation) are
        kept in ``self.features`` for diagnostics.
        """
        if not isinstance(x, Var):
            x = Var(np.asarray(x, dtype=self.projection.weight.weight.dtype))
        if x.value.ndim != 2 or x.value.shape[1] != self.shape.input_dim:
            raise ContractError(
                f"{self.name}: expected input with {self.shape.input_dim} columns, got {x.value.shape}")
        post = self.config.residual_placement == "post_layer"
        x = self.projection(x, track)
        for blk in self.blocks:
            y0 = self._norm_act(x, blk.ln_in, track)
            y = self._norm_act(blk.linear1(y0, track), blk.ln_mid, track)
            y = blk.linear2(y, track)
            if self.config.use_residual:
                x = ops.add(y, y0 if post else x)
            else:
                x = y
        x = self._norm_act(x, self.final_ln, track)
        self.features = x.value
        return self.output(x, track)

    __call__ = forward

    def parameters(self) -> list[MaskedParameter]:
        out = self.projection.params()
        for blk in self.blocks:
            out += blk.params()
        if self.final_ln is not None:
            out += self.final_ln.params()
        out += self.output.params()
        return out

    def linear_layers(self) -> list[LinearLayer]:
        return [self.projection] + [l for b in self.blocks for l in (b.linear1, b.linear2)] + [self.output]

    def sparsifiable(self) -> list[MaskedParameter]:
        return [l.weight for l in self.linear_layers()]


def build_block_mlp(shape: NetworkShape, cfg: ArchConfig, rng: np.random.Generator,
                    name: str = "net", dtype=np.float64) -> BlockMLP:
    h = shape.effective_hidden
    ln = cfg.use_layer_norm
    projection = make_linear(shape.input_dim, h, rng, f"{name}.projection", dtype)
    blocks = []
    for i in range(shape.effective_blocks):
        pre = f"{name}.blocks.{i}"
        l1 = make_linear(h, h, rng, f"{pre}.linear1", dtype)
        l2 = make_linear(h, h, rng, f"{pre}.linear2", dtype)
        blocks.append(Block(l1, l2,
                            make_layer_norm(h, f"{pre}.ln_in", dtype) if ln else None,
                            make_layer_norm(h, f"{pre}.ln_mid", dtype) if ln else None))
    final_ln = make_layer_norm(h, f"{name}.final_ln", dtype) if ln else None
    output = make_linear(h, shape.output_dim, rng, f"{name}.output", dtype)
    return BlockMLP(projection, blocks, final_ln, output, cfg, shape, name)


def block_mlp_forward(net: BlockMLP, x) -> np.ndarray:
    return net.forward(x, track=False).value


def post_layer_residual_forward(net: BlockMLP, x) -> np.ndarray:
    """Forward with the residual taken from the normalized/activated block input."""
    cfg = net.config
    if cfg.residual_placement == "post_layer":
        return block_mlp_forward(net, x)
    net.config = ArchConfig(cfg.use_layer_norm, cfg.activation, cfg.use_residual, "post_layer", cfg.arch_type)
    try:
        return block_mlp_forward(net, x)
    finally:
        net.config = cfg
