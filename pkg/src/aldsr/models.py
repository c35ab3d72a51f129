"""Network definitions, parameter accounting, initialization, and configs.

Two runnable architectures are built here: the residual feature block
(FeatureBlock) that chains attention-aware depthwise layers with a
carried state channel, and the full super-resolution network (SRNetwork)
that stacks those blocks between a shallow feature conv and a sub-pixel
upsampling tail. A third family of dense blocks exists purely so their
parameter counts can be tabulated and compared; those are never run
forward.

All convolutions are bias-free; the only biases live inside the gate
MLPs of the attention branches.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    concat,
    conv2d,
    pixel_shuffle,
    pointwise_conv,
    relu,
)
from .layers import (
    AttentionBranch,
    DepthwiseFilterBank,
    DescriptorKind,
    ald_forward,
    dw_forward,
    ldw_forward,
)

__all__ = [
    "Module",
    "Conv3x3",
    "PointwiseLayer",
    "ALDConv",
    "FeatureBlock",
    "SRNetwork",
    "ModelConfig",
    "DESCRIPTOR_NAMES",
    "build_model",
    "build_dense_block",
    "count_parameters",
    "parameter_breakdown",
    "reconcile_attention_conventions",
    "init_weights",
    "parse_config",
    "serialize_config",
    "config_hash",
]


class Module:
    """Minimal parameter container with stable, path-like parameter names.

    Parameters are registered in construction order; named_parameters()
    yields them depth-first in that order, which fixes the RNG draw order
    during init and the serialization order on disk.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_param(self, name: str, t: Tensor):
        self._params[name] = t
        return t

    def register_child(self, name: str, m: "Module"):
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = ""):
        for name, t in self._params.items():
            yield (prefix + name, t)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grads(self):
        for t in self.parameters():
            t.grad = None

    def state(self) -> dict:
        return {name: t.data for name, t in self.named_parameters()}

    def load_state(self, arrays: dict):
        mine = dict(self.named_parameters())
        for name, t in mine.items():
            if name not in arrays:
                raise KeyError(f"missing parameter in state: {name}")
            arr = arrays[name]
            if tuple(arr.shape) != t.shape:
                raise ShapeError(
                    f"parameter {name} has shape {t.shape}, state provides {tuple(arr.shape)}"
                )
            t.data = np.ascontiguousarray(arr.astype(t.dtype, copy=False))
        extra = [n for n in arrays if n not in mine]
        if extra:
            raise KeyError(f"state has unknown parameters: {extra[:3]}")


class Conv3x3(Module):
    """Bias-free 3x3 convolution with same-size padding."""

    def __init__(self, cin: int, cout: int, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(np.zeros((cout, cin, 3, 3), dtype=dtype), requires_grad=True)

    def forward(self, x):
        return conv2d(x, self.weight)


class PointwiseLayer(Module):
    """Bias-free 1x1 convolution (channel mixer)."""

    def __init__(self, cin: int, cout: int, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(np.zeros((cout, cin), dtype=dtype), requires_grad=True)

    def forward(self, x):
        return pointwise_conv(x, self.weight)


class ALDConv(Module):
    """One attention-aware linear depthwise layer as a module.

    hasty_relu switches to the conventional variant with an activation
    directly after the depthwise stage; gate=False drops the attention
    branch entirely (plain linear depthwise). Both switches exist for the
    parameter-count comparisons and ablations.
    """

    def __init__(
        self,
        cin: int,
        cout: int,
        r: int = 16,
        kind: DescriptorKind = DescriptorKind.DETERMINANT,
        gate: bool = True,
        gate_bias: bool = True,
        hasty_relu: bool = False,
        dtype=np.float32,
    ):
        super().__init__()
        self.kind = kind
        self.hasty_relu = hasty_relu
        self.bank = DepthwiseFilterBank.create(cin, dtype)
        self.register_param("depthwise", self.bank.filters)
        self.pointwise = Tensor(np.zeros((cout, cin), dtype=dtype), requires_grad=True)
        self.branch = None
        if gate:
            self.branch = AttentionBranch(cin, r, bias=gate_bias, dtype=dtype)
            for n, t in self.branch.parameters():
                self.register_param(f"gate.{n}", t)

    def forward(self, x):
        if self.branch is not None:
            return ald_forward(x, self.bank, self.pointwise, self.branch, self.kind)
        if self.hasty_relu:
            return dw_forward(x, self.bank, self.pointwise)
        return ldw_forward(x, self.bank, self.pointwise)


class FeatureBlock(Module):
    """Residual block of ALD convs with a carried state channel.

    The n ALD convs (n even) run in consecutive pairs, each pair wrapped
    in a local residual add. The incoming state passes through a 1x1
    bottleneck, is concatenated with the residual output (2C channels),
    and a 1x1 fusion halves that back to C. The fused map is both the
    block output and the state handed to the next block.
    """

    def __init__(
        self,
        channels: int,
        n_convs: int = 4,
        r: int = 16,
        kind: DescriptorKind = DescriptorKind.DETERMINANT,
        dtype=np.float32,
    ):
        super().__init__()
        if n_convs < 2 or n_convs % 2 != 0:
            raise ShapeError(f"n_convs must be even and >= 2, got {n_convs}")
        self.channels = channels
        self.convs = [
            ALDConv(channels, channels, r=r, kind=kind, dtype=dtype)
            for _ in range(n_convs)
        ]
        for i, conv in enumerate(self.convs):
            self.register_child(f"convs.{i}", conv)
        self.state_proj = PointwiseLayer(channels, channels, dtype)
        self.fuse = PointwiseLayer(2 * channels, channels, dtype)

    def forward(self, x, state):
        h = x
        for i in range(0, len(self.convs), 2):
            y = self.convs[i + 1].forward(self.convs[i].forward(h))
            h = add(h, y)
        sp = self.state_proj.forward(state)
        fused = self.fuse.forward(concat(sp, h, axis=1))
        return fused, fused


class SRNetwork(Module):
    """Full super-resolution model: shallow conv, B feature blocks with a
    threaded state, a global residual, sub-pixel upsampling, and a 3-channel
    reconstruction conv.

    Scale 4 upsamples in two x2 stages (conv C->4C + shuffle, twice);
    scales 2 and 3 use a single conv C->C*s^2 + shuffle.
    """

    SCALES = (2, 3, 4)

    def __init__(
        self,
        n_blocks: int = 10,
        channels: int = 64,
        scale: int = 4,
        r: int = 16,
        kind: DescriptorKind = DescriptorKind.DETERMINANT,
        n_convs: int = 4,
        dtype=np.float32,
    ):
        super().__init__()
        if scale not in self.SCALES:
            raise ShapeError(f"scale must be one of {self.SCALES}, got {scale}")
        self.scale = scale
        self.channels = channels
        self.shallow = Conv3x3(3, channels, dtype)
        self.blocks = [
            FeatureBlock(channels, n_convs=n_convs, r=r, kind=kind, dtype=dtype)
            for _ in range(n_blocks)
        ]
        for i, b in enumerate(self.blocks):
            self.register_child(f"blocks.{i}", b)
        if scale == 4:
            stages = [(Conv3x3(channels, channels * 4, dtype), 2) for _ in range(2)]
        else:
            stages = [(Conv3x3(channels, channels * scale * scale, dtype), scale)]
        self.up_stages = stages
        for i, (conv, _) in enumerate(stages):
            self.register_child(f"upsample.{i}", conv)
        self.recon = Conv3x3(channels, 3, dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"input must be [N,3,H,W], got {x.shape}")
        f0 = self.shallow.forward(x)
        h, state = f0, f0
        for block in self.blocks:
            h, state = block.forward(h, state)
        h = add(h, f0)
        for conv, s in self.up_stages:
            h = pixel_shuffle(conv.forward(h), s)
        return self.recon.forward(h)


# ---------------------------------------------------------------------------
# dense comparison blocks (constructed for parameter counting only)


class _DenseBlock(Module):
    """Residual dense block skeleton: n_layers 3x3 stages with channel
    growth, then a 1x1 local fusion back to g0 channels. The conv in each
    stage is either full (variant 'rdb') or depthwise separable, optionally
    with an attention branch per stage. No forward pass is defined; these
    exist to make parameter budgets comparable."""

    def __init__(self, variant: str, g0=64, growth=64, n_layers=8, r=16, gate_bias=True, dtype=np.float32):
        super().__init__()
        cin = g0
        for i in range(n_layers):
            if variant == "rdb":
                layer = Conv3x3(cin, growth, dtype)
            else:
                layer = ALDConv(
                    cin,
                    growth,
                    r=r,
                    gate=(variant == "ald-rdb"),
                    gate_bias=gate_bias,
                    hasty_relu=(variant == "dw-rdb"),
                    dtype=dtype,
                )
            self.register_child(f"layers.{i}", layer)
            cin += growth
        self.fusion = PointwiseLayer(cin, g0, dtype)


DENSE_VARIANTS = ("rdb", "dw-rdb", "ldw-rdb", "ald-rdb")


def build_dense_block(variant: str, g0=64, growth=64, n_layers=8, r=16, gate_bias=True) -> Module:
    if variant not in DENSE_VARIANTS:
        raise ValueError(f"variant must be one of {DENSE_VARIANTS}, got {variant!r}")
    return _DenseBlock(variant, g0=g0, growth=growth, n_layers=n_layers, r=r, gate_bias=gate_bias)


# ---------------------------------------------------------------------------
# accounting


def count_parameters(model: Module) -> int:
    """Total learnable scalars, derived from constructed array shapes."""
    return int(sum(t.size for t in model.parameters()))


def parameter_breakdown(model: Module) -> list:
    """(group, count) pairs where group is the first path segment of the
    parameter name, in first-appearance order."""
    groups: dict[str, int] = {}
    for name, t in model.named_parameters():
        group = name.split(".")[0]
        groups[group] = groups.get(group, 0) + t.size
    return list(groups.items())


def reconcile_attention_conventions(target: int, variant: str = "ald-rdb"):
    """Enumerate (r, gate_bias) conventions for the attention branches and
    report which ones land exactly on a target parameter count.

    Published comparison tables do not always state the reduction ratio or
    whether gate biases are counted; this makes the search explicit.
    Returns (rows, matches) where each row is a dict with r, bias, count.
    """
    rows = []
    matches = []
    for r in (8, 16, 32, 64):
        for bias in (True, False):
            n = count_parameters(build_dense_block(variant, r=r, gate_bias=bias))
            row = {"r": r, "gate_bias": bias, "count": n}
            rows.append(row)
            if n == target:
                matches.append(row)
    return rows, matches


# ---------------------------------------------------------------------------
# initialization


INIT_SCHEMES = ("fan_in_uniform", "zero_gate")


def _fan_in(name: str, t: Tensor) -> int:
    if name.endswith("depthwise"):
        return int(np.prod(t.shape[1:]))  # 9
    if t.ndim == 4:
        return int(np.prod(t.shape[1:]))  # cin * k * k
    if t.ndim == 2:
        return t.shape[1]
    if t.ndim == 1:
        # gate biases: bound by the fan-in of their layer, i.e. the width
        # feeding the matching weight; approximated by the vector length
        return t.shape[0]
    return t.size


def init_weights(model: Module, scheme: str = "fan_in_uniform", seed: int = 0):
    """Fill parameters with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws.

    Draw order follows named_parameters(), so a (seed, architecture) pair
    pins every weight. 'zero_gate' draws the same stream, then zeroes the
    gate-expansion weights and biases so all gates start at the neutral
    sigmoid(0) = 0.5.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}, options: {INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    for name, t in model.named_parameters():
        bound = 1.0 / np.sqrt(max(_fan_in(name, t), 1))
        t.data = rng.uniform(-bound, bound, size=t.shape).astype(t.dtype)
    if scheme == "zero_gate":
        for name, t in model.named_parameters():
            if name.endswith("gate.w_expand") or name.endswith("gate.b_expand"):
                t.data = np.zeros_like(t.data)
    return model


# ---------------------------------------------------------------------------
# configuration


DESCRIPTOR_NAMES = {
    "det": DescriptorKind.DETERMINANT,
    "avg": DescriptorKind.AVERAGE,
    "max": DescriptorKind.MAX,
}

MODEL_VARIANTS = ("aldsr", "aldb") + DENSE_VARIANTS


@dataclass
class ModelConfig:
    """Flat key=value model description (the on-disk config schema)."""

    variant: str = "aldsr"
    B: int = 10
    C: int = 64
    r: int = 16
    descriptor: str = "det"
    scale: int = 4
    seed: int = 0
    init: str = "fan_in_uniform"

    def validate(self):
        if self.variant not in MODEL_VARIANTS:
            raise ValueError(f"variant must be one of {MODEL_VARIANTS}, got {self.variant!r}")
        if self.descriptor not in DESCRIPTOR_NAMES:
            raise ValueError(
                f"descriptor must be one of {tuple(DESCRIPTOR_NAMES)}, got {self.descriptor!r}"
            )
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"init must be one of {INIT_SCHEMES}, got {self.init!r}")
        if self.scale not in SRNetwork.SCALES:
            raise ValueError(f"scale must be one of {SRNetwork.SCALES}, got {self.scale}")
        for k in ("B", "C", "r"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.C % self.r != 0:
            raise ValueError(f"r={self.r} must divide C={self.C}")
        return self

    @property
    def kind(self) -> DescriptorKind:
        return DESCRIPTOR_NAMES[self.descriptor]


_CONFIG_FIELDS = {f.name: f.type for f in fields(ModelConfig)}
_INT_KEYS = {"B", "C", "r", "scale", "seed"}


def parse_config(text: str) -> ModelConfig:
    """Parse 'key = value' lines; '#' starts a comment; unknown keys fail."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_FIELDS:
            raise ValueError(
                f"config line {lineno}: unknown key {key!r} (known: {sorted(_CONFIG_FIELDS)})"
            )
        if key in _INT_KEYS:
            try:
                values[key] = int(val)
            except ValueError:
                raise ValueError(f"config line {lineno}: {key} must be an integer, got {val!r}")
        else:
            values[key] = val
    return ModelConfig(**values).validate()


def serialize_config(cfg: ModelConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(ModelConfig)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]


def build_model(cfg: ModelConfig, dtype=np.float32) -> Module:
    """Construct (uninitialized) the architecture a config describes."""
    cfg.validate()
    if cfg.variant == "aldsr":
        return SRNetwork(
            n_blocks=cfg.B,
            channels=cfg.C,
            scale=cfg.scale,
            r=cfg.r,
            kind=cfg.kind,
            dtype=dtype,
        )
    if cfg.variant == "aldb":
        return FeatureBlock(cfg.C, r=cfg.r, kind=cfg.kind, dtype=dtype)
    return build_dense_block(cfg.variant, r=cfg.r)
