"""Depthwise separable layer variants with filter-level attention.

The attention-aware variant (ald_forward) keeps the depthwise stage linear:
each depthwise filter is summarized by a scalar descriptor computed from
its own 9 weights, a tiny bottleneck MLP turns the descriptor vector into
per-filter gates s in (0,1), and the filter responses are rescaled by
(1 + s) before the pointwise mix and the single ReLU. Because the gates
depend only on weights, not activations, a trained layer can be collapsed
into a plain depthwise+pointwise pair by folding (1 + s) into the filters.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    depthwise_conv2d,
    det3,
    matvec,
    mul,
    pointwise_conv,
    relu,
    sigmoid,
)

__all__ = [
    "DescriptorKind",
    "DepthwiseFilterBank",
    "AttentionBranch",
    "describe_filters",
    "attention_gate",
    "apply_attention",
    "ald_forward",
    "ldw_forward",
    "dw_forward",
]


class DescriptorKind(Enum):
    """How a [3,3] depthwise filter is reduced to one scalar."""

    DETERMINANT = "det"
    AVERAGE = "avg"
    MAX = "max"


@dataclass
class DepthwiseFilterBank:
    """One 3x3 filter per channel, stored as a [C,3,3] parameter."""

    filters: Tensor

    def __post_init__(self):
        if self.filters.ndim != 3 or self.filters.shape[1:] != (3, 3):
            raise ShapeError(f"filter bank must be [C,3,3], got {self.filters.shape}")

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "DepthwiseFilterBank":
        return cls(Tensor(np.zeros((channels, 3, 3), dtype=dtype), requires_grad=True))

    @property
    def channels(self) -> int:
        return self.filters.shape[0]

    def parameters(self):
        return [("filters", self.filters)]


class AttentionBranch:
    """Bottleneck MLP mapping C filter descriptors to C gates.

    Reduction keeps C/r hidden units; C must be divisible by r. Only this
    branch carries biases in the whole network (bias=False drops them, an
    accounting convention some comparisons use).
    """

    def __init__(self, channels: int, r: int, bias: bool = True, dtype=np.float32):
        if r < 1 or channels % r != 0:
            raise ShapeError(f"reduction {r} must divide channel count {channels}")
        hidden = channels // r
        self.channels = channels
        self.r = r
        self.w_reduce = Tensor(np.zeros((hidden, channels), dtype=dtype), requires_grad=True)
        self.w_expand = Tensor(np.zeros((channels, hidden), dtype=dtype), requires_grad=True)
        if bias:
            self.b_reduce = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
            self.b_expand = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        else:
            self.b_reduce = None
            self.b_expand = None

    @property
    def has_bias(self) -> bool:
        return self.b_reduce is not None

    def parameters(self):
        out = [("w_reduce", self.w_reduce), ("w_expand", self.w_expand)]
        if self.has_bias:
            out += [("b_reduce", self.b_reduce), ("b_expand", self.b_expand)]
        return out


def describe_filters(bank: DepthwiseFilterBank, kind: DescriptorKind) -> Tensor:
    """Reduce each [3,3] filter to a scalar, returning [C].

    DETERMINANT uses the Sarrus expansion (gradient = cofactors), AVERAGE
    the mean of the 9 weights, MAX their raw maximum (ties route the
    subgradient to the first maximum in row-major order).
    """
    if kind is DescriptorKind.DETERMINANT:
        return det3(bank.filters)
    if kind is DescriptorKind.AVERAGE:
        return bank.filters.mean(axis=(1, 2))
    if kind is DescriptorKind.MAX:
        return bank.filters.max(axis=(1, 2))
    raise ValueError(f"unknown descriptor kind: {kind!r}")


def attention_gate(branch: AttentionBranch, z: Tensor) -> Tensor:
    """Gates s = sigmoid(W_expand relu(W_reduce z + b) + b), each in (0,1)."""
    if z.ndim != 1 or z.shape[0] != branch.channels:
        raise ShapeError(f"descriptor must be [{branch.channels}], got {z.shape}")
    h = matvec(branch.w_reduce, z)
    if branch.b_reduce is not None:
        h = add(h, branch.b_reduce)
    h = relu(h)
    out = matvec(branch.w_expand, h)
    if branch.b_expand is not None:
        out = add(out, branch.b_expand)
    return sigmoid(out)


def apply_attention(features: Tensor, gates: Tensor) -> Tensor:
    """Residual rescale: out[:, c] = (1 + gates[c]) * features[:, c]."""
    if features.ndim != 4:
        raise ShapeError(f"features must be [N,C,H,W], got {features.shape}")
    if gates.ndim != 1 or gates.shape[0] != features.shape[1]:
        raise ShapeError(
            f"gates must be [{features.shape[1]}], got {gates.shape}"
        )
    return mul(features, add(1.0, gates))


def ald_forward(
    x: Tensor,
    bank: DepthwiseFilterBank,
    pointwise_weight: Tensor,
    branch: AttentionBranch,
    kind: DescriptorKind = DescriptorKind.DETERMINANT,
) -> Tensor:
    """Attention-aware linear depthwise layer.

    depthwise (linear) -> per-filter gates from weight descriptors ->
    (1+s) rescale -> pointwise mix -> ReLU. Gates are recomputed from the
    current filters on every call, so descriptor gradients reach the bank.
    """
    f = depthwise_conv2d(x, bank.filters)
    z = describe_filters(bank, kind)
    s = attention_gate(branch, z)
    d = apply_attention(f, s)
    return relu(pointwise_conv(d, pointwise_weight))


def ldw_forward(x: Tensor, bank: DepthwiseFilterBank, pointwise_weight: Tensor) -> Tensor:
    """Linear depthwise separable layer: no activation between the stages."""
    return relu(pointwise_conv(depthwise_conv2d(x, bank.filters), pointwise_weight))


def dw_forward(x: Tensor, bank: DepthwiseFilterBank, pointwise_weight: Tensor) -> Tensor:
    """Conventional depthwise separable layer with the early ReLU kept in."""
    return relu(pointwise_conv(relu(depthwise_conv2d(x, bank.filters)), pointwise_weight))
