"""Named finite-difference verification suites.

Each check builds a small float64 problem, runs grad_check (central
differences, h = 1e-5), and reports the max relative error against the
pinned tolerance of 1e-4. The model-level check runs a miniature full
network end to end with sampled coordinates; everything else checks every
element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    concat,
    conv2d,
    depthwise_conv2d,
    det3,
    grad_check,
    l1_loss,
    matvec,
    pixel_shuffle,
    pixel_unshuffle,
    pointwise_conv,
    relu,
    sigmoid,
)
from .layers import (
    AttentionBranch,
    DepthwiseFilterBank,
    DescriptorKind,
    ald_forward,
    apply_attention,
    attention_gate,
    describe_filters,
)
from .models import SRNetwork, FeatureBlock, init_weights

__all__ = ["CheckResult", "run_suite", "SUITES", "TOLERANCE"]

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape, scale=scale), requires_grad=True)


def _core_checks():
    rng = np.random.default_rng(100)
    checks = []

    def run(name, fn, inputs, max_checks=None):
        err = grad_check(fn, inputs, max_checks=max_checks)
        checks.append(CheckResult(name, err, TOLERANCE))

    a = _t(rng, 3, 4)
    b = _t(rng, 3, 4)
    run("add", lambda x, y: (x + y).sum(), [a, b])
    run("mul", lambda x, y: (x * y).mean(), [_t(rng, 3, 4), _t(rng, 3, 4)])
    run(
        "channel_broadcast",
        lambda x, v: (x * v + v).sum(),
        [_t(rng, 2, 5, 3, 3), _t(rng, 5)],
    )
    run("relu", lambda x: relu(x).sum(), [_t(rng, 4, 4)])
    run("sigmoid", lambda x: sigmoid(x).sum(), [_t(rng, 4, 4)])
    run("getitem", lambda x: (x[1:, 0] * x[0, 1:]).sum(), [_t(rng, 3, 3)])
    run("concat", lambda x, y: concat(x, y, 1).mean(), [_t(rng, 1, 2, 3, 3), _t(rng, 1, 4, 3, 3)])
    run("mean_axis", lambda x: x.mean(axis=(0, 2)).sum(), [_t(rng, 2, 3, 4)])
    run("sum_axis", lambda x: x.sum(axis=1).mean(), [_t(rng, 3, 5)])
    run("max", lambda x: x.max(axis=(1, 2)).sum(), [_t(rng, 3, 4, 4)])
    run("matvec", lambda w, x: matvec(w, x).sum(), [_t(rng, 4, 6), _t(rng, 6)])
    run(
        "conv2d",
        lambda x, w, bb: conv2d(x, w, bias=bb).mean(),
        [_t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3, scale=0.5), _t(rng, 4)],
    )
    run(
        "depthwise_conv2d",
        lambda x, w: depthwise_conv2d(x, w).mean(),
        [_t(rng, 2, 4, 5, 5), _t(rng, 4, 3, 3, scale=0.5)],
    )
    run(
        "pointwise_conv",
        lambda x, w: pointwise_conv(x, w).mean(),
        [_t(rng, 2, 5, 4, 4), _t(rng, 3, 5, scale=0.5)],
    )
    run("det3", lambda w: det3(w).sum(), [_t(rng, 6, 3, 3)])
    run(
        "pixel_shuffle",
        lambda x, p: (pixel_shuffle(x, 2) * p).sum(),
        [_t(rng, 1, 8, 3, 3), _t(rng, 1, 2, 6, 6)],
    )
    run(
        "pixel_unshuffle",
        lambda x, p: (pixel_unshuffle(x, 2) * p).sum(),
        [_t(rng, 1, 2, 6, 6), _t(rng, 1, 8, 3, 3)],
    )
    run("l1_loss", lambda p, q: l1_loss(p, q), [_t(rng, 3, 7), _t(rng, 3, 7)])
    return checks


def _layer_checks():
    rng = np.random.default_rng(200)
    checks = []
    c, r = 8, 4

    def branch_from(wr, brd, we, bex):
        br = AttentionBranch(c, r, dtype=np.float64)
        br.w_reduce, br.b_reduce, br.w_expand, br.b_expand = wr, brd, we, bex
        return br

    for kind in DescriptorKind:
        f = _t(rng, c, 3, 3, scale=0.5)
        err = grad_check(
            lambda ff, k=kind: describe_filters(DepthwiseFilterBank(ff), k).sum(), [f]
        )
        checks.append(CheckResult(f"descriptor_{kind.value}", err, TOLERANCE))

    z = _t(rng, c)
    wr, brd = _t(rng, c // r, c, scale=0.5), _t(rng, c // r, scale=0.1)
    we, bex = _t(rng, c, c // r, scale=0.5), _t(rng, c, scale=0.1)
    err = grad_check(
        lambda zz, a1, a2, a3, a4: attention_gate(branch_from(a1, a2, a3, a4), zz).sum(),
        [z, wr, brd, we, bex],
    )
    checks.append(CheckResult("attention_gate", err, TOLERANCE))

    feats = _t(rng, 2, c, 4, 4)
    gates = Tensor(rng.uniform(0.1, 0.9, size=c), requires_grad=True)
    err = grad_check(lambda ff, ss: apply_attention(ff, ss).sum(), [feats, gates])
    checks.append(CheckResult("apply_attention", err, TOLERANCE))

    x = _t(rng, 1, c, 5, 5)
    f = _t(rng, c, 3, 3, scale=0.5)
    pw = _t(rng, 4, c, scale=0.5)
    err = grad_check(
        lambda xx, ff, ww, a1, a2, a3, a4: ald_forward(
            xx, DepthwiseFilterBank(ff), ww, branch_from(a1, a2, a3, a4)
        ).mean(),
        [x, f, pw, wr, brd, we, bex],
        max_checks=80,
    )
    checks.append(CheckResult("ald_layer", err, TOLERANCE))
    return checks


def _model_checks():
    rng = np.random.default_rng(300)
    checks = []

    block = init_weights(FeatureBlock(8, r=4, dtype=np.float64), seed=31)
    x = Tensor(rng.uniform(size=(1, 8, 5, 5)))
    st = Tensor(rng.uniform(size=(1, 8, 5, 5)))
    params = [t for _, t in block.named_parameters()]
    err = grad_check(
        lambda *ps: block.forward(x, st)[0].mean(), params, max_checks=12
    )
    checks.append(CheckResult("feature_block", err, TOLERANCE))

    model = init_weights(
        SRNetwork(n_blocks=1, channels=16, scale=4, r=4, dtype=np.float64), seed=32
    )
    xin = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    params = [t for _, t in model.named_parameters()]
    err = grad_check(lambda *ps: model.forward(xin).mean(), params, max_checks=6)
    checks.append(CheckResult("network_micro", err, TOLERANCE))
    return checks


SUITES = {
    "core": _core_checks,
    "layers": _layer_checks,
    "model": _model_checks,
}


def run_suite(which: str = "all"):
    """Run one suite (or all) and return the CheckResult list."""
    if which == "all":
        out = []
        for fn in SUITES.values():
            out.extend(fn())
        return out
    if which not in SUITES:
        raise ValueError(f"unknown suite {which!r}, options: {tuple(SUITES)} or 'all'")
    return SUITES[which]()
