"""Attention-aware linear depthwise convolution toolkit for image super-resolution."""

from .tensor import (
    Tensor,
    Tape,
    ShapeError,
    backward,
    grad_check,
    set_debug_checks,
    add,
    sub,
    mul,
    neg,
    relu,
    sigmoid,
    matvec,
    conv2d,
    depthwise_conv2d,
    pointwise_conv,
    det3,
    pixel_shuffle,
    pixel_unshuffle,
    concat,
    l1_loss,
)

__version__ = "0.1.0"
