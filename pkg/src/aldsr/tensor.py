"""Dense float tensors with reverse-mode automatic differentiation.

Activations and weights are float32 (float64 in numerical tests) numpy
arrays wrapped in :class:`Tensor`. Ops executed inside a ``with Tape():``
block append nodes to that tape; :func:`backward` on a scalar loss walks
the tape once in reverse append order, accumulating gradients additively
into every tensor that participated, so shared subexpressions and
parameters see the sum of all their downstream contributions.

Layout convention: activations are [N, C, H, W]; convolutions are
cross-correlations (no kernel flip) with stride 1 and zero padding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "grad_check",
    "set_debug_checks",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "sigmoid",
    "matvec",
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv",
    "det3",
    "pixel_shuffle",
    "pixel_unshuffle",
    "concat",
    "l1_loss",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# forward cols larger than this are recomputed in backward instead of cached
_COL_CACHE_BYTES = 128 * 1024 * 1024

_debug_finite = False


def set_debug_checks(enabled: bool):
    """Toggle NaN/Inf verification after every op forward (slow, for tests)."""
    global _debug_finite
    _debug_finite = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes (or dtypes/ranks) violate an operation's contract."""


class Tape:
    """Append-only record of one forward pass, consumed by backward()."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack.pop()
        assert popped is self
        return False


_tape_stack: list[Tape] = []


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tensor:
    """A dense numpy array plus an optional gradient buffer.

    requires_grad marks leaves (parameters); intermediates produced under
    an active tape are tracked automatically. ``grad`` is populated by
    backward() and accumulates until reset to None.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep rank
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    # -- construction helpers -------------------------------------------

    @classmethod
    def zeros(cls, shape, dtype=np.float32, requires_grad=False):
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def full(cls, shape, value, dtype=np.float32, requires_grad=False):
        return cls(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- graph management -------------------------------------------------

    def detach(self) -> "Tensor":
        """A view of the same values cut off from gradient tracking."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None):
        return _reduce_sum(self, axis)

    def mean(self, axis=None):
        return _reduce_mean(self, axis)

    def max(self, axis=None):
        return _reduce_max(self, axis)

    def reshape(self, *shape):
        return _reshape(self, shape)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or (t._tape is not None and t._tape is _active_tape())


def _finish(data: np.ndarray, inputs, bwd, op: str) -> Tensor:
    """Wrap op output; record a tape node when the result needs gradients."""
    if _debug_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(_tracked(t) for t in inputs):
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(inputs), bwd))
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into t.grad for every tensor on loss's tape.

    loss must be a scalar produced under a still-open tape. Each node is
    visited exactly once, in reverse order of recording; a tape can only
    be walked once.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not connected to a tape (no ops recorded)")
    if tape.consumed:
        raise ValueError("backward was already run on this tape")
    tape.consumed = True

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.bwd(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not _tracked_on(t, tape):
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += gt
    # The tape is single use. Nodes close over activations and cached
    # patch matrices, and node.out._tape points back here, so a consumed
    # tape is one big reference cycle; clearing the node list lets plain
    # refcounting reclaim the graph instead of waiting for a gen-2 gc
    # pass (training steps otherwise stack up whole graphs of garbage).
    tape.nodes.clear()


def _tracked_on(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _as_operands(a, b):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    if ta is None and tb is None:
        raise TypeError("at least one operand must be a Tensor")
    return ta, tb


def _broadcast_plan(sa, sb):
    """How to align shapes sa and sb, returning (view_a, view_b, red_a, red_b).

    Supported: equal shapes, scalar against anything, and a [C] vector
    against [N, C, H, W] (per-channel bias/gain). red_* collapses an
    output-shaped gradient back down to the operand's shape.
    """
    if sa == sb:
        ident = lambda g: g
        return None, None, ident, ident

    def channel_plan(vec_first):
        view = lambda d: d.reshape(1, -1, 1, 1)
        red_vec = lambda g: g.sum(axis=(0, 2, 3))
        ident = lambda g: g
        if vec_first:
            return view, None, red_vec, ident
        return None, view, ident, red_vec

    if len(sa) == 1 and len(sb) == 4 and sb[1] == sa[0]:
        return channel_plan(True)
    if len(sb) == 1 and len(sa) == 4 and sa[1] == sb[0]:
        return channel_plan(False)
    if sa == ():
        return None, None, (lambda g: g.sum()), (lambda g: g)
    if sb == ():
        return None, None, (lambda g: g), (lambda g: g.sum())
    raise ShapeError(f"cannot broadcast {sa} with {sb}")


def _binary(a, b, fwd, da, db, op):
    ta, tb = _as_operands(a, b)
    if ta is None:
        # python scalar op Tensor
        av = np.asarray(a, dtype=tb.dtype)
        data = fwd(av, tb.data)
        return _finish(data, (tb,), lambda g: (db(g, av, tb.data),), op)
    if tb is None:
        bv = np.asarray(b, dtype=ta.dtype)
        data = fwd(ta.data, bv)
        return _finish(data, (ta,), lambda g: (da(g, ta.data, bv),), op)
    if ta.dtype != tb.dtype:
        raise ShapeError(f"dtype mismatch: {ta.dtype} vs {tb.dtype}")
    va, vb, red_a, red_b = _broadcast_plan(ta.shape, tb.shape)
    da_ = ta.data if va is None else va(ta.data)
    db_ = tb.data if vb is None else vb(tb.data)
    data = fwd(da_, db_)

    def bwd(g):
        return red_a(da(g, da_, db_)), red_b(db(g, da_, db_))

    return _finish(data, (ta, tb), bwd, op)


def add(a, b):
    """Elementwise a + b; supports scalars and [C] against [N,C,H,W]."""
    return _binary(
        a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add"
    )


def sub(a, b):
    """Elementwise a - b with the same broadcasting as add."""
    return _binary(
        a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub"
    )


def mul(a, b):
    """Elementwise a * b; supports scalars and [C] against [N,C,H,W]."""
    return _binary(
        a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul"
    )


def neg(x: Tensor):
    return _finish(-x.data, (x,), lambda g: (-g,), "neg")


def relu(x: Tensor):
    """max(x, 0); subgradient at 0 is 0."""
    data = np.maximum(x.data, 0)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _finish(data, (x,), bwd, "relu")


def sigmoid(x: Tensor):
    """Logistic function, computed via the numerically stable split form."""
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _finish(out, (x,), bwd, "sigmoid")


# ---------------------------------------------------------------------------
# indexing, reshaping, concatenation


def _check_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (isinstance(it, (int, np.integer, slice)) or it is Ellipsis or it is None):
            raise ShapeError("only basic indexing (ints, slices, ...) is supported")


def _getitem(x: Tensor, idx):
    _check_basic_index(idx)
    data = x.data[idx].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        return (gx,)

    return _finish(data, (x,), bwd, "getitem")


def _reshape(x: Tensor, shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _finish(np.ascontiguousarray(data), (x,), bwd, "reshape")


def concat(a: Tensor, b: Tensor, axis: int):
    """Concatenate two tensors along axis; all other dims must match."""
    if a.ndim != b.ndim:
        raise ShapeError(f"rank mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    axis = axis % a.ndim
    for d in range(a.ndim):
        if d != axis and a.shape[d] != b.shape[d]:
            raise ShapeError(f"cannot concat {a.shape} with {b.shape} on axis {axis}")
    data = np.concatenate([a.data, b.data], axis=axis)
    na = a.shape[axis]

    def bwd(g):
        sl_a = [slice(None)] * g.ndim
        sl_b = [slice(None)] * g.ndim
        sl_a[axis] = slice(0, na)
        sl_b[axis] = slice(na, None)
        return g[tuple(sl_a)], g[tuple(sl_b)]

    return _finish(data, (a, b), bwd, "concat")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(sorted(a % ndim for a in axis))


def _expand(g, shape, axes):
    for a in axes:
        g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _reduce_sum(x: Tensor, axis=None):
    axes = _norm_axes(axis, x.ndim)
    data = x.data.sum(axis=axes if axis is not None else None)

    def bwd(g):
        return (_expand(g, x.shape, axes),)

    return _finish(np.asarray(data, dtype=x.dtype), (x,), bwd, "sum")


def _reduce_mean(x: Tensor, axis=None):
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = x.data.mean(axis=axes if axis is not None else None)

    def bwd(g):
        return (_expand(g / n, x.shape, axes),)

    return _finish(np.asarray(data, dtype=x.dtype), (x,), bwd, "mean")


def _reduce_max(x: Tensor, axis=None):
    """Max over axes; ties route the gradient to the first max in row-major
    order within each reduced block."""
    axes = _norm_axes(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    moved = x.data.transpose(perm)
    keep_shape = moved.shape[: len(keep)]
    red = int(np.prod(moved.shape[len(keep):])) if axes else 1
    flat = moved.reshape(-1, red)
    arg = flat.argmax(axis=1)
    vals = flat[np.arange(flat.shape[0]), arg]
    out_shape = tuple(keep_shape)
    data = vals.reshape(out_shape) if axis is not None else vals.reshape(())

    def bwd(g):
        gm = np.zeros_like(flat)
        gm[np.arange(flat.shape[0]), arg] = np.asarray(g).reshape(-1)
        gm = gm.reshape(keep_shape + moved.shape[len(keep):])
        inv = np.argsort(perm)
        return (gm.transpose(inv),)

    return _finish(np.asarray(data, dtype=x.dtype), (x,), bwd, "max")


# ---------------------------------------------------------------------------
# linear algebra


def matvec(w: Tensor, x: Tensor):
    """Matrix-vector product: [M,K] @ [K] -> [M]."""
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec needs [M,K] @ [K], got {w.shape} and {x.shape}")
    if w.dtype != x.dtype:
        raise ShapeError(f"dtype mismatch: {w.dtype} vs {x.dtype}")
    data = w.data @ x.data

    def bwd(g):
        return np.outer(g, x.data), w.data.T @ g

    return _finish(data, (w, x), bwd, "matvec")


# ---------------------------------------------------------------------------
# convolutions


def _check_conv_input(x: Tensor, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects [N,C,H,W], got {x.shape}")


def _im2col(xd: np.ndarray, k: int, pad: int):
    """Return patches as [N, C*k*k, Ho*Wo] (one contiguous copy)."""
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xd, (k, k), axis=(2, 3))  # N,C,Ho,Wo,k,k
    n, c, ho, wo = win.shape[:4]
    col = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return col.reshape(n, c * k * k, ho * wo), ho, wo


def _kernel_geometry(wshape, op):
    *lead, kh, kw = wshape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"{op} needs odd square kernels, got {kh}x{kw}")
    return kh


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, pad: int | None = None, stride: int = 1):
    """Standard convolution (cross-correlation): [N,Cin,H,W] x [Cout,Cin,k,k].

    pad defaults to (k-1)//2, which preserves H and W at stride 1. Only
    stride 1 is implemented.
    """
    _check_conv_input(x, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be [Cout,Cin,k,k], got {w.shape}")
    if stride != 1:
        raise ShapeError("conv2d supports stride 1 only")
    n, cin, h, wdim = x.shape
    cout, cin_w, _, _ = w.shape
    k = _kernel_geometry(w.shape, "conv2d")
    if cin_w != cin:
        raise ShapeError(f"input has {cin} channels but weight expects {cin_w}")
    if x.dtype != w.dtype:
        raise ShapeError(f"dtype mismatch: {x.dtype} vs {w.dtype}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must be [{cout}], got {bias.shape}")
    p = (k - 1) // 2 if pad is None else int(pad)
    if p < 0:
        raise ShapeError(f"conv2d pad must be >= 0, got {p}")
    if h + 2 * p < k or wdim + 2 * p < k:
        raise ShapeError(f"conv2d input {h}x{wdim} with pad {p} is smaller than the {k}x{k} kernel")

    inputs = (x, w) if bias is None else (x, w, bias)

    # Two algebraically identical routes; the patch matrix scales with the
    # channel count on the GEMM's wide side, so pick the cheaper one.
    if cout < cin and p <= k - 1:
        out, bwd = _conv2d_stacked(x, w, n, cin, cout, h, wdim, k, p, bias)
    else:
        out, bwd = _conv2d_im2col(x, w, n, cin, cout, h, wdim, k, p, bias)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    return _finish(out, inputs, bwd, "conv2d")


def _conv2d_im2col(x, w, n, cin, cout, h, wdim, k, p, bias):
    """Patch-matrix route: one big GEMM against [N, Cin*k*k, Ho*Wo]."""
    col, ho, wo = _im2col(x.data, k, p)
    w2 = w.data.reshape(cout, cin * k * k)
    out = np.matmul(w2, col).reshape(n, cout, ho, wo)
    col_cache = col if col.nbytes <= _COL_CACHE_BYTES else None

    def bwd(g):
        g3 = g.reshape(n, cout, ho * wo)
        c = col_cache if col_cache is not None else _im2col(x.data, k, p)[0]
        gw = np.matmul(g3, c.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gcol = np.matmul(w2.T, g3).reshape(n, cin, k, k, ho, wo)
        gxp = np.zeros((n, cin, h + 2 * p, wdim + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + ho, j : j + wo] += gcol[:, :, i, j]
        gx = np.ascontiguousarray(gxp[:, :, p : p + h, p : p + wdim])
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return out, bwd


def _conv2d_stacked(x, w, n, cin, cout, h, wdim, k, p, bias):
    """Plane-stack route for narrow outputs (Cout < Cin).

    Forward runs one GEMM on the padded input planes and shift-adds the
    k*k partial outputs. Backward builds the patch matrix of the (narrow)
    output gradient once and reuses it for both input and weight grads:
      gx = flipped-weight GEMM against it (full correlation),
      gw[co,ci,i,j] = sum_nyx x * g-patches at the flipped offset.
    """
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = h + 2 * p, wdim + 2 * p
    ho, wo = hp - k + 1, wp - k + 1
    w9 = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1)).reshape(k * k * cout, cin)
    planes = np.matmul(w9, xp.reshape(n, cin, hp * wp))
    p6 = planes.reshape(n, k, k, cout, hp, wp)
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += p6[:, i, j, :, i : i + ho, j : j + wo]

    def bwd(g):
        colg, gh, gw_ = _im2col(g, k, k - 1 - p)
        assert (gh, gw_) == (h, wdim)
        wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = np.matmul(
            np.ascontiguousarray(wflip).reshape(cin, cout * k * k), colg
        ).reshape(n, cin, h, wdim)
        x3 = x.data.reshape(n, cin, h * wdim)
        gwf = np.matmul(x3, colg.transpose(0, 2, 1)).sum(axis=0)
        gw = gwf.reshape(cin, cout, k, k).transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        gw = np.ascontiguousarray(gw)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return out, bwd


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, pad: int | None = None):
    """Per-channel convolution: [N,C,H,W] filtered by [C,k,k], channel c by
    filter c only. pad defaults to (k-1)//2."""
    _check_conv_input(x, "depthwise_conv2d")
    if w.ndim != 3:
        raise ShapeError(f"depthwise weight must be [C,k,k], got {w.shape}")
    n, c, h, wdim = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"input has {c} channels but weight has {w.shape[0]} filters")
    k = _kernel_geometry(w.shape, "depthwise_conv2d")
    if x.dtype != w.dtype:
        raise ShapeError(f"dtype mismatch: {x.dtype} vs {w.dtype}")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"bias must be [{c}], got {bias.shape}")
    p = (k - 1) // 2 if pad is None else int(pad)

    if p < 0:
        raise ShapeError(f"depthwise_conv2d pad must be >= 0, got {p}")
    if h + 2 * p < k or wdim + 2 * p < k:
        raise ShapeError(
            f"depthwise_conv2d input {h}x{wdim} with pad {p} is smaller than the {k}x{k} kernel"
        )

    # pure stencil: each tap is one broadcast FMA over a shifted plane,
    # which beats per-channel batched GEMMs at these tiny contraction sizes
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = h + 2 * p - k + 1, wdim + 2 * p - k + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += w.data[:, i, j].reshape(1, c, 1, 1) * xp[:, :, i : i + ho, j : j + wo]
    if bias is not None:
        out += bias.data.reshape(1, c, 1, 1)

    inputs = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        gw = np.empty_like(w.data)
        for i in range(k):
            for j in range(k):
                gw[:, i, j] = np.einsum(
                    "nchw,nchw->c", g, xp[:, :, i : i + ho, j : j + wo], optimize=True
                )
        gxp = np.zeros((n, c, h + 2 * p, wdim + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + ho, j : j + wo] += g * w.data[:, i, j].reshape(1, c, 1, 1)
        gx = np.ascontiguousarray(gxp[:, :, p : p + h, p : p + wdim])
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _finish(out, inputs, bwd, "depthwise_conv2d")


def pointwise_conv(x: Tensor, w: Tensor, bias: Tensor | None = None):
    """1x1 convolution, i.e. a channel-mixing matmul: weight is [Cout,Cin]."""
    _check_conv_input(x, "pointwise_conv")
    if w.ndim != 2:
        raise ShapeError(f"pointwise weight must be [Cout,Cin], got {w.shape}")
    n, cin, h, wdim = x.shape
    cout, cin_w = w.shape
    if cin_w != cin:
        raise ShapeError(f"input has {cin} channels but weight expects {cin_w}")
    if x.dtype != w.dtype:
        raise ShapeError(f"dtype mismatch: {x.dtype} vs {w.dtype}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must be [{cout}], got {bias.shape}")

    x3 = x.data.reshape(n, cin, h * wdim)
    out = np.matmul(w.data, x3).reshape(n, cout, h, wdim)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    inputs = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        g3 = g.reshape(n, cout, h * wdim)
        gx = np.matmul(w.data.T, g3).reshape(x.shape)
        gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _finish(out, inputs, bwd, "pointwise_conv")


# ---------------------------------------------------------------------------
# determinant descriptor


def det3(w: Tensor):
    """Determinant of the trailing 3x3 axes via the rule of Sarrus.

    Composed from slice/mul/add/sub primitives, so the tape produces the
    cofactor-matrix gradient without a dedicated backward rule.
    """
    if w.ndim < 2 or w.shape[-2:] != (3, 3):
        raise ShapeError(f"det3 needs trailing [3,3] axes, got {w.shape}")

    def e(i, j):
        return w[..., i, j]

    pos = add(
        add(mul(mul(e(0, 0), e(1, 1)), e(2, 2)), mul(mul(e(0, 1), e(1, 2)), e(2, 0))),
        mul(mul(e(0, 2), e(1, 0)), e(2, 1)),
    )
    negt = add(
        add(mul(mul(e(0, 2), e(1, 1)), e(2, 0)), mul(mul(e(0, 1), e(1, 0)), e(2, 2))),
        mul(mul(e(0, 0), e(1, 2)), e(2, 1)),
    )
    return sub(pos, negt)


# ---------------------------------------------------------------------------
# sub-pixel rearrangement


def pixel_shuffle(x: Tensor, scale: int):
    """Rearrange [N, C*s^2, H, W] to [N, C, H*s, W*s].

    out[n, c, s*h + a, s*w + b] == in[n, c*s*s + a*s + b, h, w].
    """
    _check_conv_input(x, "pixel_shuffle")
    n, cs2, h, w = x.shape
    s = int(scale)
    if s < 1 or cs2 % (s * s) != 0:
        raise ShapeError(f"channels {cs2} not divisible by scale^2 = {s * s}")
    c = cs2 // (s * s)
    data = (
        x.data.reshape(n, c, s, s, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c, h * s, w * s)
    )

    def bwd(g):
        return (_unshuffle_data(g, s),)

    return _finish(np.ascontiguousarray(data), (x,), bwd, "pixel_shuffle")


def _unshuffle_data(d: np.ndarray, s: int):
    n, c, hs, ws = d.shape
    h, w = hs // s, ws // s
    return np.ascontiguousarray(
        d.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w)
    )


def pixel_unshuffle(x: Tensor, scale: int):
    """Inverse of pixel_shuffle: [N, C, H*s, W*s] to [N, C*s^2, H, W]."""
    _check_conv_input(x, "pixel_unshuffle")
    n, c, hs, ws = x.shape
    s = int(scale)
    if s < 1 or hs % s != 0 or ws % s != 0:
        raise ShapeError(f"spatial dims {hs}x{ws} not divisible by scale {s}")
    data = _unshuffle_data(x.data, s)

    def bwd(g):
        n2, cs2, h, w = g.shape
        cc = cs2 // (s * s)
        return (
            np.ascontiguousarray(
                g.reshape(n2, cc, s, s, h, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n2, cc, h * s, w * s)
            ),
        )

    return _finish(data, (x,), bwd, "pixel_unshuffle")


# ---------------------------------------------------------------------------
# loss


def l1_loss(pred: Tensor, target: Tensor):
    """Mean absolute error; subgradient 0 where pred == target."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.asarray(np.abs(diff).mean(), dtype=pred.dtype)

    def bwd(g):
        s = np.sign(diff) * (g / diff.size)
        return s, -s

    return _finish(data, (pred, target), bwd, "l1_loss")


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn, inputs, h: float = 1e-5, max_checks: int | None = None, rng=None):
    """Max relative error between tape gradients and central differences.

    fn maps the given float64 leaf tensors to a scalar Tensor and must be
    deterministic. Every element is perturbed by +-h unless max_checks
    caps the count per input (sampled with rng, seeded internally when
    omitted). Elements where both |analytic| and |numeric| fall below
    1e-8 are skipped as zero-vs-roundoff noise.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ShapeError("grad_check requires float64 inputs")
        t.grad = None
    with Tape():
        loss = fn(*inputs)
        if loss.data.size != 1:
            raise ShapeError("grad_check target must be scalar")
        backward(loss)
    analytic = [
        (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for t in inputs
    ]

    def f():
        return float(fn(*inputs).data)

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        if max_checks is not None and flat.size > max_checks:
            idxs = rng.choice(flat.size, size=max_checks, replace=False)
        else:
            idxs = np.arange(flat.size)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(gflat[i])
            if abs(ana) < 1e-8 and abs(num) < 1e-8:
                continue
            rel = abs(ana - num) / max(abs(ana), abs(num))
            worst = max(worst, rel)
    return worst
