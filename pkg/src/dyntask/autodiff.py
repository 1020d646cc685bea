"""Dense float64 tensors with a recording tape and exact reverse-mode gradients.

Define-by-run: every operation computes its value immediately and appends a
node (op id, input ids, backward closure) to the tape that owns its operands.
``backward(loss)`` walks the tape in reverse and accumulates gradients; nodes
not reachable from the loss get zero.

Values are never mutated by the library once wrapped in a Tensor, and any
operation that produces a NaN/Inf raises NumericsError instead of returning it.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._alloc import enable_buffer_reuse
from .errors import ConfigError, ContractError, DomainError, NumericsError, ShapeError

enable_buffer_reuse()  # tape workloads recycle big buffers every step

# Names of all registered tape operations, in definition order. The gradcheck
# suite enumerates this to guarantee every op has a finite-difference case.
REGISTERED_OPS: list[str] = []


def _op(name):
    REGISTERED_OPS.append(name)

    def deco(fn):
        fn.op_name = name
        return fn

    return deco


def _ensure_finite(op: str, out: np.ndarray) -> np.ndarray:
    # single-pass aggregate: any NaN/Inf in the array makes the sum non-finite
    if not np.isfinite(out.sum()):
        raise NumericsError(f"operation '{op}' produced a non-finite value")
    return out


class Tape:
    """Append-only record of one computation; inputs always precede outputs."""

    def __init__(self):
        self._ops: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._backwards: list[Callable | None] = []
        self._tensors: list[Tensor] = []

    def __len__(self):
        return len(self._ops)

    def _append(self, op: str, inputs: tuple[int, ...], data: np.ndarray,
                backward: Callable | None) -> "Tensor":
        t = Tensor(self, len(self._ops), data)
        self._ops.append(op)
        self._inputs.append(inputs)
        self._backwards.append(backward)
        self._tensors.append(t)
        return t

    def leaf(self, data) -> "Tensor":
        """Wrap an array as an input node (parameter or constant)."""
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite("leaf", arr)
        return self._append("leaf", (), arr, None)


class Tensor:
    """Immutable view of one tape node's value."""

    __slots__ = ("tape", "node_id", "data")

    def __init__(self, tape: Tape, node_id: int, data: np.ndarray):
        self.tape = tape
        self.node_id = node_id
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(node={self.node_id}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ContractError("operands recorded on different tapes")
        return x
    return tape.leaf(np.asarray(x, dtype=np.float64))


def _pair(a, b) -> tuple[Tape, Tensor, Tensor]:
    if isinstance(a, Tensor):
        tape = a.tape
    elif isinstance(b, Tensor):
        tape = b.tape
    else:
        raise ContractError("at least one operand must be a Tensor")
    return tape, _lift(tape, a), _lift(tape, b)


def _ew_shapes(op: str, a: np.ndarray, b: np.ndarray):
    # Broadcasting is restricted to identical shapes or scalar-vs-tensor.
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if shape == () and g.shape != ():
        return g.sum()
    return g


# ---------------------------------------------------------------------------
# elementwise suite


@_op("add")
def add(a, b) -> Tensor:
    tape, ta, tb = _pair(a, b)
    _ew_shapes("add", ta.data, tb.data)
    out = _ensure_finite("add", ta.data + tb.data)

    def bw(g):
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return tape._append("add", (ta.node_id, tb.node_id), out, bw)


@_op("sub")
def sub(a, b) -> Tensor:
    tape, ta, tb = _pair(a, b)
    _ew_shapes("sub", ta.data, tb.data)
    out = _ensure_finite("sub", ta.data - tb.data)

    def bw(g):
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return tape._append("sub", (ta.node_id, tb.node_id), out, bw)


@_op("mul")
def mul(a, b) -> Tensor:
    tape, ta, tb = _pair(a, b)
    _ew_shapes("mul", ta.data, tb.data)
    out = _ensure_finite("mul", ta.data * tb.data)

    def bw(g):
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return tape._append("mul", (ta.node_id, tb.node_id), out, bw)


@_op("div")
def div(a, b) -> Tensor:
    tape, ta, tb = _pair(a, b)
    _ew_shapes("div", ta.data, tb.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ta.data / tb.data
    _ensure_finite("div", out)

    def bw(g):
        ga = g / tb.data
        gb = -g * ta.data / (tb.data * tb.data)
        return _unbroadcast(ga, ta.shape), _unbroadcast(gb, tb.shape)

    return tape._append("div", (ta.node_id, tb.node_id), out, bw)


@_op("relu")
def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0  # gradient at the kink is 0 by convention

    def bw(g):
        return (g * mask,)

    return a.tape._append("relu", (a.node_id,), out, bw)


@_op("max_const")
def max_const(a: Tensor, c: float) -> Tensor:
    """Elementwise max(x, c) against a constant; gradient 0 at the tie."""
    c = float(c)
    out = np.maximum(a.data, c)
    mask = a.data > c

    def bw(g):
        return (g * mask,)

    return a.tape._append("max_const", (a.node_id,), out, bw)


@_op("exp")
def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = _ensure_finite("exp", np.exp(a.data))

    def bw(g):
        return (g * out,)

    return a.tape._append("exp", (a.node_id,), out, bw)


@_op("log")
def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return a.tape._append("log", (a.node_id,), out, bw)


@_op("sqrt")
def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("sqrt requires strictly positive input")
    out = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out),)

    return a.tape._append("sqrt", (a.node_id,), out, bw)


@_op("square")
def square(a: Tensor) -> Tensor:
    out = _ensure_finite("square", a.data * a.data)

    def bw(g):
        return (g * (2.0 * a.data),)

    return a.tape._append("square", (a.node_id,), out, bw)


@_op("reduce_sum")
def reduce_sum(a: Tensor) -> Tensor:
    out = _ensure_finite("reduce_sum", np.asarray(a.data.sum()))
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy() if shape != () else g,)

    return a.tape._append("reduce_sum", (a.node_id,), out, bw)


@_op("reduce_mean")
def reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = _ensure_finite("reduce_mean", np.asarray(a.data.mean()))
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g / n, shape).copy() if shape != () else g,)

    return a.tape._append("reduce_mean", (a.node_id,), out, bw)


@_op("sub_rowmax")
def sub_rowmax(a: Tensor) -> Tensor:
    """Subtract each row's max (the softmax stabilizer). Exact a.e. gradient:
    the argmax column absorbs minus the row's gradient sum."""
    if a.data.ndim != 2:
        raise ShapeError(f"sub_rowmax expects a 2-d input, got {a.shape}")
    amax = a.data.argmax(axis=1)
    out = _ensure_finite("sub_rowmax", a.data - a.data.max(axis=1, keepdims=True))
    m, k = a.shape

    def bw(g):
        ga = g.copy()
        ga[np.arange(m), amax] -= g.sum(axis=1)
        return (ga,)

    return a.tape._append("sub_rowmax", (a.node_id,), out, bw)


# ---------------------------------------------------------------------------
# reductions / broadcasts along one axis


@_op("row_sum")
def row_sum(a: Tensor) -> Tensor:
    """(m, k) -> (m, 1) sum over columns."""
    if a.data.ndim != 2:
        raise ShapeError(f"row_sum expects a 2-d input, got {a.shape}")
    out = _ensure_finite("row_sum", a.data.sum(axis=1, keepdims=True))
    k = a.shape[1]

    def bw(g):
        return (np.repeat(g, k, axis=1),)

    return a.tape._append("row_sum", (a.node_id,), out, bw)


@_op("col_mean")
def col_mean(a: Tensor) -> Tensor:
    """(m, k) -> (1, k) mean over rows."""
    if a.data.ndim != 2:
        raise ShapeError(f"col_mean expects a 2-d input, got {a.shape}")
    out = _ensure_finite("col_mean", a.data.mean(axis=0, keepdims=True))
    m = a.shape[0]

    def bw(g):
        return (np.repeat(g / m, m, axis=0),)

    return a.tape._append("col_mean", (a.node_id,), out, bw)


@_op("broadcast_rows")
def broadcast_rows(a: Tensor, m: int) -> Tensor:
    """(1, k) -> (m, k) by repeating the single row."""
    if a.data.ndim != 2 or a.shape[0] != 1:
        raise ShapeError(f"broadcast_rows expects shape (1, k), got {a.shape}")
    out = np.repeat(a.data, m, axis=0)

    def bw(g):
        return (g.sum(axis=0, keepdims=True),)

    return a.tape._append("broadcast_rows", (a.node_id,), out, bw)


@_op("broadcast_cols")
def broadcast_cols(a: Tensor, k: int) -> Tensor:
    """(m, 1) -> (m, k) by repeating the single column."""
    if a.data.ndim != 2 or a.shape[1] != 1:
        raise ShapeError(f"broadcast_cols expects shape (m, 1), got {a.shape}")
    out = np.repeat(a.data, k, axis=1)

    def bw(g):
        return (g.sum(axis=1, keepdims=True),)

    return a.tape._append("broadcast_cols", (a.node_id,), out, bw)


# ---------------------------------------------------------------------------
# structural


@_op("reshape")
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} (size {a.data.size}) to {shape}")
    out = a.data.reshape(shape)
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return a.tape._append("reshape", (a.node_id,), out, bw)


@_op("transpose")
def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {a.data.ndim}")
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return a.tape._append("transpose", (a.node_id,), out, bw)


# ---------------------------------------------------------------------------
# linear algebra / convolution


@_op("matmul")
def matmul(a, b) -> Tensor:
    tape, ta, tb = _pair(a, b)
    if ta.data.ndim != 2 or tb.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {ta.shape} and {tb.shape}")
    if ta.shape[1] != tb.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {ta.shape} vs {tb.shape}")
    out = _ensure_finite("matmul", ta.data @ tb.data)

    def bw(g):
        return g @ tb.data.T, ta.data.T @ g

    return tape._append("matmul", (ta.node_id, tb.node_id), out, bw)


@_op("conv2d")
def conv2d(x: Tensor, kern: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (b,c,h,w) input with (o,c,kh,kw) kernels."""
    if not isinstance(stride, int) or stride < 1:
        raise ConfigError(f"conv2d stride must be a positive int, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise ConfigError(f"conv2d padding must be a non-negative int, got {padding!r}")
    if x.data.ndim != 4 or kern.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape} and {kern.shape}")
    b, c, h, w = x.shape
    o, ck, kh, kw = kern.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ck}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: padded spatial extents ({hp}x{wp}) smaller than kernel ({kh}x{kw})")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    # im2col so both passes are plain matrix products
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * oh * ow, c * kh * kw)
    kmat = kern.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    _ensure_finite("conv2d", out)

    def bw(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, o)
        gk = (g2d.T @ cols).reshape(o, c, kh, kw)
        gwin = (g2d @ kmat).reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += \
                    gwin[:, :, :, :, u, v]
        return gxp[:, :, padding:padding + h, padding:padding + w], gk

    return x.tape._append("conv2d", (x.node_id, kern.node_id), out, bw)


@_op("conv2d_nhwc")
def conv2d_nhwc(x: Tensor, kern: Tensor, stride: int = 1, padding: int = 0,
                bias: Tensor = None) -> Tensor:
    """Channels-last twin of conv2d: input (b,h,w,c), same kernel layout
    (o,c,kh,kw), output (b,oh,ow,o), with the per-filter bias folded into the
    product. Faster on this backend because the im2col gather copies whole
    channel runs and the output needs no transpose."""
    if not isinstance(stride, int) or stride < 1:
        raise ConfigError(f"conv2d stride must be a positive int, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise ConfigError(f"conv2d padding must be a non-negative int, got {padding!r}")
    if x.data.ndim != 4 or kern.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape} and {kern.shape}")
    b, h, w, c = x.shape
    o, ck, kh, kw = kern.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ck}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: padded spatial extents ({hp}x{wp}) smaller than kernel ({kh}x{kw})")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b * oh * ow, kh * kw * c)
    kmat = np.ascontiguousarray(kern.data.transpose(2, 3, 1, 0)).reshape(kh * kw * c, o)
    out2d = cols @ kmat
    if bias is not None:
        out2d += bias.data
    out = out2d.reshape(b, oh, ow, o)
    _ensure_finite("conv2d_nhwc", out)

    def bw(g):
        g2d = g.reshape(b * oh * ow, o)
        gk = (cols.T @ g2d).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        # small per-tap products instead of one (b*oh*ow, kh*kw*c) temp
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                tap = kmat[(u * kw + v) * c:(u * kw + v + 1) * c, :]  # (c, o)
                piece = (g2d @ tap.T).reshape(b, oh, ow, c)
                gxp[:, u:u + stride * oh:stride, v:v + stride * ow:stride, :] += piece
        gx = gxp[:, padding:padding + h, padding:padding + w, :]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 1, 2))

    inputs = (x.node_id, kern.node_id)
    if bias is not None:
        inputs += (bias.node_id,)
    return x.tape._append("conv2d_nhwc", inputs, out, bw)


@_op("add_channel_bias")
def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias (c,) to a (b,c,h,w) feature map."""
    if x.data.ndim != 4 or bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"add_channel_bias: got map {x.shape}, bias {bias.shape}")
    out = _ensure_finite("add_channel_bias", x.data + bias.data[None, :, None, None])

    def bw(g):
        return g, g.sum(axis=(0, 2, 3))

    return x.tape._append("add_channel_bias", (x.node_id, bias.node_id), out, bw)


@_op("add_bias_lastdim")
def add_bias_lastdim(x: Tensor, bias: Tensor) -> Tensor:
    """Add a bias vector along the trailing axis of any-rank input."""
    if bias.data.ndim != 1 or x.data.ndim < 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias_lastdim: got input {x.shape}, bias {bias.shape}")
    out = _ensure_finite("add_bias_lastdim", x.data + bias.data)
    lead = tuple(range(x.data.ndim - 1))

    def bw(g):
        return g, g.sum(axis=lead)

    return x.tape._append("add_bias_lastdim", (x.node_id, bias.node_id), out, bw)


def _pool_corners(xd, spatial_axes):
    sl = [slice(None)] * 4
    corners = []
    for i in (0, 1):
        for j in (0, 1):
            s = list(sl)
            s[spatial_axes[0]] = slice(i, None, 2)
            s[spatial_axes[1]] = slice(j, None, 2)
            corners.append((xd[tuple(s)], tuple(s)))
    return corners


def _maxpool_common(x: Tensor, spatial_axes, op_name: str) -> Tensor:
    b_shape = x.shape
    h, w = b_shape[spatial_axes[0]], b_shape[spatial_axes[1]]
    if h % 2 or w % 2:
        raise ShapeError(f"{op_name} requires even spatial extents, got {h}x{w}")
    corners = _pool_corners(x.data, spatial_axes)
    out = np.maximum(np.maximum(corners[0][0], corners[1][0]),
                     np.maximum(corners[2][0], corners[3][0]))

    def bw(g):
        gx = np.zeros_like(x.data)
        remaining = np.ones(out.shape, dtype=bool)
        for corner, slices in corners:
            taken = remaining & (corner == out)
            gx[slices] = np.where(taken, g, 0.0)
            remaining &= ~taken
        return (gx,)

    return x.tape._append(op_name, (x.node_id,), out, bw)


@_op("maxpool2d")
def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on (b,c,h,w); spatial extents must be
    even. Gradient routes to the first maximum in each window."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d input, got {x.shape}")
    return _maxpool_common(x, (2, 3), "maxpool2d")


@_op("maxpool2d_nhwc")
def maxpool2d_nhwc(x: Tensor) -> Tensor:
    """Channels-last twin of maxpool2d, pooling over axes 1 and 2."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d input, got {x.shape}")
    return _maxpool_common(x, (1, 2), "maxpool2d_nhwc")


@_op("batchnorm_nd")
def batchnorm_nd(x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
                 mean=None, var=None, batch_stats: bool = None,
                 channels_last: bool = False, fuse_relu: bool = False) -> Tensor:
    """Standardize-and-affine in one node: per column of a 2-d input, or per
    channel of a 4-d input (axis 1, or the trailing axis with channels_last).

    ``mean``/``var`` may be passed precomputed; ``batch_stats`` says whether
    they are this batch's own statistics (differentiated through, the train
    path) or external constants (the running-statistics eval path). When they
    are omitted batch statistics are computed here. ``fuse_relu`` clamps the
    affine output at zero in the same node (gradient 0 at the clamp).
    """
    xd = x.data
    if xd.ndim == 2:
        axes, k = (0,), xd.shape[1]
        expand = (None, slice(None))
    elif xd.ndim == 4 and channels_last:
        axes, k = (0, 1, 2), xd.shape[3]
        expand = (None, None, None, slice(None))
    elif xd.ndim == 4:
        axes, k = (0, 2, 3), xd.shape[1]
        expand = (None, slice(None), None, None)
    else:
        raise ShapeError(f"batchnorm_nd expects a 2-d or 4-d input, got {xd.shape}")
    if gamma.shape != (k,) or beta.shape != (k,):
        raise ShapeError(f"batchnorm_nd: scale/shift must have shape ({k},), "
                         f"got {gamma.shape} and {beta.shape}")
    if mean is None:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if batch_stats is None:
            batch_stats = True
    elif batch_stats is None:
        batch_stats = False
    mean = np.asarray(mean)
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    scale = gamma.data * inv
    out = xd * scale[expand] + (beta.data - mean * scale)[expand]
    if fuse_relu:
        np.maximum(out, 0.0, out=out)
    _ensure_finite("batchnorm_nd", out)

    def dot_channels(a, b):
        if expand[-1] is not None:  # channel axis is trailing: single-pass einsum
            return np.einsum("nk,nk->k", a.reshape(-1, k), b.reshape(-1, k))
        return (a * b).sum(axis=axes)

    def bw(g):
        if fuse_relu:
            g = g * (out > 0.0)
        xhat = (xd - mean[expand]) * inv[expand]
        gbeta = g.sum(axis=axes)
        ggamma = dot_channels(g, xhat)
        gxhat = g * gamma.data[expand]
        if batch_stats:
            n = xd.size // k
            mean_gx = gxhat.sum(axis=axes) / n
            mean_gxx = dot_channels(gxhat, xhat) / n
            # in place: xhat and gxhat are this closure's own temporaries
            xhat *= mean_gxx[expand]
            gxhat -= xhat
            gxhat -= mean_gx[expand]
            gxhat *= inv[expand]
            gx = gxhat
        else:
            gx = gxhat * inv[expand]
        return gx, ggamma, gbeta

    return x.tape._append("batchnorm_nd",
                          (x.node_id, gamma.node_id, beta.node_id), out, bw)


@_op("pairwise_dist")
def pairwise_dist(x: Tensor, centers: Tensor) -> Tensor:
    """Euclidean distances between rows of (m,E) and rows of (k,E) -> (m,k).
    Gradient at a zero distance is 0 by convention (norm kink)."""
    if x.data.ndim != 2 or centers.data.ndim != 2 or x.shape[1] != centers.shape[1]:
        raise ShapeError(f"pairwise_dist: got {x.shape} and {centers.shape}")
    diff = x.data[:, None, :] - centers.data[None, :, :]
    with np.errstate(over="ignore"):
        d = _ensure_finite("pairwise_dist",
                           np.sqrt(np.einsum("mke,mke->mk", diff, diff)))

    def bw(g):
        w = np.divide(g, d, out=np.zeros_like(g), where=d > 0)
        gx = x.data * w.sum(axis=1, keepdims=True) - w @ centers.data
        gc = centers.data * w.sum(axis=0)[:, None] - w.T @ x.data
        return gx, gc

    return x.tape._append("pairwise_dist", (x.node_id, centers.node_id), d, bw)


# ---------------------------------------------------------------------------
# reverse pass


class Gradients:
    """Gradient slots for one backward pass; unreached nodes read as zero."""

    def __init__(self, tape: Tape, slots: list):
        self._tape = tape
        self._slots = slots

    def of(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise ContractError("tensor belongs to a different tape")
        g = self._slots[t.node_id]
        if g is None:
            return np.zeros(t.shape)
        return np.asarray(g)


def backward(loss: Tensor) -> Gradients:
    """Reverse-mode pass from a scalar loss over its tape."""
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    slots: list = [None] * len(tape)
    slots[loss.node_id] = np.ones(())
    for nid in range(loss.node_id, -1, -1):
        g = slots[nid]
        if g is None:
            continue
        bw = tape._backwards[nid]
        if bw is None:
            continue
        for iid, ig in zip(tape._inputs[nid], bw(np.asarray(g))):
            if ig is None:
                continue
            if slots[iid] is None:
                slots[iid] = ig
            else:
                slots[iid] = slots[iid] + ig
    return Gradients(tape, slots)
