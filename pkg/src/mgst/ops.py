"""Primitive differentiable operations.

Array layout is channels-first.  Convolution and pooling take either an
unbatched ``[C, *spatial]`` tensor or a batched ``[N, C, *spatial]`` one; the
number of spatial axes is fixed by the kernel.  All backward rules are written
against numpy directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make

# Upper bound on im2col buffer elements per chunk.
_COL_LIMIT = 1 << 24


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


# ---------------------------------------------------------------------------
# conv specs


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, ...]
    stride: tuple[int, ...] = ()
    padding: tuple[int, ...] = ()

    def __post_init__(self):
        nd = len(self.kernel)
        stride = self.stride or (1,) * nd
        padding = self.padding or (0,) * nd
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in stride))
        object.__setattr__(self, "padding", tuple(int(p) for p in padding))
        if len(self.stride) != nd or len(self.padding) != nd:
            raise ShapeError("kernel, stride and padding must have the same rank")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError(f"invalid conv spec {self}")

    @property
    def ndim(self) -> int:
        return len(self.kernel)

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, ...]:
        out = []
        for axis, (n, k, s, p) in enumerate(zip(spatial, self.kernel, self.stride, self.padding)):
            if n + 2 * p < k:
                raise ShapeError(f"axis {axis}: window {k} exceeds padded extent {n + 2 * p}")
            out.append((n + 2 * p - k) // s + 1)
        return tuple(out)


def same_spec(kernel: Sequence[int], stride: Sequence[int] | None = None) -> ConvSpec:
    """Zero padding of floor(k/2) on every axis."""
    return ConvSpec(tuple(kernel), tuple(stride) if stride else (), tuple(k // 2 for k in kernel))


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        for axis, (m, n) in enumerate(zip(a.shape, b.shape)):
            if m != n:
                raise ShapeError(f"{what}: axis {axis} mismatch ({m} vs {n})")
        raise ShapeError(f"{what}: rank mismatch ({a.ndim} vs {b.ndim})")


# ---------------------------------------------------------------------------
# elementwise


def badd(a, b) -> Tensor:
    """Addition with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make(a.data + b.data, (a, b), back, "add")


def bmul(a, b) -> Tensor:
    """Multiplication with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return make(ad * bd, (a, b), back, "mul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.size != 1 and b.size != 1:
        _check_same(a, b, "add")
    return badd(a, b)


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "hadamard")
    return bmul(a, b)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    return bmul(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (g * c,)

    return make(x.data * x.data.dtype.type(c), (x,), back, "scale")


def one_minus(x: Tensor) -> Tensor:
    def back(g):
        return (-g,)

    return make(1 - x.data, (x,), back, "one_minus")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)

    def back(g):
        return (g * y * (1 - y),)

    return make(y, (x,), back, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def back(g):
        return (g * (1 - y * y),)

    return make(y, (x,), back, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = x.data * mask

    def back(g):
        return (g * mask,)

    return make(y, (x,), back, "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def back(g):
        return (g * y,)

    return make(y, (x,), back, "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data

    def back(g):
        return (g / xd,)

    return make(np.log(xd), (x,), back, "log")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return make(x.data.reshape(shape), (x,), back, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make(np.ascontiguousarray(x.data.transpose(axes)), (x,), back, "transpose")


def _is_basic(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)


def index(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(key)

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    out = x.data[key]
    if basic:
        out = out.copy()
    return make(np.asarray(out, dtype=dtype), (x,), back, "index")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make(np.concatenate([x.data for x in xs], axis=axis), xs, back, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make(np.stack([x.data for x in xs], axis=axis), xs, back, "stack")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)

    return make(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input axis {x.ndim - 1} has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias axis 0 has {bias.shape[0]}, expected {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        grads = [g @ wd, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, back, "linear")


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, padding: tuple[int, ...], value=0.0) -> np.ndarray:
    if not any(padding):
        return x
    widths = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    return np.pad(x, widths, constant_values=value)


def _windows(xp: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Strided window view ``[N, C, *out, *kernel]`` of a padded batch."""
    nd = spec.ndim
    v = sliding_window_view(xp, spec.kernel, axis=tuple(range(2, 2 + nd)))
    return v[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in spec.stride)]


def _chunks(n: int, per_item: int):
    step = max(1, _COL_LIMIT // max(per_item, 1))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def _im2col(win: np.ndarray) -> np.ndarray:
    """``[n, C, *out, *k]`` view -> ``[n * P, C * K]`` matrix."""
    n, c = win.shape[:2]
    nd = (win.ndim - 2) // 2
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    return win.transpose(perm).reshape(-1, c * int(np.prod(win.shape[2 + nd:])))


def _conv_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec, keep_cols: bool):
    n = x.shape[0]
    cout = w.shape[0]
    out_sp = spec.output_shape(x.shape[2:])
    wmat = w.reshape(cout, -1)
    xp = _pad(x, spec.padding)
    win = _windows(xp, spec)
    p = int(np.prod(out_sp))
    dtype = np.result_type(x.dtype, w.dtype)
    out = np.empty((n, p, cout), dtype=dtype)
    cols = []
    for a, b in _chunks(n, p * wmat.shape[1]):
        col = _im2col(win[a:b])
        out[a:b] = (col @ wmat.T).reshape(b - a, p, cout)
        if keep_cols:
            cols.append(col)
    out = np.moveaxis(out, 2, 1).reshape((n, cout) + out_sp)
    return np.ascontiguousarray(out), cols


def _conv_backward(g, x, w, spec: ConvSpec, cols, need_x: bool = True):
    if need_x and all(s == 1 for s in spec.stride) and all(p < k for p, k in zip(spec.padding, spec.kernel)):
        gw = _conv_backward(g, x, w, spec, cols, need_x=False)[1]
        # stride 1: the input gradient is a full correlation with the flipped, transposed kernel
        nd = spec.ndim
        wt = np.ascontiguousarray(np.flip(w, axis=tuple(range(2, 2 + nd))).swapaxes(0, 1))
        tspec = ConvSpec(spec.kernel, (), tuple(k - 1 - p for k, p in zip(spec.kernel, spec.padding)))
        return _conv_forward(g, wt, tspec, keep_cols=False)[0], gw
    n, cin = x.shape[:2]
    cout = w.shape[0]
    nd = spec.ndim
    out_sp = g.shape[2:]
    p = int(np.prod(out_sp))
    wmat = w.reshape(cout, -1)
    gmat = np.moveaxis(g.reshape(n, cout, p), 1, 2)  # [n, P, cout]
    xp = _pad(x, spec.padding)
    win = None if cols else _windows(xp, spec)
    gw = np.zeros_like(wmat, dtype=np.result_type(g.dtype, x.dtype))
    gxp = np.zeros(xp.shape, dtype=np.result_type(g.dtype, w.dtype)) if need_x else None
    kshape = spec.kernel
    for i, (a, b) in enumerate(_chunks(n, p * wmat.shape[1])):
        gm = gmat[a:b].reshape(-1, cout)
        col = cols[i] if cols else _im2col(win[a:b])
        gw += gm.T @ col
        if not need_x:
            continue
        gcol = (gm @ wmat).reshape((b - a, p, cin * int(np.prod(kshape))))
        # [n, C*K, P] so each kernel offset reads a contiguous block
        gcol = np.ascontiguousarray(gcol.transpose(0, 2, 1)).reshape((b - a, cin) + kshape + tuple(out_sp))
        # scatter each kernel offset back onto the padded input
        for off in np.ndindex(*kshape):
            src = gcol[(slice(None), slice(None)) + off]  # [n, C, *out]
            dst = (slice(a, b), slice(None)) + tuple(
                slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(off, spec.stride, out_sp)
            )
            gxp[dst] += src
    if not need_x:
        return None, gw.reshape(w.shape)
    if any(spec.padding):
        inner = (slice(None), slice(None)) + tuple(slice(q, q + m) for q, m in zip(spec.padding, x.shape[2:]))
        gxp = gxp[inner]
    return np.ascontiguousarray(gxp), gw.reshape(w.shape)


def _pointwise(x: Tensor, weight: Tensor) -> Tensor:
    """1x1(x1) convolution as a channel contraction."""
    xd, wd = x.data, weight.data
    cout = wd.shape[0]
    w2 = wd.reshape(cout, -1)
    n, cin = xd.shape[:2]
    sp = xd.shape[2:]
    x3 = xd.reshape(n, cin, -1)
    out = np.matmul(w2, x3).reshape((n, cout) + sp)

    def back(g):
        g3 = g.reshape(n, cout, -1)
        gx = np.matmul(w2.T, g3).reshape(xd.shape)
        gw = np.tensordot(g3, x3, axes=([0, 2], [0, 2])).reshape(wd.shape)
        return gx, gw

    return make(out, (x, weight), back, "conv_1x1")


def conv(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """N-d cross-correlation; batched or unbatched input."""
    x, weight = as_tensor(x), as_tensor(weight)
    nd = spec.ndim
    if weight.ndim != nd + 2:
        raise ShapeError(f"weight rank {weight.ndim} does not match a {nd}-d kernel")
    if tuple(weight.shape[2:]) != spec.kernel:
        for axis, (m, k) in enumerate(zip(weight.shape[2:], spec.kernel)):
            if m != k:
                raise ShapeError(f"weight axis {axis + 2} is {m}, spec kernel says {k}")
    unbatched = x.ndim == nd + 1
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != nd + 2:
        raise ShapeError(f"input rank {x.ndim} is not valid for a {nd}-d convolution")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"channel axis: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    spec.output_shape(x.shape[2:])
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias axis 0 has {bias.shape[0]}, expected {weight.shape[0]}")

    if all(k == 1 for k in spec.kernel) and all(s == 1 for s in spec.stride) and not any(spec.padding):
        out = _pointwise(x, weight)
    else:
        xd, wd = x.data, weight.data
        keep = x.requires_grad or weight.requires_grad
        data, cols = _conv_forward(xd, wd, spec, keep_cols=keep and xd.size * np.prod(spec.kernel) <= _COL_LIMIT)

        need_x = x.requires_grad

        def back(g):
            return _conv_backward(g, xd, wd, spec, cols, need_x)

        out = make(data, (x, weight), back, f"conv{nd}d")
    if bias is not None:
        out = badd(out, reshape(bias, (1, -1) + (1,) * nd))
    if unbatched:
        out = reshape(out, out.shape[1:])
    return out


def conv2d(x, weight, bias, spec: ConvSpec) -> Tensor:
    if spec.ndim != 2:
        raise ShapeError("conv2d needs a 2-d spec")
    return conv(x, weight, bias, spec)


def conv3d(x, weight, bias, spec: ConvSpec) -> Tensor:
    if spec.ndim != 3:
        raise ShapeError("conv3d needs a 3-d spec")
    return conv(x, weight, bias, spec)


# ---------------------------------------------------------------------------
# pooling and resampling


def maxpool(x: Tensor, spec: ConvSpec) -> Tensor:
    """Max over windows; padding is -inf.  Ties route to the first index in scan order."""
    x = as_tensor(x)
    nd = spec.ndim
    unbatched = x.ndim == nd + 1
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != nd + 2:
        raise ShapeError(f"input rank {x.ndim} is not valid for {nd}-d pooling")
    out_sp = spec.output_shape(xd.shape[2:])
    xp = _pad(xd, spec.padding, value=-np.inf)
    win = _windows(xp, spec)
    k = int(np.prod(spec.kernel))
    flat = win.reshape(win.shape[: 2 + nd] + (k,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if unbatched:
        out = out[0]
    shape = x.shape

    def back(g):
        gb = g[None] if unbatched else g
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for j, off in enumerate(np.ndindex(*spec.kernel)):
            sel = arg == j
            if not sel.any():
                continue
            dst = (slice(None), slice(None)) + tuple(
                slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(off, spec.stride, out_sp)
            )
            gxp[dst] += gb * sel
        inner = (slice(None), slice(None)) + tuple(slice(q, q + m) for q, m in zip(spec.padding, xd.shape[2:]))
        gx = gxp[inner]
        return (gx.reshape(shape),)

    return make(np.ascontiguousarray(out), (x,), back, "maxpool")


def avgpool(x: Tensor, window: Sequence[int]) -> Tensor:
    """Non-overlapping mean over trailing axes; extents must divide evenly."""
    window = tuple(window)
    nd = len(window)
    sp = x.shape[-nd:]
    for axis, (n, k) in enumerate(zip(sp, window)):
        if n % k:
            raise ShapeError(f"avgpool: spatial axis {axis} extent {n} not divisible by {k}")
    lead = x.shape[:-nd]
    split = lead + tuple(v for n, k in zip(sp, window) for v in (n // k, k))
    red = tuple(len(lead) + 2 * i + 1 for i in range(nd))
    count = int(np.prod(window))
    out = x.data.reshape(split).mean(axis=red)
    shape = x.shape

    def back(g):
        ge = np.expand_dims(g, red) / count
        return (np.broadcast_to(ge, split).reshape(shape).copy(),)

    return make(out.astype(x.dtype, copy=False), (x,), back, "avgpool")


def _nearest_index(n: int, m: int) -> np.ndarray:
    return (np.arange(m) * n) // m


def upsample_nearest(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of the last two axes to ``target`` (no downscaling)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    h2, w2 = target
    if h2 < h or w2 < w:
        raise ShapeError(f"upsample_nearest cannot shrink {h}x{w} to {h2}x{w2}")
    ih, iw = _nearest_index(h, h2), _nearest_index(w, w2)
    out = x.data[..., ih, :][..., iw]
    starts_h = np.searchsorted(ih, np.arange(h))
    starts_w = np.searchsorted(iw, np.arange(w))

    def back(g):
        g = np.add.reduceat(g, starts_h, axis=-2)
        g = np.add.reduceat(g, starts_w, axis=-1)
        return (g,)

    return make(np.ascontiguousarray(out), (x,), back, "upsample")


# ---------------------------------------------------------------------------
# normalisation and losses


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over ``[N, C, *spatial]``.

    In training mode the running statistics are updated in place.
    """
    dtype = np.result_type(x.data, gamma.data, beta.data)
    xd = x.data.astype(dtype, copy=False)
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: channel axis has {c}, parameters have {gamma.shape[0]}")
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    if training:
        m = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def back(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd
        if training:
            m = xd.size // c
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return make(out.astype(dtype, copy=False), (x, gamma, beta), back, "batchnorm")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), back, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[N, K]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    lp = log_softmax(logits, axis=-1)
    picked = index(lp, (np.arange(n), labels))
    return scale(sum(picked), -1.0 / n)


# ---------------------------------------------------------------------------
# convolution as a dense matrix (small grids)

_MATRIX_INDEX_CACHE: dict = {}


def _matrix_index(cout: int, cin: int, kernel: tuple[int, int], padding: tuple[int, int], spatial: tuple[int, int]):
    key = (cout, cin, kernel, padding, spatial)
    hit = _MATRIX_INDEX_CACHE.get(key)
    if hit is not None:
        return hit
    kh, kw = kernel
    ph, pw = padding
    h, w = spatial
    ci = np.arange(cin)[:, None, None, None, None, None]
    yi = np.arange(h)[None, :, None, None, None, None]
    xi = np.arange(w)[None, None, :, None, None, None]
    co = np.arange(cout)[None, None, None, :, None, None]
    yo = np.arange(h)[None, None, None, None, :, None]
    xo = np.arange(w)[None, None, None, None, None, :]
    ky = yi - yo + ph
    kx = xi - xo + pw
    valid = (ky >= 0) & (ky < kh) & (kx >= 0) & (kx < kw)
    flat = ((co * cin + ci) * kh + np.clip(ky, 0, kh - 1)) * kw + np.clip(kx, 0, kw - 1)
    full = (cin, h, w, cout, h, w)
    flat = np.broadcast_to(flat, full).reshape(cin * h * w, cout * h * w)
    valid = np.broadcast_to(valid, full).reshape(flat.shape)
    hit = (flat[valid].astype(np.int64), np.flatnonzero(valid), flat.shape)
    _MATRIX_INDEX_CACHE[key] = hit
    return hit


def conv_matrix(weight: Tensor, spatial: tuple[int, int], padding: tuple[int, int]) -> Tensor:
    """Dense ``[Cin*h*w, Cout*h*w]`` matrix of a stride-1 2D convolution on a fixed grid.

    ``x.reshape(N, -1) @ M`` equals the convolution output flattened as
    ``[N, Cout*h*w]``.
    """
    cout, cin, kh, kw = weight.shape
    src, dst, shape = _matrix_index(cout, cin, (kh, kw), tuple(padding), tuple(spatial))
    wflat = weight.data.reshape(-1)
    m = np.zeros(shape[0] * shape[1], dtype=weight.dtype)
    m[dst] = wflat[src]
    size = weight.size
    wshape = weight.shape

    def back(g):
        gw = np.bincount(src, weights=g.reshape(-1)[dst], minlength=size)
        return (gw.astype(g.dtype, copy=False).reshape(wshape),)

    return make(m.reshape(shape), (weight,), back, "conv_matrix")
