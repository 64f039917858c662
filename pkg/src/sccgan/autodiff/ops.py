"""Differentiable operations.

Shape rules are deliberately narrow: binary elementwise ops take operands of
identical shape, or one 0-d scalar operand.  Anything else must go through
:func:`broadcast_to` explicitly.

Full reductions (``axis=None``) accumulate and return float64 0-d values even
in 32-bit mode; partial reductions accumulate in float64 and are stored back in
the input dtype.  Elementwise results take the dtype of their array operand.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .._numeric import separable_correlate, separable_correlate_adjoint
from .tensor import Tensor, as_tensor

__all__ = [
    "add", "sub", "mul", "scale", "neg", "square", "exp", "reciprocal", "tanh",
    "relu", "leaky_relu", "abs", "clamp", "sum", "mean", "max", "min",
    "reshape", "broadcast_to", "take", "pad", "translate", "translate_stack",
    "conv2d", "conv_transpose2d", "separable_conv2d", "instance_norm",
    "l1_norm", "l2_sq",
]

Number = Union[int, float]


def _node(data, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, op=op, parents=parents if req else ())
    if req:
        out._backward = lambda: backward_fn(out.grad)
    return out


def _scalar_const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def _binary_dtype(a: Tensor, b: Tensor) -> np.dtype:
    if a.shape == b.shape:
        return np.result_type(a.dtype, b.dtype)
    if b.ndim == 0:
        return a.dtype
    if a.ndim == 0:
        return b.dtype
    raise ValueError(f"shape mismatch: {a.shape} vs {b.shape} (use broadcast_to)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Sum a gradient back onto a (possibly 0-d) operand."""
    if t.shape == g.shape:
        return g
    return np.asarray(np.sum(g, dtype=np.float64))


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _scalar_const(a), _scalar_const(b)
    dt = _binary_dtype(a, b)
    data = (a.data + b.data).astype(dt, copy=False)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b))

    return _node(data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _scalar_const(a), _scalar_const(b)
    dt = _binary_dtype(a, b)
    data = (a.data - b.data).astype(dt, copy=False)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b))

    return _node(data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _scalar_const(a), _scalar_const(b)
    dt = _binary_dtype(a, b)
    data = (a.data * b.data).astype(dt, copy=False)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b))

    return _node(data, "mul", (a, b), bw)


def scale(x: Tensor, c: Number) -> Tensor:
    c = float(c)
    data = x.data * x.data.dtype.type(c)
    return _node(data, "scale", (x,), lambda g: x._accumulate(g * c))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def square(x: Tensor) -> Tensor:
    data = x.data * x.data
    return _node(data, "square", (x,), lambda g: x._accumulate(2.0 * g * x.data))


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _node(data, "exp", (x,), lambda g: x._accumulate(g * data))


def reciprocal(x: Tensor) -> Tensor:
    if np.any(x.data == 0):
        raise ZeroDivisionError("reciprocal of zero")
    data = 1.0 / x.data
    return _node(data, "reciprocal", (x,), lambda g: x._accumulate(-g * data * data))


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)
    return _node(data, "tanh", (x,), lambda g: x._accumulate(g * (1.0 - data * data)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    data = np.where(pos, x.data, 0).astype(x.dtype, copy=False)
    return _node(data, "relu", (x,), lambda g: x._accumulate(g * pos))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope).astype(x.dtype)
    data = x.data * factor
    return _node(data, "leaky_relu", (x,), lambda g: x._accumulate(g * factor))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    data = np.abs(x.data)
    return _node(data, "abs", (x,), lambda g: x._accumulate(g * sign))


def clamp(x: Tensor, lo=None, hi=None) -> Tensor:
    """Clip ``x`` into ``[lo, hi]``; bounds may be 0-d tensors (gradients flow into them)."""
    parents = [x]
    data = x.data
    lo_t = hi_t = None
    below = above = None
    if lo is not None:
        lo_t = _scalar_const(lo)
        if lo_t.ndim != 0:
            raise ValueError("clamp bounds must be scalars")
        below = data < lo_t.data
        parents.append(lo_t)
    if hi is not None:
        hi_t = _scalar_const(hi)
        if hi_t.ndim != 0:
            raise ValueError("clamp bounds must be scalars")
        above = x.data > hi_t.data
        parents.append(hi_t)
    lo_v = lo_t.data if lo_t is not None else None
    hi_v = hi_t.data if hi_t is not None else None
    data = np.clip(x.data, lo_v, hi_v).astype(x.dtype, copy=False)
    inside = np.ones(x.shape, bool)
    if below is not None:
        inside &= ~below
    if above is not None:
        inside &= ~above

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * inside)
        if lo_t is not None and lo_t.requires_grad:
            lo_t._accumulate(np.asarray(np.sum(g[below], dtype=np.float64)))
        if hi_t is not None and hi_t.requires_grad:
            hi_t._accumulate(np.asarray(np.sum(g[above], dtype=np.float64)))

    return _node(data, "clamp", tuple(parents), bw)


# ----------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_like(g: np.ndarray, x: Tensor, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if x.size == 0:
        raise ValueError("sum of an empty tensor")
    ax = _norm_axis(axis, x.ndim)
    data = np.sum(x.data, axis=ax, dtype=np.float64, keepdims=keepdims)
    if ax is not None:
        data = data.astype(x.dtype)
    return _node(np.asarray(data), "sum", (x,),
                 lambda g: x._accumulate(_expand_like(g, x, ax, keepdims)))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if x.size == 0:
        raise ValueError("mean of an empty tensor")
    ax = _norm_axis(axis, x.ndim)
    n = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    data = np.mean(x.data, axis=ax, dtype=np.float64, keepdims=keepdims)
    if ax is not None:
        data = data.astype(x.dtype)
    return _node(np.asarray(data), "mean", (x,),
                 lambda g: x._accumulate(_expand_like(g, x, ax, keepdims) / n))


def _extreme(x: Tensor, axis: int, keepdims: bool, pick, name: str) -> Tensor:
    axis = axis % x.ndim
    idx = np.expand_dims(pick(x.data, axis=axis), axis)  # first occurrence on ties
    data = np.take_along_axis(x.data, idx, axis)
    if not keepdims:
        data = np.squeeze(data, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(full, idx, g, axis)
        x._accumulate(full)

    return _node(data, name, (x,), bw)


def max(x: Tensor, axis: int = 0, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; ties send the gradient to the lowest index."""
    return _extreme(x, axis, keepdims, np.argmax, "max")


def min(x: Tensor, axis: int = 0, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Minimum along ``axis``; ties send the gradient to the lowest index."""
    return _extreme(x, axis, keepdims, np.argmin, "min")


def l1_norm(a: Tensor, b: Tensor) -> Tensor:
    """``sum |a - b|`` with a float64 accumulator."""
    return sum(abs(sub(a, b)))


def l2_sq(x: Tensor) -> Tensor:
    """``sum x**2`` with a float64 accumulator."""
    return sum(square(x))


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    return _node(data, "reshape", (x,), lambda g: x._accumulate(g.reshape(x.shape)))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    lead = len(shape) - x.ndim
    kept = tuple(i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        g = np.sum(g, axis=tuple(range(lead)), dtype=np.float64) if lead else g
        if kept:
            g = np.sum(g, axis=kept, keepdims=True, dtype=np.float64)
        x._accumulate(g)

    return _node(data, "broadcast_to", (x,), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=int)
    axis = axis % x.ndim
    data = np.take(x.data, indices, axis=axis)

    def bw(g):
        full = np.zeros(x.shape, dtype=np.float64)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        x._accumulate(full)

    return _node(data, "take", (x,), bw)


def _gather2d(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return x[..., rows[:, None], cols[None, :]]


def _scatter2d(g: np.ndarray, rows: np.ndarray, cols: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_gather2d` (sequential accumulation, deterministic)."""
    lead = g.shape[:-2]
    n_lead = int(np.prod(lead)) if lead else 1
    flat = (rows[:, None] * w + cols[None, :]).ravel()
    g2 = g.reshape(n_lead, -1)
    offs = (np.arange(n_lead) * (h * w))[:, None]
    acc = np.bincount((flat[None, :] + offs).ravel(), weights=g2.ravel(),
                      minlength=n_lead * h * w)
    return acc.reshape(lead + (h, w))


def pad(x: Tensor, widths: Tuple[int, int, int, int], mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``(top, bottom, left, right)``.

    ``mode`` is ``"zero"`` or ``"replicate"`` (edge clamping).
    """
    t, b, l, r = (int(v) for v in widths)
    if builtins.min(t, b, l, r) < 0:
        raise ValueError("pad widths must be >= 0")
    h, w = x.shape[-2:]
    if mode == "zero":
        spec = [(0, 0)] * (x.ndim - 2) + [(t, b), (l, r)]
        data = np.pad(x.data, spec)

        def bw(g):
            x._accumulate(g[..., t:t + h, l:l + w])

    elif mode == "replicate":
        rows = np.clip(np.arange(-t, h + b), 0, h - 1)
        cols = np.clip(np.arange(-l, w + r), 0, w - 1)
        data = _gather2d(x.data, rows, cols)

        def bw(g):
            x._accumulate(_scatter2d(g, rows, cols, h, w))

    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return _node(data, f"pad_{mode}", (x,), bw)


def translate_stack(x: Tensor, offsets: Sequence[Tuple[int, int]]) -> Tensor:
    """Stack of edge-clamped translations: ``out[..., k, i, j] = x[..., clamp(i+dy_k), clamp(j+dx_k)]``.

    The new axis is inserted just before the two spatial axes.
    """
    h, w = x.shape[-2:]
    offsets = [(int(dy), int(dx)) for dy, dx in offsets]
    if not offsets:
        raise ValueError("no offsets")
    rows = np.stack([np.clip(np.arange(h) + dy, 0, h - 1) for dy, _ in offsets])
    cols = np.stack([np.clip(np.arange(w) + dx, 0, w - 1) for _, dx in offsets])
    data = x.data[..., rows[:, :, None], cols[:, None, :]]

    def bw(g):
        lead = x.shape[:-2]
        n_lead = int(np.prod(lead)) if lead else 1
        k = len(offsets)
        flat = (rows[:, :, None] * w + cols[:, None, :]).reshape(1, k * h * w)
        offs = (np.arange(n_lead) * (h * w))[:, None]
        acc = np.bincount((flat + offs).ravel(), weights=g.reshape(n_lead, -1).ravel(),
                          minlength=n_lead * h * w)
        x._accumulate(acc.reshape(x.shape))

    return _node(data, "translate", (x,), bw)


def translate(x: Tensor, alpha: Tuple[int, int]) -> Tensor:
    """Edge-clamped translation ``out(p) = x(clamp(p + alpha))``."""
    stacked = translate_stack(x, [alpha])
    return reshape(stacked, x.shape)


# ----------------------------------------------------------------------------
# convolutions (NCHW, weights OIHW)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _col2im(cols: np.ndarray, out_hw: Tuple[int, int], stride: int) -> np.ndarray:
    """Scatter ``(N, Ho, Wo, C, kh, kw)`` patch columns into ``(N, C, H, W)``."""
    n, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((n, c) + tuple(out_hw), dtype=cols.dtype)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Unpadded ('valid') cross-correlation; pad beforehand with :func:`pad`."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x (N,C,H,W) and w (O,C,kh,kw)")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input {c}, weight {c2}")
    if h < kh or wd < kw:
        raise ValueError(f"input {h}x{wd} smaller than kernel {kh}x{kw}")
    win = _windows(x.data, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    data = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        data = data + b.data.reshape(1, o, 1, 1)
    data = np.ascontiguousarray(data)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if w.requires_grad:
            w._accumulate(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
            dx = _col2im(cols, (stride * (ho - 1) + kh, stride * (wo - 1) + kw), stride)
            if dx.shape[2:] != (h, wd):
                full = np.zeros(x.shape, dtype=dx.dtype)
                full[:, :, :dx.shape[2], :dx.shape[3]] = dx
                dx = full
            x._accumulate(dx)

    return _node(data, "conv2d", parents, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2,
                     padding: int = 1, output_padding: int = 1) -> Tensor:
    """Fractionally-strided convolution, the adjoint of a strided :func:`conv2d`.

    ``w`` is ``(C_in, C_out, k, k)``; output side ``(H-1)*stride - 2*padding + k + output_padding``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv_transpose2d expects x (N,C,H,W) and w (C_in,C_out,k,k)")
    n, c, h, wd = x.shape
    ci, co, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"channel mismatch: input {c}, weight {ci}")
    if not 0 <= output_padding <= padding:
        raise ValueError("need 0 <= output_padding <= padding")
    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # N,H,W,Co,kh,kw
    fh, fw = stride * (h - 1) + kh, stride * (wd - 1) + kw
    full = _col2im(cols, (fh, fw), stride)
    r0, r1 = padding, fh - padding + output_padding
    c0, c1 = padding, fw - padding + output_padding
    data = full[:, :, r0:r1, c0:c1]
    if b is not None:
        data = data + b.data.reshape(1, co, 1, 1)
    data = np.ascontiguousarray(data)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gfull = np.zeros((n, co, fh, fw), dtype=g.dtype)
        gfull[:, :, r0:r1, c0:c1] = g
        win = _windows(gfull, kh, kw, stride)[:, :, :h, :wd]
        if x.requires_grad:
            dx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            x._accumulate(dx)
        if w.requires_grad:
            w._accumulate(np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return _node(data, "conv_transpose2d", parents, bw)


def separable_conv2d(x: Tensor, k_rows: np.ndarray, k_cols: np.ndarray) -> Tensor:
    """Per-channel 'valid' correlation with the fixed kernel ``outer(k_rows, k_cols)``.

    Equivalent to :func:`conv2d` with a rank-one kernel applied to every
    channel independently, at O(k) instead of O(k^2) cost.  The kernel is a
    constant; only ``x`` receives a gradient.
    """
    k_rows = np.asarray(k_rows, dtype=np.float64)
    k_cols = np.asarray(k_cols, dtype=np.float64)
    data = separable_correlate(x.data, k_rows, k_cols)
    return _node(data, "separable_conv2d", (x,),
                 lambda g: x._accumulate(separable_correlate_adjoint(g, k_rows, k_cols)))


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane to zero mean, unit variance (no affine)."""
    if x.ndim != 4:
        raise ValueError("instance_norm expects (N,C,H,W)")
    mu = np.mean(x.data, axis=(2, 3), keepdims=True, dtype=np.float64)
    xc = x.data - mu.astype(x.dtype)
    var = np.mean(xc.astype(np.float64) ** 2, axis=(2, 3), keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    m = x.shape[2] * x.shape[3]

    def bw(g):
        g_mean = np.sum(g, axis=(2, 3), keepdims=True, dtype=np.float64) / m
        gx_mean = np.sum(g * xhat, axis=(2, 3), keepdims=True, dtype=np.float64) / m
        x._accumulate(inv * (g - g_mean.astype(g.dtype) - xhat * gx_mean.astype(g.dtype)))

    return _node(xhat, "instance_norm", (x,), bw)
