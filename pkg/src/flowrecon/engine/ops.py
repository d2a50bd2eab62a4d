"""Primitive operations with their backward rules.

Each primitive is registered under a tag. ``record(tag, *inputs, **attrs)``
evaluates it eagerly and, when a tape is active and some input requires a
gradient, appends a node to that tape.
"""

from __future__ import annotations

import numpy as np

from .. import _kernels
from .tensor import NonFiniteError, ShapeError, Tensor, active_tape, as_tensor, finite_checks_enabled

PRIMITIVES = {}


def primitive(tag):
    def register(fn):
        PRIMITIVES[tag] = fn
        return fn
    return register


def record(op, *inputs, **attrs):
    """Apply primitive ``op`` to tensors ``inputs`` and tape it if needed."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}") from None
    if op == "concat":
        inputs = tuple(as_tensor(t) for t in inputs[0]) if len(inputs) == 1 and isinstance(
            inputs[0], (list, tuple)) else tuple(as_tensor(t) for t in inputs)
    else:
        inputs = tuple(as_tensor(t) for t in inputs)
    out_data, vjp = fn(*(t.data for t in inputs), **attrs)
    if finite_checks_enabled() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(op)
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape.add_node(op, inputs, (out,), vjp)
    return out


def record_custom(op, inputs, outputs, vjp):
    """Tape a composite node with several outputs; ``vjp(grads_out) -> grads_in``."""
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return outputs
    for o in outputs:
        o.requires_grad = True
    tape.add_node(op, tuple(inputs), tuple(outputs), vjp)
    return outputs


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise -----------------------------------------------------------------

@primitive("add")
def _add(a, b):
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return a + b, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))


@primitive("sub")
def _sub(a, b):
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return a - b, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))


@primitive("mul")
def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("neg")
def _neg(a):
    return -a, lambda g: (-g,)


@primitive("exp")
def _exp(a):
    y = np.exp(a)
    return y, lambda g: (g * y,)


@primitive("log")
def _log(a):
    with np.errstate(divide="ignore"):
        y = np.log(a)
    return y, lambda g: (g / a,)


@primitive("tanh")
def _tanh(a):
    y = np.tanh(a)
    return y, lambda g: (g * (1.0 - y * y),)


@primitive("relu")
def _relu(a):
    mask = a > 0
    return np.where(mask, a, 0).astype(a.dtype), lambda g: (g * mask,)


@primitive("leaky_relu")
def _leaky_relu(a, slope=0.01):
    mask = a > 0
    scale = np.where(mask, 1.0, slope).astype(a.dtype)
    return a * scale, lambda g: (g * scale,)


# linear algebra ------------------------------------------------------------------

@primitive("matmul")
def _matmul(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a @ b

    def vjp(g):
        a2 = a.reshape(1, -1) if a.ndim == 1 else a
        b2 = b.reshape(-1, 1) if b.ndim == 1 else b
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)
    return out, vjp


@primitive("conv2d")
def _conv2d(x, w, stride=1):
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] not in (1, 3) or stride not in (1, 2):
        raise ShapeError("conv2d", x.shape, w.shape, detail=f"stride={stride}")
    B, C, H, W = x.shape
    O, k = w.shape[0], w.shape[2]
    if k == 1:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        Ho, Wo = xs.shape[2], xs.shape[3]
        cols = xs.reshape(B, C, Ho * Wo)
    else:
        cols = _kernels.im2col(x, k, stride)
        Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    wm = w.reshape(O, -1)
    out = np.matmul(wm, cols).reshape(B, O, Ho, Wo)

    def vjp(g):
        g = g.reshape(B, O, Ho * Wo)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(wm.T, g)
        if k == 1:
            if stride > 1:
                gx = np.zeros_like(x)
                gx[:, :, ::stride, ::stride] = gcols.reshape(B, C, Ho, Wo)
            else:
                gx = gcols.reshape(x.shape)
        else:
            gx = _kernels.col2im(np.ascontiguousarray(gcols), x.shape, k, stride)
        return gx, gw
    return out, vjp


@primitive("bias_add")
def _bias_add(x, b):
    if x.ndim < 2 or b.shape != (x.shape[1],):
        raise ShapeError("bias_add", x.shape, b.shape)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return x + b.reshape(shape), lambda g: (g, g.sum(axis=axes))


# reductions ----------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@primitive("sum")
def _sum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    out = x.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)
    return out, vjp


@primitive("mean")
def _mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.sum(axis=axes, keepdims=keepdims) / x.dtype.type(count)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / x.dtype.type(count), x.shape).copy(),)
    return out, vjp


# structural -------------------------------------------------------------------------

@primitive("slice")
def _slice(x, axis=1, start=0, stop=None):
    axis %= x.ndim
    n = x.shape[axis]
    stop = n if stop is None else stop
    if not 0 <= start < stop <= n:
        raise ShapeError("slice", x.shape, detail=f"axis={axis} range [{start}, {stop})")
    idx = (slice(None),) * axis + (slice(start, stop),)

    def vjp(g):
        gx = np.zeros_like(x)
        gx[idx] = g
        return (gx,)
    return x[idx], vjp


@primitive("concat")
def _concat(*xs, axis=1):
    ref = xs[0]
    axis %= ref.ndim
    for t in xs[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i]
                                     for i in range(ref.ndim) if i != axis):
            raise ShapeError("concat", *(u.shape for u in xs), detail=f"axis={axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def vjp(g):
        return tuple(g[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)]
                     for i in range(len(xs)))
    return np.concatenate(xs, axis=axis), vjp


@primitive("reshape")
def _reshape(x, shape=None):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return out, lambda g: (g.reshape(x.shape),)


@primitive("take")
def _take(x, indices=None, axis=1):
    indices = np.asarray(indices)
    axis %= x.ndim
    if indices.ndim != 1 or (indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis])):
        raise ShapeError("take", x.shape, indices.shape, detail=f"axis={axis}")

    def vjp(g):
        gx = np.zeros_like(x)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (gx,)
    return np.take(x, indices, axis=axis), vjp


def _check_even(op, x):
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(op, x.shape, detail="needs (B, C, H, W) with even H, W")


def _s2d(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 3, 5, 1, 2, 4).reshape(
        B, 4 * C, H // 2, W // 2)


def _d2s(x):
    B, C4, h, w = x.shape
    C = C4 // 4
    return x.reshape(B, 2, 2, C, h, w).transpose(0, 3, 4, 1, 5, 2).reshape(B, C, 2 * h, 2 * w)


@primitive("space_to_depth")
def _space_to_depth(x):
    _check_even("space_to_depth", x)
    return _s2d(x), lambda g: (_d2s(g),)


@primitive("depth_to_space")
def _depth_to_space(x):
    if x.ndim != 4 or x.shape[1] % 4:
        raise ShapeError("depth_to_space", x.shape, detail="channels must be a multiple of 4")
    return _d2s(x), lambda g: (_s2d(g),)


@primitive("avgpool2")
def _avgpool2(x):
    _check_even("avgpool2", x)
    B, C, H, W = x.shape
    out = x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.dtype.type(0.25),)
    return out, vjp


@primitive("upsample2")
def _upsample2(x):
    if x.ndim != 4:
        raise ShapeError("upsample2", x.shape)
    B, C, h, w = x.shape
    out = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
    return out, lambda g: (g.reshape(B, C, h, 2, w, 2).sum(axis=(3, 5)),)


# public wrappers -------------------------------------------------------------------

def add(a, b):
    return record("add", a, b)


def sub(a, b):
    return record("sub", a, b)


def mul(a, b):
    return record("mul", a, b)


def neg(a):
    return record("neg", a)


def exp(a):
    return record("exp", a)


def log(a):
    return record("log", a)


def tanh(a):
    return record("tanh", a)


def relu(a):
    return record("relu", a)


def leaky_relu(a, slope=0.01):
    return record("leaky_relu", a, slope=slope)


def matmul(a, b):
    return record("matmul", a, b)


def conv2d(x, w, stride=1):
    return record("conv2d", x, w, stride=stride)


def bias_add(x, b):
    return record("bias_add", x, b)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return record("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return record("mean", x, axis=axis, keepdims=keepdims)


def slice_axis(x, axis, start, stop=None):
    return record("slice", x, axis=axis, start=start, stop=stop)


def concat(tensors, axis=1):
    return record("concat", list(tensors), axis=axis)


def reshape(x, shape):
    return record("reshape", x, shape=tuple(shape))


def take(x, indices, axis=1):
    return record("take", x, indices=np.asarray(indices), axis=axis)


def space_to_depth(x):
    return record("space_to_depth", x)


def depth_to_space(x):
    return record("depth_to_space", x)


def avgpool2(x):
    return record("avgpool2", x)


def upsample2(x):
    return record("upsample2", x)


def square(x):
    return mul(x, x)


def flatten(x):
    """Collapse all but the batch axis."""
    return reshape(x, (x.shape[0], -1))


def check_finite_array(arr, where, index=None):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(where, index)
