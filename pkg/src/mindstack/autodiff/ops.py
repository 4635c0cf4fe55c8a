"""Differentiable operations.

Every function accepts :class:`~mindstack.autodiff.tape.Node` objects, numpy
arrays or Python floats. When no operand is a node the op is evaluated eagerly
on numpy values and nothing is recorded, so the same model code serves both
inference and training.

Elementwise binary ops require equal shapes, or one operand of shape ``()``.
Row-wise bias addition is the explicit :func:`add_bias`.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tape import AutodiffError, Node

TWO_PI = 2.0 * math.pi


def _tape_of(args):
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _lift(tape, args):
    return [a if isinstance(a, Node) else tape.constant(a) for a in args]


def _value(a):
    return a.value if isinstance(a, Node) else np.asarray(a, dtype=np.float64)


def _reduce_to(g, shape):
    # adjoint of a scalar operand that was broadcast against a tensor
    if shape == () and g.shape != ():
        return np.sum(g)
    return g


def _check_binary(op, a, b):
    sa, sb = np.shape(a), np.shape(b)
    if sa != sb and sa != () and sb != ():
        raise AutodiffError(f"{op}: shape mismatch {sa} vs {sb}")


def _apply(op, args, fwd, bwd):
    tape = _tape_of(args)
    if tape is None:
        return fwd(*[_value(a) for a in args])
    return tape.record(op, _lift(tape, args), fwd, bwd)


def record(op, inputs, forward_fn, backward_fn=None):
    """Record a custom op on the tape shared by ``inputs``."""
    return _apply(op, list(inputs), forward_fn, backward_fn)


# -- elementwise binary -------------------------------------------------------

def add(a, b):
    _check_binary("add", _value(a), _value(b))
    return _apply("add", [a, b], np.add,
                  lambda g, o, x, y: (_reduce_to(g, x.shape), _reduce_to(g, y.shape)))


def sub(a, b):
    _check_binary("sub", _value(a), _value(b))
    return _apply("sub", [a, b], np.subtract,
                  lambda g, o, x, y: (_reduce_to(g, x.shape), _reduce_to(-g, y.shape)))


def mul(a, b):
    _check_binary("mul", _value(a), _value(b))
    return _apply("mul", [a, b], np.multiply,
                  lambda g, o, x, y: (_reduce_to(g * y, x.shape), _reduce_to(g * x, y.shape)))


def div(a, b):
    _check_binary("div", _value(a), _value(b))
    return _apply("div", [a, b], np.divide,
                  lambda g, o, x, y: (_reduce_to(g / y, x.shape),
                                      _reduce_to(-g * x / (y * y), y.shape)))


def add_bias(x, bias, axis=-1):
    """Add a 1-D ``bias`` along ``axis`` of ``x`` (``axis=-2`` for conv channels)."""
    xs, bs = np.shape(_value(x)), np.shape(_value(bias))
    if len(bs) != 1 or len(xs) < -axis or xs[axis] != bs[0]:
        raise AutodiffError(f"add_bias: shape mismatch {xs} vs {bs}")
    bshape = (bs[0],) + (1,) * (-axis - 1)

    def fwd(xv, bv):
        return xv + bv.reshape(bshape)

    def bwd(g, o, xv, bv):
        gb = np.moveaxis(g, axis, -1).reshape(-1, bv.shape[0]).sum(axis=0)
        return g, gb

    return _apply("add_bias", [x, bias], fwd, bwd)


def atan2(y, x):
    """Quadrant-aware arctangent; returns 0 with zero gradient at the origin."""
    _check_binary("atan2", _value(y), _value(x))

    def bwd(g, o, yv, xv):
        r2 = yv * yv + xv * xv
        safe = np.where(r2 > 0.0, r2, 1.0)
        gy = np.where(r2 > 0.0, xv / safe, 0.0)
        gx = np.where(r2 > 0.0, -yv / safe, 0.0)
        return _reduce_to(g * gy, yv.shape), _reduce_to(g * gx, xv.shape)

    return _apply("atan2", [y, x], np.arctan2, bwd)


# -- elementwise unary ---------------------------------------------------------

def neg(a):
    return _apply("neg", [a], np.negative, lambda g, o, x: (-g,))


def relu(a):
    return _apply("relu", [a], lambda x: np.maximum(x, 0.0),
                  lambda g, o, x: (g * (x > 0.0),))


def tanh(a):
    return _apply("tanh", [a], np.tanh, lambda g, o, x: (g * (1.0 - o * o),))


def atan(a):
    return _apply("atan", [a], np.arctan, lambda g, o, x: (g / (1.0 + x * x),))


def sin(a):
    return _apply("sin", [a], np.sin, lambda g, o, x: (g * np.cos(x),))


def cos(a):
    return _apply("cos", [a], np.cos, lambda g, o, x: (-g * np.sin(x),))


def tan(a):
    return _apply("tan", [a], np.tan, lambda g, o, x: (g * (1.0 + o * o),))


def abs(a):  # noqa: A001 - mirrors the numpy name
    return _apply("abs", [a], np.abs, lambda g, o, x: (g * np.sign(x),))


def square(a):
    return _apply("square", [a], np.square, lambda g, o, x: (2.0 * g * x,))


def clamp(a, lo, hi):
    """Clip to ``[lo, hi]``; the gradient is zero where the bound is active."""
    def fwd(x):
        return np.clip(x, lo, hi)

    def bwd(g, o, x):
        return (g * ((x > lo) & (x < hi)),)

    return _apply("clamp", [a], fwd, bwd)


def wrap_angle(a):
    """Map to (-pi, pi]; locally a shift by a multiple of 2*pi, so the gradient is 1."""
    def fwd(x):
        w = np.mod(x + math.pi, TWO_PI) - math.pi
        return np.where(w == -math.pi, math.pi, w)

    return _apply("wrap", [a], fwd, lambda g, o, x: (g,))


# -- reductions and shape ops --------------------------------------------------

def sum(a):  # noqa: A001
    return _apply("sum", [a], np.sum, lambda g, o, x: (np.full(x.shape, g),))


def mean(a):
    def bwd(g, o, x):
        return (np.full(x.shape, g / max(x.size, 1)),)

    return _apply("mean", [a], np.mean, bwd)


def reshape(a, shape):
    shape = tuple(shape)

    def fwd(x):
        return x.reshape(shape)

    return _apply("reshape", [a], fwd, lambda g, o, x: (g.reshape(x.shape),))


def index(a, idx):
    """Basic indexing or slicing (``x[idx]``)."""
    def fwd(x):
        return np.array(x[idx], dtype=np.float64)

    def bwd(g, o, x):
        out = np.zeros_like(x)
        out[idx] += g
        return (out,)

    return _apply("index", [a], fwd, bwd)


def concat(items, axis=0):
    items = list(items)
    if not items:
        raise AutodiffError("concat: no operands")
    shapes = [np.shape(_value(v)) for v in items]
    nd = len(shapes[0])
    for s in shapes:
        if len(s) != nd or any(s[i] != shapes[0][i] for i in range(nd) if i != axis % max(nd, 1)):
            raise AutodiffError(f"concat: shape mismatch {shapes}")
    sizes = [s[axis] for s in shapes]
    cuts = np.cumsum(sizes)[:-1]

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def bwd(g, o, *xs):
        return tuple(np.split(g, cuts, axis=axis))

    return _apply("concat", items, fwd, bwd)


def stack_scalars(items):
    """Stack shape-() operands into a 1-D vector."""
    return concat([reshape(v, (1,)) for v in items], axis=0)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    """``a @ b`` for a of shape (n,) or (m, n) and b of shape (n, k)."""
    sa, sb = np.shape(_value(a)), np.shape(_value(b))
    if len(sb) != 2 or len(sa) not in (1, 2) or sa[-1] != sb[0]:
        raise AutodiffError(f"matmul: shape mismatch {sa} vs {sb}")

    def bwd(g, o, x, w):
        if x.ndim == 1:
            return g @ w.T, np.outer(x, g)
        return g @ w.T, x.T @ g

    return _apply("matmul", [a, b], np.matmul, bwd)


def conv1d_output_length(length, k, stride):
    if k > length:
        raise AutodiffError(f"conv1d: kernel width {k} exceeds input length {length}")
    return (length - k) // stride + 1


def _conv1d_fwd(x, w, stride):
    c_out, c_in, k = w.shape
    l_out = conv1d_output_length(x.shape[-1], k, stride)
    win = sliding_window_view(x, k, axis=-1)[..., ::stride, :][..., :l_out, :]
    # win: [..., c_in, l_out, k] -> [..., l_out, c_in*k]
    cols = np.moveaxis(win, -3, -2).reshape(x.shape[:-2] + (l_out, c_in * k))
    out = cols @ w.reshape(c_out, c_in * k).T
    return np.swapaxes(out, -1, -2), cols


def conv1d(x, w, stride=1):
    """Valid cross-correlation.

    ``x`` is ``[C_in, L]`` or batched ``[B, C_in, L]``; ``w`` is
    ``[C_out, C_in, K]``. Output is ``[(B,) C_out, L_out]``.
    """
    if stride < 1:
        raise AutodiffError("conv1d: stride must be positive")
    xs, ws = np.shape(_value(x)), np.shape(_value(w))
    if len(ws) != 3 or len(xs) not in (2, 3) or xs[-2] != ws[1]:
        raise AutodiffError(f"conv1d: shape mismatch input {xs} vs kernels {ws}")
    conv1d_output_length(xs[-1], ws[2], stride)

    def fwd(xv, wv):
        return _conv1d_fwd(xv, wv, stride)[0]

    def bwd(g, o, xv, wv):
        c_out, c_in, k = wv.shape
        _, cols = _conv1d_fwd(xv, wv, stride)
        gt = np.swapaxes(g, -1, -2)  # [..., l_out, c_out]
        gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(wv.shape)
        gcols = (gt @ wv.reshape(c_out, c_in * k)).reshape(gt.shape[:-1] + (c_in, k))
        gx = np.zeros_like(xv)
        l_out = g.shape[-1]
        span = stride * (l_out - 1) + 1
        for j in range(k):
            gx[..., j:j + span:stride] += np.swapaxes(gcols[..., j], -1, -2)
        return gx, gw

    return _apply("conv1d", [x, w], fwd, bwd)


def value(a):
    """Numeric value of a node or plain operand."""
    return _value(a)
