"""Dense-tensor engine with reverse-mode automatic differentiation.

Values are numpy arrays (float32 for training, float64 for verification);
every differentiable op records its parents and a backward closure on the
output node. ``Tape.trace`` linearises the recorded graph in topological
order and ``backward`` replays it, accumulating gradients additively into
``requires_grad`` leaves. Elementwise arithmetic deliberately supports no
broadcasting beyond scalar-vs-tensor; structured mismatches go through
explicit ops (``bias_add``, ``scale_channels``, ``add_const``) instead.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / sampling loops)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A dense float array plus optional gradient-tape participation.

    ``data`` is always a numpy float32/float64 array. ``grad`` is allocated
    on first accumulation and has the same shape as ``data``. Gradients
    accumulate across backward calls; callers zero them between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, key):
        return slice_(self, key)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of the ops reaching a root, parents before children."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        # Iterative DFS: graph depth can exceed the recursion limit.
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def backprop(self, root):
        root.accumulate_grad(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss):
    """Populate ``grad`` on every reachable requires_grad leaf of a scalar loss."""
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    Tape.trace(loss).backprop(loss)


def make_op(data, parents, backward_fn, op="custom"):
    """Build an op output node; records the graph only while grads are enabled.

    ``backward_fn(grad)`` receives the output gradient and must call
    ``accumulate_grad`` on each requires_grad parent.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_shapes(a, b, op):
    # Scalar-vs-tensor is the only permitted broadcast.
    if a.data.shape == b.data.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match "
                     "(only scalar-vs-tensor broadcasting is supported)")


def _reduce_to(g, shape):
    # Collapse the gradient of a scalar operand that was broadcast.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape in ((), (1,)) else g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.data.shape))

    return make_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(-g, b.data.shape))

    return make_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.data.shape))

    return make_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return make_op(a.data / b.data, (a, b), bw, "div")


def neg(a):
    a = _as_tensor(a)

    def bw(g):
        a.accumulate_grad(-g)

    return make_op(-a.data, (a,), bw, "neg")


def pow_scalar(a, p):
    a = _as_tensor(a)
    p = float(p)

    def bw(g):
        a.accumulate_grad(g * p * a.data ** (p - 1.0))

    return make_op(a.data ** p, (a,), bw, "pow")


def add_const(a, const):
    """Add a non-learnable array that numpy-broadcasts to ``a``'s shape.

    Used for positional tables and attention masks; the constant carries no
    gradient, so the output gradient passes through to ``a`` unchanged.
    """
    a = _as_tensor(a)
    const = np.asarray(const, dtype=a.data.dtype)
    out_data = a.data + const
    if out_data.shape != a.data.shape:
        raise ShapeError(f"add_const: constant of shape {const.shape} does not "
                         f"broadcast into {a.data.shape}")

    def bw(g):
        a.accumulate_grad(g)

    return make_op(out_data, (a,), bw, "add_const")


# -- activations ------------------------------------------------------------

def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        a.accumulate_grad(g * mask)

    return make_op(np.where(mask, a.data, 0), (a,), bw, "relu")


def sigmoid(a):
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a.accumulate_grad(g * y * (1.0 - y))

    return make_op(y, (a,), bw, "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def bw(g):
        a.accumulate_grad(g * (1.0 - y * y))

    return make_op(y, (a,), bw, "tanh")


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)

    def bw(g):
        a.accumulate_grad(g * y)

    return make_op(y, (a,), bw, "exp")


def log(a):
    a = _as_tensor(a)

    def bw(g):
        a.accumulate_grad(g / a.data)

    return make_op(np.log(a.data), (a,), bw, "log")


def sqrt(a):
    a = _as_tensor(a)
    y = np.sqrt(a.data)

    def bw(g):
        a.accumulate_grad(g * 0.5 / y)

    return make_op(y, (a,), bw, "sqrt")


def abs_(a):
    a = _as_tensor(a)
    s = np.sign(a.data)

    def bw(g):
        a.accumulate_grad(g * s)

    return make_op(np.abs(a.data), (a,), bw, "abs")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Gaussian error linear unit (tanh approximation)."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        a.accumulate_grad(g * dy)

    return make_op(y, (a,), bw, "gelu")


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis``; outputs sum to one there."""
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        a.accumulate_grad((g - dot) * y)

    return make_op(y, (a,), bw, "softmax")


# -- reductions & structure -------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    y = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy()
                              if np.ndim(g) == 0 else np.full_like(a.data, g))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype))

    return make_op(y, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    y = np.mean(a.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))

    def bw(g):
        if axis is None:
            a.accumulate_grad(np.full_like(a.data, g / count))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.data.shape).astype(a.data.dtype) / count)

    return make_op(y, (a,), bw, "mean")


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from e

    def bw(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return make_op(y, (a,), bw, "reshape")


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bw(g):
        a.accumulate_grad(np.transpose(g, inv))

    return make_op(np.transpose(a.data, axes), (a,), bw, "transpose")


def slice_(a, key):
    a = _as_tensor(a)
    y = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] += g
        a.accumulate_grad(full)

    return make_op(np.ascontiguousarray(y), (a,), bw, "slice")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return make_op(y, tuple(tensors), bw, "concat")


def embedding_lookup(table, ids):
    """Gather rows of ``table`` (m x d) by an integer id array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        from .errors import VocabError
        raise VocabError(f"embedding_lookup: id outside table of {table.data.shape[0]} rows")
    y = table.data[ids]

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))

    return make_op(y, (table,), bw, "embedding_lookup")


def bias_add(a, b, axis=-1):
    """Add a 1-D bias along one axis of ``a`` (explicit structured broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 1 or a.data.shape[axis] != b.data.shape[0]:
        raise ShapeError(f"bias_add: bias {b.data.shape} does not fit axis {axis} "
                         f"of {a.data.shape}")
    shape = [1] * a.data.ndim
    shape[axis] = b.data.shape[0]
    y = a.data + b.data.reshape(shape)
    reduce_axes = tuple(i for i in range(a.data.ndim) if i != axis % a.data.ndim)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=reduce_axes))

    return make_op(y, (a, b), bw, "bias_add")


def scale_channels(x, a):
    """Multiply channels of ``x`` (N,C,H,W or C,H,W) by per-channel weights.

    ``a`` has shape (N,C) for batched input or (C,) for unbatched.
    """
    x, a = _as_tensor(x), _as_tensor(a)
    if x.data.ndim == 4:
        if a.data.shape != x.data.shape[:2]:
            raise ShapeError(f"scale_channels: weights {a.data.shape} vs input {x.data.shape}")
        w = a.data[:, :, None, None]
        red = (2, 3)
    elif x.data.ndim == 3:
        if a.data.shape != (x.data.shape[0],):
            raise ShapeError(f"scale_channels: weights {a.data.shape} vs input {x.data.shape}")
        w = a.data[:, None, None]
        red = (1, 2)
    else:
        raise ShapeError(f"scale_channels: expected 3-D or 4-D input, got {x.data.shape}")

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * w)
        if a.requires_grad:
            a.accumulate_grad((g * x.data).sum(axis=red))

    return make_op(x.data * w, (x, a), bw, "scale_channels")


# -- matmul -----------------------------------------------------------------

def matmul(a, b):
    """Matrix product. Supports 2-D x 2-D, stacked ND x ND with equal batch
    dims, and ND x 2-D (shared weight applied to a batch)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got "
                         f"{a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree: {a.data.shape} x {b.data.shape}")
    if a.data.ndim != b.data.ndim and b.data.ndim != 2 and a.data.ndim != 2:
        raise ShapeError(f"matmul: unsupported rank combination {a.data.shape} x {b.data.shape}")
    if a.data.ndim == b.data.ndim and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: batch dims disagree: {a.data.shape} x {b.data.shape}")
    y = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ga.shape != a.data.shape:
                ga = ga.sum(axis=tuple(range(ga.ndim - a.data.ndim)))
            a.accumulate_grad(ga)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                m = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                if gb.shape != b.data.shape:
                    gb = gb.sum(axis=tuple(range(gb.ndim - b.data.ndim)))
            b.accumulate_grad(gb)

    return make_op(y, (a, b), bw, "matmul")


# -- convolution ------------------------------------------------------------

def _conv_geometry(h, w, kh, kw, stride, pad):
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input "
                         f"{h + 2 * pad}x{w + 2 * pad}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ShapeError(f"conv2d: non-integral output extent for input {h}x{w}, "
                         f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _im2col(xp, kh, kw, stride, hout, wout):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, hout, wout), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * hout:stride,
                                  j:j + stride * wout:stride]
    return cols.reshape(n, c * kh * kw, hout * wout)


def _col2im(cols, xp_shape, kh, kw, stride, hout, wout):
    n, c = xp_shape[:2]
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, hout, wout)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * hout:stride, j:j + stride * wout:stride] += cols[:, :, i, j]
    return xp


def conv2d(x, k, stride=1, pad=0):
    """Cross-correlation of (C,H,W) or (N,C,H,W) input with an
    (C_out,C_in,kh,kw) kernel. Output extents must divide exactly."""
    x, k = _as_tensor(x), _as_tensor(k)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d: expected (N,C,H,W) input and 4-D kernel, got "
                         f"{x.data.shape} and {k.data.shape}")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = k.data.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input channels {cin} vs kernel channels {kcin}")
    hout, wout = _conv_geometry(h, w, kh, kw, stride, pad)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, kw, stride, hout, wout)
    wmat = k.data.reshape(cout, cin * kh * kw)
    y = np.matmul(wmat, cols).reshape(n, cout, hout, wout)

    def bw(g):
        gd = g[None] if squeeze else g
        gmat = gd.reshape(n, cout, hout * wout)
        if k.requires_grad:
            gk = np.einsum("ncs,nks->ck", gmat, cols, optimize=True)
            k.accumulate_grad(gk.reshape(k.data.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat)
            gxp = _col2im(gcols, xp.shape, kh, kw, stride, hout, wout)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            x.accumulate_grad(gx[0] if squeeze else gx)

    return make_op(y[0] if squeeze else y, (x, k), bw, "conv2d")


def transpose_conv2d(x, k, stride=1, pad=0):
    """Adjoint of conv2d: scatters each input pixel through the kernel.

    Kernel layout is (C_in, C_out, kh, kw); the output spatial size is
    (H-1)*stride - 2*pad + kh.
    """
    x, k = _as_tensor(x), _as_tensor(k)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"transpose_conv2d: expected (N,C,H,W) input and 4-D kernel, "
                         f"got {x.data.shape} and {k.data.shape}")
    n, cin, h, w = xd.shape
    kcin, cout, kh, kw = k.data.shape
    if cin != kcin:
        raise ShapeError(f"transpose_conv2d: input channels {cin} vs kernel channels {kcin}")
    hfull = (h - 1) * stride + kh
    wfull = (w - 1) * stride + kw
    hout = hfull - 2 * pad
    wout = wfull - 2 * pad
    if hout < 1 or wout < 1:
        raise ShapeError(f"transpose_conv2d: non-positive output {hout}x{wout}")
    yfull = np.zeros((n, cout, hfull, wfull), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            # (n,cin,h,w) x (cin,cout) -> (n,h,w,cout)
            contrib = np.tensordot(xd, k.data[:, :, i, j], axes=([1], [0]))
            yfull[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += \
                contrib.transpose(0, 3, 1, 2)
    y = yfull[:, :, pad:pad + hout, pad:pad + wout] if pad else yfull

    def bw(g):
        gd = g[None] if squeeze else g
        gfull = np.pad(gd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else gd
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gslice = gfull[:, :, i:i + stride * h:stride, j:j + stride * w:stride]
                    gx += np.tensordot(gslice, k.data[:, :, i, j], axes=([1], [1])) \
                            .transpose(0, 3, 1, 2)
            x.accumulate_grad(gx[0] if squeeze else gx)
        if k.requires_grad:
            gk = np.empty_like(k.data)
            for i in range(kh):
                for j in range(kw):
                    gslice = gfull[:, :, i:i + stride * h:stride, j:j + stride * w:stride]
                    gk[:, :, i, j] = np.tensordot(xd, gslice, axes=([0, 2, 3], [0, 2, 3]))
            k.accumulate_grad(gk)

    return make_op(y[0] if squeeze else y, (x, k), bw, "transpose_conv2d")


def avg_pool2d(x, factor):
    """Mean pooling by an integer factor over the trailing two axes."""
    x = _as_tensor(x)
    h, w = x.data.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    lead = x.data.shape[:-2]
    xr = x.data.reshape(*lead, h // factor, factor, w // factor, factor)
    y = xr.mean(axis=(-3, -1))

    def bw(g):
        gg = np.repeat(np.repeat(g, factor, axis=-1), factor, axis=-2)
        x.accumulate_grad(gg / (factor * factor))

    return make_op(y, (x,), bw, "avg_pool2d")


def resize_bilinear(x, out_h, out_w):
    """Bilinear resampling of (...,H,W) realised as two interpolation matmuls."""
    x = _as_tensor(x)
    h, w = x.data.shape[-2:]
    ar = _interp_matrix(out_h, h, x.data.dtype)
    ac = _interp_matrix(out_w, w, x.data.dtype)
    y = np.einsum("ah,...hw,bw->...ab", ar, x.data, ac, optimize=True)

    def bw(g):
        x.accumulate_grad(np.einsum("ah,...ab,bw->...hw", ar, g, ac, optimize=True))

    return make_op(y, (x,), bw, "resize_bilinear")


def _interp_matrix(n_out, n_in, dtype):
    # Align-centers bilinear weights; identity when sizes match.
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


# -- normalisation ----------------------------------------------------------

def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then apply a learnable affine."""
    mu = mean(x, axis=-1, keepdims=True)
    centred = sub(x, _expand_like(mu, x))
    var = mean(mul(centred, centred), axis=-1, keepdims=True)
    inv = div(centred, _expand_like(sqrt(add(var, eps)), x))
    return bias_add(mul(inv, _expand_like_ones(gain, inv)), bias, axis=-1)


def _expand_like(small, big):
    # (..., 1) -> (..., n) expansion via explicit op so shapes always match.
    reps = big.data.shape[-1]
    return _tile_last(small, reps)


def _tile_last(a, reps):
    a = _as_tensor(a)
    y = np.repeat(a.data, reps, axis=-1)

    def bw(g):
        a.accumulate_grad(g.sum(axis=-1, keepdims=True))

    return make_op(y, (a,), bw, "tile_last")


def _expand_like_ones(gain, like):
    # 1-D gain broadcast across leading axes of `like`.
    gain = _as_tensor(gain)
    shape = like.data.shape
    y = np.broadcast_to(gain.data, shape).copy()
    lead = tuple(range(len(shape) - 1))

    def bw(g):
        gain.accumulate_grad(g.sum(axis=lead))

    return make_op(y, (gain,), bw, "expand_gain")


def group_norm(x, num_groups, gain, bias, eps=1e-5):
    """Group normalisation over (N,C,H,W) or (C,H,W) with per-channel affine."""
    squeeze = x.data.ndim == 3
    xx = reshape(x, (1,) + x.data.shape) if squeeze else x
    n, c, h, w = xx.data.shape
    if c % num_groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {num_groups} groups")
    gsize = c // num_groups
    xg = reshape(xx, (n, num_groups, gsize * h * w))
    mu = mean(xg, axis=-1, keepdims=True)
    centred = sub(xg, _tile_last(mu, gsize * h * w))
    var = mean(mul(centred, centred), axis=-1, keepdims=True)
    normed = div(centred, _tile_last(sqrt(add(var, eps)), gsize * h * w))
    y = reshape(normed, (n, c, h, w))
    y = scale_channels_shared(y, gain)
    y = bias_add(y, bias, axis=1)
    return reshape(y, x.data.shape) if squeeze else y


def scale_channels_shared(x, gain):
    """Per-channel scaling of (N,C,H,W) with a shared (C,) gain."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if x.data.ndim != 4 or gain.data.shape != (x.data.shape[1],):
        raise ShapeError(f"scale_channels_shared: gain {gain.data.shape} vs input {x.data.shape}")
    w = gain.data[None, :, None, None]

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * w)
        if gain.requires_grad:
            gain.accumulate_grad((g * x.data).sum(axis=(0, 2, 3)))

    return make_op(x.data * w, (x, gain), bw, "scale_channels_shared")


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_elements: int

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def grad_check(f, x, h=1e-5, tol=1e-4):
    """Compare the tape gradient of a scalar-valued ``f`` against central
    finite differences at ``x``.

    Relative error uses max(|fd|, |tape|, 1) as the scale, so near-zero
    gradients are judged absolutely. ``f`` must be deterministic.
    """
    if x.data.dtype != np.float64:
        x = Tensor(x.data.astype(np.float64), requires_grad=True)
    x.requires_grad = True
    x.zero_grad()
    y = f(x)
    if y.size != 1:
        raise ContractError(f"grad_check requires a scalar-valued function, got {y.shape}")
    backward(y)
    g_tape = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    g_fd = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        y_plus = f(x).item()
        flat[i] = orig - h
        y_minus = f(x).item()
        flat[i] = orig
        fd_flat[i] = (y_plus - y_minus) / (2.0 * h)

    scale = np.maximum(np.maximum(np.abs(g_fd), np.abs(g_tape)), 1.0)
    max_rel = float(np.max(np.abs(g_fd - g_tape) / scale)) if flat.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, tol=tol, n_elements=flat.size)
