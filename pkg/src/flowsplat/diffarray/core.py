"""Reverse-mode autodiff on dense numpy arrays.

Building an expression evaluates it eagerly (define-by-run); every result
keeps just enough context (parent nodes plus a backward closure) to drive
an exact reverse pass from any scalar reduction.  Graphs are plain Python
object graphs, so the tape of one training step is garbage collected as
soon as the loss goes out of scope.

Primitives: pointwise arithmetic with broadcasting, matmul, strided 2D
convolution and its transpose, nearest/bilinear resize, concatenation,
softmax, sum/mean reductions, slicing, reshape/transpose and the usual
pointwise nonlinearities.  New fused primitives can be defined outside
this module with :func:`make_node` / :func:`accumulate_grad`.
"""

from __future__ import annotations

import functools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / detached targets)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DiffArray:
    """Dense array with an optional gradient slot and backward context."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._size_err()

    def _size_err(self):
        raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")

    def __repr__(self):
        tag = " grad" if self.requires_grad else ""
        return f"DiffArray(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- graph ----------------------------------------------------------
    def detach(self):
        """Value-only copy that is cut out of the recorded graph."""
        return DiffArray(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse pass from a finite scalar; leaf grads accumulate across calls."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("backward() refused: loss is not finite")
        order = _toposort(self)
        for node in order:
            if node._parents:
                node.grad = None
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)


def asdiff(x, dtype=None):
    if isinstance(x, DiffArray):
        return x
    arr = np.asarray(x, dtype=dtype)
    return DiffArray(arr)


def parameter(data, name=None):
    """Trainable leaf."""
    return DiffArray(np.array(data), requires_grad=True, name=name)


def _tracked(parents):
    if not _grad_enabled:
        return False
    return any(p.requires_grad or p._parents for p in parents)


def make_node(data, parents, backward):
    """Wrap ``data`` as the result of an op over ``parents``.

    ``backward(g)`` must route the incoming cotangent to the parents via
    :func:`accumulate_grad`.  Recording is skipped entirely when no parent
    participates in differentiation (or inside ``no_grad``).
    """
    out = DiffArray(data)
    if _tracked(parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def needs_grad(node):
    """True when the reverse pass has to deliver a cotangent to ``node``."""
    return node.requires_grad or bool(node._parents)


def accumulate_grad(node, g):
    """Add cotangent ``g`` into ``node``'s grad slot (out-of-place, alias safe)."""
    if not needs_grad(node):
        return
    node.grad = g if node.grad is None else node.grad + g


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    """Reduce cotangent ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- pointwise arithmetic ---------------------------------------------------

_SCALARS = (int, float, np.integer, np.floating)


def _broadcast_op(opname, a, b, fwd, bwd_a, bwd_b):
    # plain numbers stay python scalars so numpy's weak promotion keeps the
    # array dtype (a wrapped 0-d float64 array would upcast float32 graphs)
    a_num, b_num = isinstance(a, _SCALARS), isinstance(b, _SCALARS)
    a = float(a) if a_num else asdiff(a)
    b = float(b) if b_num else asdiff(b)
    a_data = a if a_num else a.data
    b_data = b if b_num else b.data
    try:
        data = fwd(a_data, b_data)
    except ValueError:
        sa = "scalar" if a_num else a.shape
        sb = "scalar" if b_num else b.shape
        raise ShapeError(f"{opname}: operand shapes {sa} and {sb} do not broadcast") from None
    parents = tuple(x for x, num in ((a, a_num), (b, b_num)) if not num)

    def backward(g):
        if not a_num and needs_grad(a):
            accumulate_grad(a, _unbroadcast(bwd_a(g, a_data, b_data), a.data.shape))
        if not b_num and needs_grad(b):
            accumulate_grad(b, _unbroadcast(bwd_b(g, a_data, b_data), b.data.shape))

    return make_node(data, parents, backward)


def add(a, b):
    return _broadcast_op("add", a, b, lambda x, y: x + y,
                         lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _broadcast_op("sub", a, b, lambda x, y: x - y,
                         lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _broadcast_op("mul", a, b, lambda x, y: x * y,
                         lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _broadcast_op("div", a, b, lambda x, y: x / y,
                         lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a):
    a = asdiff(a)

    def backward(g):
        accumulate_grad(a, -g)

    return make_node(-a.data, (a,), backward)


def _pointwise(a, fwd, bwd_from_out=None, bwd_from_in=None):
    a = asdiff(a)
    data = fwd(a.data)

    def backward(g):
        if bwd_from_out is not None:
            accumulate_grad(a, bwd_from_out(g, data))
        else:
            accumulate_grad(a, bwd_from_in(g, a.data))

    return make_node(data, (a,), backward)


def exp(a):
    return _pointwise(a, np.exp, bwd_from_out=lambda g, y: g * y)


def log(a):
    return _pointwise(a, np.log, bwd_from_in=lambda g, x: g / x)


def sigmoid(a):
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _pointwise(a, fwd, bwd_from_out=lambda g, y: g * y * (1.0 - y))


def tanh(a):
    return _pointwise(a, np.tanh, bwd_from_out=lambda g, y: g * (1.0 - y * y))


def relu(a):
    return _pointwise(a, lambda x: np.maximum(x, 0), bwd_from_in=lambda g, x: g * (x > 0))


def leaky_relu(a, alpha=0.2):
    return _pointwise(a, lambda x: np.where(x > 0, x, alpha * x),
                      bwd_from_in=lambda g, x: g * np.where(x > 0, 1.0, alpha).astype(x.dtype))


def softplus(a):
    return _pointwise(a, lambda x: np.logaddexp(np.zeros((), dtype=x.dtype), x),
                      bwd_from_in=lambda g, x: g / (1.0 + np.exp(-x)))


def absolute(a):
    return _pointwise(a, np.abs, bwd_from_in=lambda g, x: g * np.sign(x))


def square(a):
    a = asdiff(a)
    return mul(a, a)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = asdiff(a), asdiff(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if needs_grad(a):
            accumulate_grad(a, g @ b.data.T)
        if needs_grad(b):
            accumulate_grad(b, a.data.T @ g)

    return make_node(data, (a, b), backward)


# -- reductions ---------------------------------------------------------------

def _kept_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(a, axis=None, keepdims=False):
    a = asdiff(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g.reshape(_kept_shape(a.data.shape, axis)) if not keepdims else g
        accumulate_grad(a, np.broadcast_to(gg, a.data.shape).astype(a.dtype, copy=True))

    return make_node(data, (a,), backward)


def mean_(a, axis=None, keepdims=False):
    a = asdiff(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(data.size, 1)

    def backward(g):
        gg = g.reshape(_kept_shape(a.data.shape, axis)) if not keepdims else g
        accumulate_grad(a, (np.broadcast_to(gg, a.data.shape) / count).astype(a.dtype, copy=False))

    return make_node(data, (a,), backward)


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (fused forward/backward)."""
    a = asdiff(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        accumulate_grad(a, data * (g - dot))

    return make_node(data, (a,), backward)


# -- shape manipulation -------------------------------------------------------

def reshape(a, shape):
    a = asdiff(a)
    data = a.data.reshape(shape)

    def backward(g):
        accumulate_grad(a, g.reshape(a.data.shape))

    return make_node(data, (a,), backward)


def transpose(a, axes):
    a = asdiff(a)
    data = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        accumulate_grad(a, g.transpose(inv))

    return make_node(data, (a,), backward)


def getitem(a, key):
    a = asdiff(a)
    data = np.ascontiguousarray(a.data[key])

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = full[key] + np.reshape(g, np.shape(full[key]))
        accumulate_grad(a, full)

    return make_node(data, (a,), backward)


def concat(arrays, axis):
    arrays = [asdiff(x) for x in arrays]
    try:
        data = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[x.shape for x in arrays]} do not align on axis {axis}") from None
    sizes = [x.data.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, piece in zip(arrays, np.split(g, splits, axis=axis)):
            accumulate_grad(x, piece)

    return make_node(data, tuple(arrays), backward)


# -- 2D convolution (NHWC) ----------------------------------------------------

def _im2col(xp, kh, kw, stride):
    """(B, Hp, Wp, C) -> (B, OH, OW, kh, kw, C) patch tensor."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, H', W', C, kh, kw
    win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im(cols, b, hp, wp, c, stride):
    """Adjoint of :func:`_im2col`: scatter-add patches into a padded canvas."""
    _, oh, ow, kh, kw, _ = cols.shape
    out = np.zeros((b, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    return out


def conv2d(x, w, b=None, stride=1):
    """Same-padded conv; x (B,H,W,Cin), w (KH,KW,Cin,Cout), stride 1 or 2."""
    x, w = asdiff(x), asdiff(w)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    kh, kw, cin, cout = w.shape
    ph, pw = kh // 2, kw // 2
    bsz = x.shape[0]
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw, stride)
    oh, ow = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(bsz * oh * ow, kh * kw * cin)
    wflat = w.data.reshape(kh * kw * cin, cout)
    out = cols2 @ wflat
    parents = [x, w]
    if b is not None:
        b = asdiff(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data
        parents.append(b)
    out = out.reshape(bsz, oh, ow, cout)

    def backward(g):
        g2 = g.reshape(bsz * oh * ow, cout)
        if needs_grad(w):
            accumulate_grad(w, (cols2.T @ g2).reshape(w.data.shape))
        if b is not None and needs_grad(b):
            accumulate_grad(b, g2.sum(axis=0))
        if needs_grad(x):
            if stride == 1 and kh % 2 == 1 and kw % 2 == 1:
                # input cotangent of a same-padded unit-stride conv is a
                # same-conv with the 180-degree-rotated, channel-swapped
                # kernel: one GEMM instead of a scatter
                wr = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
                gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
                gcols = _im2col(gp, kh, kw, 1).reshape(bsz * oh * ow, kh * kw * cout)
                accumulate_grad(x, (gcols @ wr).reshape(x.data.shape))
            else:
                dcols = (g2 @ wflat.T).reshape(bsz, oh, ow, kh, kw, cin)
                dxp = _col2im(dcols, bsz, xp.shape[1], xp.shape[2], cin, stride)
                accumulate_grad(x, dxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2], :])

    return make_node(out, tuple(parents), backward)


def conv2d_out_hw(h, w, k, stride):
    p = k // 2
    return (h + 2 * p - k) // stride + 1, (w + 2 * p - k) // stride + 1


def conv2d_transpose(x, w, b=None, stride=2, out_hw=None):
    """Exact adjoint of :func:`conv2d`; x (B,h,w,Cin), w (KH,KW,Cin,Cout).

    ``out_hw`` must be a size that a same-padded conv of this kernel/stride
    maps back onto ``x``'s spatial shape (default ``stride * (h, w)``).
    """
    x, w = asdiff(x), asdiff(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d_transpose: input {x.shape} incompatible with weight {w.shape}")
    kh, kw, cin, cout = w.shape
    bsz, h, ww_ = x.shape[0], x.shape[1], x.shape[2]
    if out_hw is None:
        out_hw = (stride * h, stride * ww_)
    oh, ow = out_hw
    if conv2d_out_hw(oh, ow, kh, stride) != (h, ww_):
        raise ShapeError(
            f"conv2d_transpose: output size {out_hw} does not map to input {x.shape[1:3]} "
            f"under kernel {kh} stride {stride}")
    ph, pw = kh // 2, kw // 2
    # weight arranged (Cin, kh*kw*Cout) so forward is a single matmul + scatter
    wflat = w.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    x2 = x.data.reshape(bsz * h * ww_, cin)
    cols = (x2 @ wflat).reshape(bsz, h, ww_, kh, kw, cout)
    ypad = _col2im(cols, bsz, oh + 2 * ph, ow + 2 * pw, cout, stride)
    out = ypad[:, ph:ph + oh, pw:pw + ow, :]
    parents = [x, w]
    if b is not None:
        b = asdiff(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d_transpose: bias shape {b.shape} != ({cout},)")
        out = out + b.data
        parents.append(b)

    def backward(g):
        gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        gcols = _im2col(gp, kh, kw, stride)  # (B, h, w, kh, kw, cout)
        gcols2 = gcols.reshape(bsz * h * ww_, kh * kw * cout)
        if needs_grad(x):
            accumulate_grad(x, (gcols2 @ wflat.T).reshape(x.data.shape))
        if needs_grad(w):
            dwflat = x2.T @ gcols2
            accumulate_grad(w, dwflat.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3))
        if b is not None and needs_grad(b):
            accumulate_grad(b, g.sum(axis=(0, 1, 2)))

    return make_node(out, tuple(parents), backward)


# -- resize (separable interpolation matrices) ---------------------------------

@functools.lru_cache(maxsize=256)
def _linear_matrix(n_in, n_out):
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


@functools.lru_cache(maxsize=256)
def _nearest_matrix(n_in, n_out):
    m = np.zeros((n_out, n_in))
    idx = np.clip(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(int), 0, n_in - 1)
    m[np.arange(n_out), idx] = 1.0
    return m


def _apply_rows(mat, x):
    """Contract ``mat`` (O, H) against axis 1 of ``x`` (B, H, W, C)."""
    out = np.tensordot(mat, x, axes=(1, 1))  # (O, B, W, C)
    return np.ascontiguousarray(np.moveaxis(out, 0, 1))


def _apply_cols(mat, x):
    """Contract ``mat`` (O, W) against axis 2 of ``x`` (B, H, W, C)."""
    out = np.tensordot(mat, x, axes=(1, 2))  # (O, B, H, C)
    return np.ascontiguousarray(np.moveaxis(out, 0, 2))


def _resize(x, out_hw, matrix_fn):
    x = asdiff(x)
    if x.ndim != 4:
        raise ShapeError(f"resize: expected (B,H,W,C), got {x.shape}")
    oh, ow = out_hw
    ry = matrix_fn(x.shape[1], oh).astype(x.dtype)
    rx = matrix_fn(x.shape[2], ow).astype(x.dtype)
    data = _apply_cols(rx, _apply_rows(ry, x.data))

    def backward(g):
        accumulate_grad(x, _apply_rows(ry.T, _apply_cols(rx.T, g)))

    return make_node(data, (x,), backward)


def resize_bilinear(x, out_hw):
    """Half-pixel-centred bilinear resize of a (B,H,W,C) array."""
    return _resize(x, out_hw, _linear_matrix)


def resize_nearest(x, out_hw):
    return _resize(x, out_hw, _nearest_matrix)
