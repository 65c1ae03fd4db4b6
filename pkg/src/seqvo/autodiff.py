"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Variable` wraps an ``ndarray`` value and, when produced by an
operation on inputs that require gradients, remembers its parents and a
backward rule.  Node ids come from a global counter, so sorting the nodes
reachable from a root by id gives a valid topological order; that ordered
list is the :class:`Tape` replayed by :meth:`Variable.backward`.
"""
from __future__ import annotations

import builtins
import itertools
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ._backend import kernels

EPS = 1e-12

_ids = itertools.count()
_dtype = np.float32
_grad_enabled = True

#: Counts of guarded events (e.g. ``log`` clamps) since the last reset.
diagnostics: Counter = Counter()


def default_dtype():
    return _dtype


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new leaf variables."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


@contextmanager
def no_grad():
    """Disable graph recording; op outputs never require gradients."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class ShapeError(ValueError):
    pass


class Variable:
    """A differentiable array node."""

    __slots__ = ("value", "grad", "requires_grad", "tape_id", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(value)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_dtype)
        self.value = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.tape_id = next(_ids)
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, value, parents: Sequence["Variable"], backward: Callable):
        out = cls(value)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def gradient(self):
        """Gradient array, zeros if no backward pass has reached this node."""
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value)

    def detach(self):
        return Variable(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- backward -------------------------------------------------------------
    def backward(self, grad=None):
        """Propagate gradients from this node to every reachable input.

        Gradients are overwritten, not accumulated, on every node of the tape.
        """
        tape = Tape.from_root(self)
        if grad is None:
            grad = np.ones_like(self.value)
        pending = {self.tape_id: np.asarray(grad, dtype=self.dtype)}
        for node in reversed(tape.nodes):
            g = pending.pop(node.tape_id, None)
            if g is None:
                g = np.zeros_like(node.value)
            node.grad = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tape_id in pending:
                    pending[parent.tape_id] = pending[parent.tape_id] + pg
                else:
                    pending[parent.tape_id] = pg
        return tape

    # -- operator sugar -------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)


class Tape:
    """Ordered record of the nodes reachable from a root."""

    def __init__(self, nodes: list[Variable]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Variable) -> "Tape":
        seen = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.tape_id in seen or not node.requires_grad:
                continue
            seen[node.tape_id] = node
            stack.extend(node._parents)
        return cls([seen[k] for k in sorted(seen)])

    def __len__(self):
        return len(self.nodes)


def as_variable(x, like: Variable | None = None) -> Variable:
    if isinstance(x, Variable):
        return x
    dtype = like.dtype if like is not None else None
    return Variable(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} differ beyond singleton broadcasting") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return Variable._from_op(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return Variable._from_op(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return Variable._from_op(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        ),
    )


def _guard(d):
    """Push denominators away from zero, keeping their sign."""
    small = np.abs(d) < EPS
    if small.any():
        d = np.where(small, np.where(d < 0, -EPS, EPS), d).astype(d.dtype)
    return d


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    den = _guard(b.value)
    out = a.value / den

    def backward(g):
        ga = _unbroadcast(g / den, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / den, b.shape) if b.requires_grad else None
        return ga, gb

    return Variable._from_op(out, (a, b), backward)


def _pair(a, b):
    if isinstance(a, Variable):
        return a, as_variable(b, a)
    b = as_variable(b)
    return as_variable(a, b), b


def relu(x):
    mask = x.value > 0
    return Variable._from_op(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return Variable._from_op(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x):
    out = np.tanh(x.value)
    return Variable._from_op(out, (x,), lambda g: (g * (1 - out * out),))


def exp(x):
    out = np.exp(x.value)
    return Variable._from_op(out, (x,), lambda g: (g * out,))


def log(x):
    v = x.value
    bad = v < EPS
    if bad.any():
        diagnostics["log_clamped"] += int(bad.sum())
        v = np.maximum(v, EPS).astype(x.dtype)
    return Variable._from_op(np.log(v), (x,), lambda g: (np.where(bad, 0, g / v).astype(x.dtype),))


def abs(x):  # noqa: A001 - mirrors the op name
    s = np.sign(x.value)
    return Variable._from_op(np.abs(x.value), (x,), lambda g: (g * s,))


def pow_const(x, p: float):
    v = x.value
    out = v**p
    return Variable._from_op(out, (x,), lambda g: (g * p * v ** (p - 1),))


def clip(x, lo: float, hi: float):
    inside = (x.value >= lo) & (x.value <= hi)
    return Variable._from_op(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "abs": abs}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None):
    """Dispatch an elementwise op by name; ``pow_const`` takes the exponent as ``b``."""
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        return _BINARY[op_kind](a, b)
    if op_kind == "pow_const":
        return pow_const(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batch semantics on leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Variable._from_op(out, (a, b), backward)


# -- shape ops -----------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return Variable._from_op(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return Variable._from_op(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(x, idx):
    out = x.value[idx]
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(x.value)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Variable._from_op(np.array(out, copy=True), (x,), backward)


def concat(xs: Sequence[Variable], axis: int = 0):
    xs = [as_variable(v) for v in xs]
    nd = xs[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"axis {axis} out of range for {nd}-d inputs")
    sizes = [v.shape[axis] for v in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([v.value for v in xs], axis=axis)
    return Variable._from_op(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence[Variable], axis: int = 0):
    return concat([expand(as_variable(v), axis) for v in xs], axis)


def expand(x, axis: int):
    """Insert a singleton axis at non-negative position ``axis``."""
    return reshape(x, x.shape[:axis] + (1,) + x.shape[axis:])


def broadcast_to(x, shape):
    old = x.shape
    return Variable._from_op(
        np.broadcast_to(x.value, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),)
    )


def _norm_axes(axis, nd):
    if axis is None:
        return tuple(range(nd))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -nd <= a < nd:
            raise ShapeError(f"axis {a} out of range for {nd}-d input")
        out.append(a % nd)
    return tuple(sorted(out))


def reduce(op_kind: str, x, axes=None, keepdims: bool = False):
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if op_kind == "sum":
        out = x.value.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif op_kind == "mean":
        out = x.value.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {op_kind!r}")
    kshape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def backward(g):
        g = np.reshape(g, kshape)
        return (np.broadcast_to(g * scale, x.shape).astype(x.dtype),)

    return Variable._from_op(np.asarray(out, dtype=x.dtype), (x,), backward)


def global_avg_pool(x):
    """``B x C x H x W -> B x C``."""
    return reduce("mean", x, (2, 3))


# -- convolution ---------------------------------------------------------------

def _pad(v, pad):
    if pad == 0:
        return v
    return np.pad(v, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0):
    """Cross-correlation of ``B x C x H x W`` input with ``F x C x k x k`` filters."""
    B, C, H, W = x.shape
    F, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise ShapeError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d output size {Ho}x{Wo} is not positive")
    xp = _pad(x.value, pad)
    cols = kernels.im2col(xp, k, stride)
    wm = w.value.reshape(F, -1)
    out = (wm @ cols).reshape(B, F, Ho, Wo)
    if bias is not None:
        out = out + bias.value.reshape(1, F, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g2 = g.reshape(B, F, Ho * Wo)
        gx = gw = None
        if x.requires_grad:
            dcols = wm.T @ g2
            gxp = kernels.col2im(dcols, xp.shape, k, stride)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        if w.requires_grad:
            gw = np.einsum("bfn,bkn->fk", g2, cols).reshape(w.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Variable._from_op(out, parents, backward)


def conv_transpose2d(x, w, bias=None, stride: int = 1, pad: int = 0):
    """Transposed convolution; ``w`` is ``C_in x C_out x k x k``.

    Output spatial size is ``(H - 1) * stride - 2 * pad + k``.  With the same
    weight this is the adjoint of :func:`conv2d`.
    """
    B, Cin, H, W = x.shape
    Cw, Cout, k, k2 = w.shape
    if Cw != Cin or k != k2:
        raise ShapeError(f"conv_transpose2d weight {w.shape} incompatible with input {x.shape}")
    Hp = (H - 1) * stride + k
    Wp = (W - 1) * stride + k
    Ho, Wo = Hp - 2 * pad, Wp - 2 * pad
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv_transpose2d output size {Ho}x{Wo} is not positive")
    wm = w.value.reshape(Cin, -1)
    xm = x.value.reshape(B, Cin, H * W)
    cols = wm.T @ xm
    full = kernels.col2im(cols, (B, Cout, Hp, Wp), k, stride)
    out = full[:, :, pad:pad + Ho, pad:pad + Wo] if pad else full
    if bias is not None:
        out = out + bias.value.reshape(1, Cout, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gp = _pad(g, pad)
        gcols = kernels.im2col(np.ascontiguousarray(gp), k, stride)
        gx = (wm @ gcols).reshape(B, Cin, H, W) if x.requires_grad else None
        gw = np.einsum("bcn,bkn->ck", xm, gcols).reshape(w.shape) if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Variable._from_op(out, parents, backward)


def avg_pool2d(x, k: int):
    """Mean over every ``k x k`` window, stride 1, no padding."""
    B, C, H, W = x.shape
    Ho, Wo = H - k + 1, W - k + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"avg_pool2d window {k} larger than input {H}x{W}")

    def box(v):
        c = np.cumsum(np.cumsum(v, axis=2), axis=3)
        c = np.pad(c, ((0, 0), (0, 0), (1, 0), (1, 0)))
        s = c[:, :, k:, k:] - c[:, :, :-k, k:] - c[:, :, k:, :-k] + c[:, :, :-k, :-k]
        return s

    out = (box(x.value) / (k * k)).astype(x.dtype)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        return ((box(gp) / (k * k)).astype(x.dtype),)

    return Variable._from_op(out, (x,), backward)


# -- sampling ------------------------------------------------------------------

def bilinear_sample(src, coords):
    """Sample ``src`` (B x C x H x W) at ``coords`` (B x 2 x h x w, order u, v).

    4-neighbour bilinear interpolation with zero fill outside the image.  The
    cell is chosen half-open, ``[i, i + 1)``.
    """
    src = as_variable(src)
    coords = as_variable(coords, src)
    B, C, H, W = src.shape
    _, two, h, w = coords.shape
    if two != 2:
        raise ShapeError(f"coords must be B x 2 x h x w, got {coords.shape}")
    xs = np.ascontiguousarray(coords.value[:, 0].reshape(B, -1), dtype=src.dtype)
    ys = np.ascontiguousarray(coords.value[:, 1].reshape(B, -1), dtype=src.dtype)
    out = kernels.bilinear_forward(src.value, xs, ys).reshape(B, C, h, w)

    def backward(g):
        gsrc, gx, gy = kernels.bilinear_backward(
            src.value, xs, ys, g.reshape(B, C, h * w), src.requires_grad
        )
        gc = np.stack([gx.reshape(B, h, w), gy.reshape(B, h, w)], axis=1) if coords.requires_grad else None
        return gsrc, gc

    return Variable._from_op(out, (src, coords), backward)


def resize_bilinear(x, out_h: int, out_w: int):
    """Bilinear resize with half-pixel centres and edge clamping."""
    B, C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return x
    v = np.clip((np.arange(out_h) + 0.5) * H / out_h - 0.5, 0, H - 1)
    u = np.clip((np.arange(out_w) + 0.5) * W / out_w - 0.5, 0, W - 1)
    vv, uu = np.meshgrid(v, u, indexing="ij")
    grid = np.broadcast_to(np.stack([uu, vv])[None], (B, 2, out_h, out_w)).astype(x.dtype)
    return bilinear_sample(x, Variable(grid))


# -- verification --------------------------------------------------------------

def grad_check(
    f: Callable[..., Variable],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of scalar ``f(*inputs)`` against central differences.

    ``inputs`` are float64 arrays; ``f`` receives them as :class:`Variable`
    leaves with ``requires_grad=True``.  If ``max_coords`` is given, at most
    that many randomly chosen coordinates per input are checked.  Returns the
    maximum over checked coordinates of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    leaves = [Variable(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    if out.value.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [leaf.gradient for leaf in leaves]
    rng = np.random.default_rng(seed)
    worst = 0.0

    def value_at(i, flat_idx, delta):
        arr = arrays[i].copy()
        arr.flat[flat_idx] += delta
        args = [Variable(a) if j != i else Variable(arr) for j, a in enumerate(arrays)]
        return float(f(*args).value)

    for i, arr in enumerate(arrays):
        n = arr.size
        idxs = range(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for flat_idx in idxs:
            numeric = (value_at(i, flat_idx, eps) - value_at(i, flat_idx, -eps)) / (2 * eps)
            a = float(analytic[i].flat[flat_idx])
            rel = builtins.abs(a - numeric) / max(1e-8, builtins.abs(a) + builtins.abs(numeric))
            worst = max(worst, rel)
    return worst


def parameters_of(vs: Iterable[Variable]):
    return [v for v in vs if v.requires_grad]
