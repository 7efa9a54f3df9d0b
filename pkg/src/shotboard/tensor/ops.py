"""Differentiable operations over :class:`Tensor`.

Broadcasting follows numpy's size-1 rule only; any other mismatch raises
:class:`ShapeError` naming both shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DomainError, RangeError, ShapeError
from .core import Tensor, make_result

MASK_SENTINEL = -1e9


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    n = max(len(a), len(b))
    pa = (1,) * (n - len(a)) + tuple(a)
    pb = (1,) * (n - len(b)) + tuple(b)
    out = []
    for da, db in zip(pa, pb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible")
    return tuple(out)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b),
                       lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result("div", out, (a, b),
                       lambda g: (unbroadcast(g / bd, ad.shape),
                                  unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    """Natural log; inputs must be strictly positive (clip first)."""
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value; clip the input first")
    ad = a.data
    return make_result("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return make_result("clip", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig
    return make_result("silu", out, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_result("square", x * x, (a,), lambda g: (2.0 * g * x,))


# -- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(shape))
    return make_result("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,),
                       lambda g: (np.broadcast_to(np.reshape(g, kept), shape),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(shape))
    inv = a.dtype.type(1.0 / count)
    return make_result("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,),
                       lambda g: (np.broadcast_to(np.reshape(g, kept) * inv, shape),))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return make_result("matmul", ad @ bd, (a, b), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (a,), back)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    n = xd.shape[-1]
    gd = gain.data if gain is not None else None
    out = xhat * gd if gd is not None else xhat
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def back(g):
        gx = g * gd if gd is not None else g
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        grads = [dx]
        if gain is not None:
            grads.append(unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(unbroadcast(g, bias.shape))
        return grads

    return make_result("layer_norm", out, parents, back)


# -- structural ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return make_result("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {a.shape}")
    inv = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return make_result("transpose", np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat shapes disagree off-axis: {ref} vs {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_result("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice(a: Tensor, ranges) -> Tensor:  # noqa: A001
    """Basic slicing by ``(start, stop)`` pairs per leading axis, or raw slices."""
    if not isinstance(ranges, tuple):
        ranges = (ranges,)
    key = []
    for ax, r in enumerate(ranges):
        if ax >= a.ndim:
            raise RangeError(f"too many slice ranges for shape {a.shape}")
        n = a.shape[ax]
        if isinstance(r, tuple):
            start, stop = r
            if not (0 <= start < stop <= n):
                raise RangeError(f"slice [{start}, {stop}) out of bounds for axis {ax} of size {n}")
            key.append(np.s_[start:stop])
        elif isinstance(r, int):
            if not -n <= r < n:
                raise RangeError(f"index {r} out of bounds for axis {ax} of size {n}")
            key.append(r)
        else:
            key.append(r)
    key = tuple(key)
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return make_result("slice", a.data[key], (a,), back)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise RangeError(f"take index out of range for axis {axis} of size {n}")
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (np.s_[:],) * (axis % len(shape)) + (idx,), g)
        return (full,)

    return make_result("take", np.take(a.data, idx, axis=axis), (a,), back)


def masked_fill(a: Tensor, mask, value: float = MASK_SENTINEL) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (no gradient there)."""
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ShapeError(f"mask must be boolean, got {mask.dtype}")
    if broadcast_shape(a.shape, mask.shape) != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not fit target {a.shape}")
    keep = ~mask
    out = np.where(mask, a.dtype.type(value), a.data)
    return make_result("masked_fill", out, (a,), lambda g: (g * keep,))


def where_const(mask, a: Tensor, const: float) -> Tensor:
    return masked_fill(a, ~np.asarray(mask, dtype=bool), const)


# -- operator sugar --------------------------------------------------------------

def _getitem(self: Tensor, key):
    shape, dtype = self.shape, self.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return make_result("getitem", self.data[key], (self,), back)


Tensor.__add__ = lambda s, o: add(s, o)
Tensor.__radd__ = lambda s, o: add(_lift(o, s), s)
Tensor.__sub__ = lambda s, o: sub(s, o)
Tensor.__rsub__ = lambda s, o: sub(_lift(o, s), s)
Tensor.__mul__ = lambda s, o: scale(s, o) if isinstance(o, (int, float)) else mul(s, o)
Tensor.__rmul__ = lambda s, o: scale(s, o) if isinstance(o, (int, float)) else mul(_lift(o, s), s)
Tensor.__truediv__ = lambda s, o: scale(s, 1.0 / o) if isinstance(o, (int, float)) else div(s, o)
Tensor.__neg__ = neg
Tensor.__matmul__ = lambda s, o: matmul(s, o)
Tensor.__getitem__ = _getitem
Tensor.reshape = lambda s, *shape: reshape(s, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
Tensor.transpose = lambda s, *axes: transpose(s, axes or None)
Tensor.sum = lambda s, axis=None, keepdims=False: sum(s, axis, keepdims)
Tensor.mean = lambda s, axis=None, keepdims=False: mean(s, axis, keepdims)
