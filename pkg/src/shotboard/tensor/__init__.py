"""Minimal dense tensors with reverse-mode differentiation."""

from . import ops
from .core import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    custom_op,
    default_dtype,
    no_grad,
    precision,
    reset,
    set_default_dtype,
)
from .gradcheck import grad_check
from .ops import (
    MASK_SENTINEL,
    add,
    clip,
    concat,
    div,
    exp,
    layer_norm,
    log,
    masked_fill,
    matmul,
    mean,
    mul,
    neg,
    reshape,
    scale,
    silu,
    slice,
    softmax,
    sqrt,
    square,
    sub,
    swapaxes,
    take,
    transpose,
)
from .rng import make_rng, normal
from .serialize import load_tensor, save_tensor
from ..errors import ShapeError


def create(shape, init="zeros", value: float = 0.0, seed: int | None = None,
           dtype=None, requires_grad: bool = False) -> Tensor:
    """Build a tensor filled by ``init``: ``"zeros"``, ``"full"`` or ``"randn"``."""
    import numpy as np

    shape = tuple(shape)
    if not shape or any(int(d) < 1 for d in shape):
        raise ShapeError(f"invalid shape {shape}: need at least one dimension, all >= 1")
    dtype = np.dtype(dtype) if dtype is not None else default_dtype()
    if init == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif init == "full":
        data = np.full(shape, value, dtype=dtype)
    elif init == "randn":
        if seed is None:
            raise ValueError("randn init needs a seed")
        data = normal(make_rng(seed), shape, dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, **kw) -> Tensor:
    return create(shape, "zeros", **kw)


def full(shape, value: float, **kw) -> Tensor:
    return create(shape, "full", value=value, **kw)


def randn(shape, seed: int, **kw) -> Tensor:
    return create(shape, "randn", seed=seed, **kw)


sum = ops.sum  # noqa: A001

__all__ = [
    "Tape", "Tensor", "as_tensor", "backward", "current_tape", "custom_op", "default_dtype",
    "no_grad", "precision", "reset", "set_default_dtype", "grad_check", "create", "zeros",
    "full", "randn", "make_rng", "normal", "load_tensor", "save_tensor", "MASK_SENTINEL",
    "add", "clip", "concat", "div", "exp", "layer_norm", "log", "masked_fill", "matmul",
    "mean", "mul", "neg", "reshape", "scale", "silu", "slice", "softmax", "sqrt", "square",
    "sub", "sum", "swapaxes", "take", "transpose",
]
