"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .core import Tape, Tensor, backward, no_grad


FLOOR = 1e-6


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               return_details: bool = False):
    """Max relative error between tape gradients and central differences.

    ``f(*inputs)`` must return a scalar tensor.  The error for one
    coordinate is ``|a - c| / max(|a|, |c|, FLOOR)``; the maximum over all
    coordinates of all inputs is returned.  Inputs must be float64.

    The floor keeps near-zero gradients from being judged on the
    differencing roundoff (about ``1e-16 * |f| / eps``) alone: below it the
    check becomes an absolute one at ``tol * FLOOR``.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 inputs, got {x.dtype}")
    saved = [x.requires_grad for x in inputs]
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape():
        loss = f(*inputs)
        backward(loss)
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]

    worst = 0.0
    where = None
    with no_grad():
        for k, x in enumerate(inputs):
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
                flat[i] = orig
                cd = (fp - fm) / (2.0 * eps)
                a = float(analytic[k].reshape(-1)[i])
                err = abs(a - cd) / max(abs(a), abs(cd), FLOOR)
                if err > worst:
                    worst, where = err, (k, i, a, cd)
    for x, flag in zip(inputs, saved):
        x.requires_grad = flag
        x.grad = None
    if return_details:
        return worst, where
    return worst
