"""Dense tensors with a reverse-mode tape.

Every differentiable operation that touches a tensor with ``requires_grad``
appends a :class:`Node` to the active :class:`Tape`.  Nodes are appended in
execution order, so the tape is topologically sorted by construction and
``backward`` is a single reverse sweep.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError, TapeError

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. float64 for gradient checks)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Node:
    __slots__ = ("op", "parents", "backward", "index", "tape", "generation")

    def __init__(self, op, parents, backward, index, tape):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.index = index
        self.tape = tape
        self.generation = tape.generation


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape; otherwise a
    per-thread default tape is used.  A recorded graph can be swept once;
    sweeping it again raises until ``reset`` (or new recording) starts a
    fresh generation.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self.generation = 0
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes = []
        self.consumed = False
        self.generation += 1

    def record(self, op, parents, backward) -> Node:
        if self.consumed:
            # a swept graph is dead; new work starts a fresh generation
            self.reset()
        node = Node(op, parents, backward, len(self.nodes), self)
        self.nodes.append(node)
        return node


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = Tape()
        _state.tape = tape
    return tape


def reset() -> None:
    """Clear the active tape so a new graph can be recorded and swept."""
    current_tape().reset()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    # numpy must defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            dtype = default_dtype()
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype or default_dtype())
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operators are bound in ops.py to avoid a circular import
    def __len__(self):
        return self.shape[0]


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def make_result(op: str, data: np.ndarray, parents: Sequence[Tensor],
                backward: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it when needed.

    ``backward`` maps the output gradient to one gradient (or None) per
    parent, in order.  This is also the hook for user-defined operations.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = current_tape().record(op, tuple(parents), backward)
    return out


custom_op = make_result


def backward(loss: Tensor) -> dict:
    """Sweep the tape from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every reachable leaf that
    requires grad.  Returns ``{leaf: grad}`` for the leaves touched.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return {loss: g}
        raise TapeError("loss does not depend on any tensor that requires grad")
    tape = loss._node.tape
    if tape.consumed or loss._node.generation != tape.generation:
        raise TapeError("tape already swept; call reset() before a second backward")

    grads: dict[int, np.ndarray] = {loss._node.index: np.ones_like(loss.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    nodes = tape.nodes
    for i in range(loss._node.index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pn = parent._node
            if pn is not None and pn.tape is tape and pn.generation == tape.generation:
                prev = grads.get(pn.index)
                grads[pn.index] = pg if prev is None else prev + pg
            elif pn is None:
                key = id(parent)
                if key in leaves:
                    leaves[key] = (parent, leaves[key][1] + pg)
                else:
                    leaves[key] = (parent, pg)
    tape.consumed = True
    tape.nodes = []

    result = {}
    for leaf, g in leaves.values():
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result
