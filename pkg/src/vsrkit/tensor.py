"""Dense float tensors with a reverse-mode gradient tape.

Storage is float32 unless a caller explicitly builds float64 tensors (used for
finite-difference gradient checking). Every operator computes in float64 and
rounds its result back to the storage dtype, so reductions accumulate in
double precision.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operator produces NaN or Inf."""


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A row-major float array plus the tape bookkeeping needed for backprop.

    ``grad`` is a float64 array once :meth:`backward` has reached this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def f64(self) -> np.ndarray:
        return np.asarray(self.data, dtype=np.float64)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        for leaf, g in _propagate(self).values():
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    # operator sugar; the implementations live in vsrkit.ops
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -float(other))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.scale(self, 1.0 / float(other))


def result_dtype(parents: Iterable[Tensor]):
    dts = [p.data.dtype for p in parents]
    return np.result_type(*dts) if dts else np.float32


def make_result(
    out: np.ndarray,
    parents: Sequence[Tensor],
    backward: BackwardFn | None,
    op: str,
    check_finite: bool = True,
) -> Tensor:
    """Wrap an operator output and, when recording, link it into the tape."""
    with np.errstate(over="ignore"):
        data = np.asarray(out, dtype=result_dtype(parents))
    # checked after rounding: a finite float64 value can overflow float32 storage
    if check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.op = op
    if is_grad_enabled() and backward is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    if not loss.requires_grad:
        return leaves
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``params``; unreached params get zeros.

    Unlike :meth:`Tensor.backward` this leaves ``.grad`` untouched.
    """
    leaves = _propagate(loss)
    out = []
    for p in params:
        hit = leaves.get(id(p))
        out.append(hit[1] if hit is not None else np.zeros(p.shape, dtype=np.float64))
    return out
