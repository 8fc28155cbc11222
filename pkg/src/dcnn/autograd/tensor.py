"""Dense float32 tensor with reverse-mode automatic differentiation.

Every differentiable primitive creates its output through :func:`make_result`,
which records the parent tensors and a backward closure mapping the output
gradient to one gradient per parent.  :meth:`Tensor.backward` walks that graph
in reverse topological order, so each op is visited exactly once and fan-out
gradients accumulate additively.
"""
from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from dcnn.errors import NonFiniteError, UsageError

DTYPE = np.float32

_state = threading.local()


def compute_dtype():
    """dtype every op produces: float32, or float64 inside ``reference_precision``."""
    return getattr(_state, "dtype", DTYPE)


@contextlib.contextmanager
def reference_precision() -> Iterator[None]:
    """Run ops in float64.  Used only to evaluate finite-difference oracles."""
    prev = compute_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev
_check_finite = os.environ.get("DCNN_CHECK_FINITE", "0") not in ("", "0")


def set_check_finite(enabled: bool) -> None:
    """Toggle the NaN/Inf check run after every op (env: ``DCNN_CHECK_FINITE=1``)."""
    global _check_finite
    _check_finite = bool(enabled)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """n-dimensional float32 array that can take part in gradient computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=compute_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph traversal --------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from this scalar."""
        if self.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not on the tape")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=compute_dtype())

    # -- operator sugar (same-shape elementwise only) ---------------------
    def __add__(self, other):
        from dcnn.autograd import functional as F

        if isinstance(other, Tensor):
            return F.add(self, other)
        return F.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from dcnn.autograd import functional as F

        if isinstance(other, Tensor):
            return F.sub(self, other)
        return F.add_scalar(self, -float(other))

    def __rsub__(self, other):
        from dcnn.autograd import functional as F

        return F.add_scalar(F.neg(self), float(other))

    def __mul__(self, other):
        from dcnn.autograd import functional as F

        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from dcnn.autograd import functional as F

        return F.mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        from dcnn.autograd import functional as F

        return F.neg(self)

    def __matmul__(self, other):
        from dcnn.autograd import functional as F

        return F.matmul(self, other)

    def __getitem__(self, key):
        from dcnn.autograd import functional as F

        return F.getitem(self, key)

    def reshape(self, *shape):
        from dcnn.autograd import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from dcnn.autograd import functional as F

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        from dcnn.autograd import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from dcnn.autograd import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op's output and, when needed, attach it to the autograd graph."""
    out = Tensor(data)
    out._op = op
    if _check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=compute_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=compute_dtype()), requires_grad=requires_grad)
