"""Central finite differences, used as the independent oracle for backward()."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator

import numpy as np

from dcnn.autograd.tensor import Tensor, no_grad, reference_precision


@contextlib.contextmanager
def _upcast(tensors: list[Tensor]) -> Iterator[None]:
    """float64 copies of ``tensors`` and float64 ops for the duration."""
    saved = [t.data for t in tensors]
    try:
        with reference_precision():
            for t in tensors:
                t.data = t.data.astype(np.float64)
            yield
    finally:
        for t, d in zip(tensors, saved):
            t.data = d


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, reference: bool = False) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every element of ``x``.

    ``f`` must return a scalar tensor.  ``x.data`` is perturbed in place and
    restored afterwards.  With ``reference=True`` the function is evaluated
    on the float64 path (``x`` upcast, every op in float64); otherwise the
    float32 function values are differenced in float64.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if reference:
        with _upcast([x]):
            return finite_diff_grad(f, x, h)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - h
            down = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(
    f: Callable[[], Tensor], inputs: list[Tensor], h: float = 1e-3, reference: bool = False
) -> dict[str, float]:
    """Compare backward() against finite differences for each tensor in ``inputs``.

    backward() always runs in float32.  ``reference=True`` evaluates the
    finite-difference oracle on the float64 path with every input upcast,
    which removes float32 rounding from the oracle for gradients that are
    small relative to the loss.  Returns the relative error per input
    (keyed by ``name`` or position).
    """
    for t in inputs:
        t.grad = None
    f().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]
    with _upcast(inputs) if reference else contextlib.nullcontext():
        numeric = [finite_diff_grad(lambda _x: f(), t, h) for t in inputs]
    return {t.name or str(i): relative_error(a, n) for i, (t, a, n) in enumerate(zip(inputs, analytic, numeric))}
