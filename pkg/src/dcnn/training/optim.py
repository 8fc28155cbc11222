"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from dcnn.autograd import Tensor

ADAM_EPS = 1e-8


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Iterable[tuple[str, Tensor]],
    opt: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = ADAM_EPS,
) -> None:
    """One update of every named parameter, in place.

    The decay multiplies the weight by (1 - lr*wd) before the adaptive step,
    independently of the gradient.  Parameters without a gradient are treated
    as having a zero gradient, so their moments still decay.
    """
    b1, b2 = betas
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        opt.m[name], opt.v[name] = m.astype(p.data.dtype), v.astype(p.data.dtype)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= step.astype(p.data.dtype)
