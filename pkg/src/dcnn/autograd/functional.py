"""Differentiable primitives.

Broadcasting is deliberately narrow: elementwise binary ops require equal
shapes, and ``matmul`` broadcasts batch dimensions only.  Anything else goes
through :func:`broadcast_to` so alignment stays explicit at the call site.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from dcnn.autograd.tensor import Tensor, compute_dtype, make_result
from dcnn.errors import ConfigError, DegenerateBatchError, DimensionError

GELU_CONSTANTS = {
    # (slope inside tanh, cubic coefficient)
    "paper": (math.sqrt(math.pi / 2.0), 0.047715),
    "standard": (math.sqrt(2.0 / math.pi), 0.044715),
}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return make_result(a.data + compute_dtype()(c), (a,), lambda g: (g,), "add_scalar")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = compute_dtype()(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor, variant: str = "paper") -> Tensor:
    """0.5x(1 + tanh(a(x + c x^3))) with the constants of ``variant``.

    ``paper`` uses a = sqrt(pi/2), c = 0.047715; ``standard`` is the usual
    tanh approximation with sqrt(2/pi) and 0.044715.
    """
    try:
        a, c = GELU_CONSTANTS[variant]
    except KeyError:
        raise ConfigError(f"unknown gelu variant {variant!r}") from None
    xd = x.data
    inner = compute_dtype()(a) * (xd + compute_dtype()(c) * xd * xd * xd)
    t = np.tanh(inner)
    out = compute_dtype()(0.5) * xd * (compute_dtype()(1.0) + t)

    def backward(g):
        dinner = compute_dtype()(a) * (compute_dtype()(1.0) + compute_dtype()(3.0 * c) * xd * xd)
        d = compute_dtype()(0.5) * (compute_dtype()(1.0) + t) + compute_dtype()(0.5) * xd * (compute_dtype()(1.0) - t * t) * dinner
        return (g * d,)

    return make_result(out, (x,), backward, f"gelu_{variant}")


def gelu_paper(x: Tensor) -> Tensor:
    return gelu(x, "paper")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from None
    return make_result(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))]

    return make_result(out, tensors, backward, "concat")


def getitem(x: Tensor, key) -> Tensor:
    out = np.array(x.data[key], dtype=compute_dtype())
    src_shape = x.shape

    basic = all(isinstance(k, (int, slice)) or k is None or k is Ellipsis for k in (key if isinstance(key, tuple) else (key,)))

    def backward(g):
        full = np.zeros(src_shape, dtype=compute_dtype())
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return make_result(out, (x,), backward, "getitem")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[i, index[i]]`` for a 2-D tensor (used by cross-entropy)."""
    if x.ndim != 2:
        raise DimensionError(f"pick expects a 2-D tensor, got {x.shape}")
    rows = np.arange(x.shape[0])
    index = np.asarray(index, dtype=np.int64)
    out = x.data[rows, index]
    src_shape = x.shape

    def backward(g):
        full = np.zeros(src_shape, dtype=compute_dtype())
        full[rows, index] = g
        return (full,)

    return make_result(out, (x,), backward, "pick")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).astype(compute_dtype()),)

    return make_result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    src = x.shape
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, src) / compute_dtype()(count)).astype(compute_dtype()),)

    return make_result(out, (x,), backward, "mean")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, broadcast_to(bias, out.shape))
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation, NCHW layout, weight [Cout, Cin/groups, Kh, Kw].

    Implemented as a loop over kernel taps; each tap is one batched matmul
    (or a broadcast multiply when every group holds a single input channel,
    the depthwise case).  Summation order is fixed, so results are
    reproducible bit-for-bit.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ConfigError(f"conv2d: invalid stride={stride} padding={padding} groups={groups}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ConfigError(f"conv2d: groups={groups} must divide Cin={cin} and Cout={cout}")
    if cg != cin // groups:
        raise DimensionError(f"conv2d: weight expects {cg * groups} input channels, input has {cin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    og = cout // groups
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xd.shape[2:]
    xg = xd.reshape(n, groups, cg, hp, wp)
    wg = weight.data.reshape(groups, og, cg, kh, kw)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1

    def tap(i, j):
        return xg[:, :, :, i : i + span_h : stride, j : j + span_w : stride].reshape(n, groups, cg, ho * wo)

    out = np.zeros((n, groups, og, ho * wo), dtype=compute_dtype())
    for i in range(kh):
        for j in range(kw):
            xs = tap(i, j)
            if cg == 1:
                out += wg[None, :, :, 0, i, j, None] * xs
            else:
                out += np.matmul(wg[:, :, :, i, j], xs)
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gg = g.reshape(n, groups, og, ho * wo)
        gw = np.zeros((groups, og, cg, kh, kw), dtype=compute_dtype())
        gxp = np.zeros((n, groups, cg, hp, wp), dtype=compute_dtype()) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                xs = tap(i, j)
                if cg == 1:
                    gw[:, :, 0, i, j] = np.einsum("ngop,ngp->go", gg, xs[:, :, 0, :])
                    if gxp is not None:
                        contrib = (wg[None, :, :, 0, i, j, None] * gg).sum(axis=2)
                        gxp[:, :, 0, i : i + span_h : stride, j : j + span_w : stride] += contrib.reshape(
                            n, groups, ho, wo
                        )
                else:
                    gw[:, :, :, i, j] = np.matmul(gg, np.swapaxes(xs, -1, -2)).sum(axis=0)
                    if gxp is not None:
                        contrib = np.matmul(np.swapaxes(wg[:, :, :, i, j], -1, -2), gg)
                        gxp[:, :, :, i : i + span_h : stride, j : j + span_w : stride] += contrib.reshape(
                            n, groups, cg, ho, wo
                        )
        gx = None
        if gxp is not None:
            gx = gxp.reshape(n, cin, hp, wp)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gx)
        grads = [gx, gw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------
def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over N, H, W.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance for the running estimate).
    """
    if eps <= 0:
        raise ConfigError("batch_norm: eps must be positive")
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: affine params must have shape ({c},)")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        count = n * h * w
        if count < 2:
            raise DegenerateBatchError(f"batch_norm in training mode needs N*H*W >= 2, got {count}")
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = (1.0 / np.sqrt(var + compute_dtype()(eps))).astype(compute_dtype())
        xhat = xc * inv[None, :, None, None]
        m = compute_dtype()(momentum)
        running_mean.data[...] = (1 - m) * running_mean.data + m * mu
        running_var.data[...] = (1 - m) * running_var.data + m * var * compute_dtype()(count / (count - 1))
        out = gd * xhat + beta.data[None, :, None, None]

        def backward(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gxhat = g * gd
            gx = (
                inv[None, :, None, None]
                / compute_dtype()(count)
                * (
                    compute_dtype()(count) * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
            return gx, ggamma, gbeta

    else:
        inv = (1.0 / np.sqrt(running_var.data + compute_dtype()(eps))).astype(compute_dtype())
        xhat = (xd - running_mean.data[None, :, None, None]) * inv[None, :, None, None]
        out = gd * xhat + beta.data[None, :, None, None]

        def backward(g):
            return g * gd * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out.astype(compute_dtype()), (x, gamma, beta), backward, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if d < 2:
        raise DegenerateBatchError(f"layer_norm over a dimension of size {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + compute_dtype()(eps))).astype(compute_dtype())
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gxhat = g * gamma.data
        gx = inv / compute_dtype()(d) * (
            compute_dtype()(d) * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------
def _pool_dims(x: Tensor, kernel: int, stride: int, op: str) -> tuple[int, int]:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects [N,C,H,W], got {x.shape}")
    if kernel < 1 or stride < 1:
        raise ConfigError(f"{op}: kernel and stride must be positive")
    h, w = x.shape[2:]
    if kernel > h or kernel > w:
        raise DimensionError(f"{op}: kernel {kernel} larger than input {h}x{w}")
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def _windows(xd: np.ndarray, kernel: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N,C,Ho,Wo,k*k] view of pooling windows, taps in row-major order."""
    n, c = xd.shape[:2]
    if kernel == stride:
        v = xd[:, :, : ho * kernel, : wo * kernel].reshape(n, c, ho, kernel, wo, kernel)
        return v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)
    taps = [
        xd[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
        for i in range(kernel)
        for j in range(kernel)
    ]
    return np.stack(taps, axis=-1)


def _scatter_windows(gw: np.ndarray, shape, kernel: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    gx = np.zeros(shape, dtype=compute_dtype())
    if kernel == stride:
        blk = gw.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        gx[:, :, : ho * kernel, : wo * kernel] = blk.reshape(n, c, ho * kernel, wo * kernel)
        return gx
    t = 0
    for i in range(kernel):
        for j in range(kernel):
            gx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gw[..., t]
            t += 1
    return gx


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = kernel if stride is None else stride
    ho, wo = _pool_dims(x, kernel, stride, "avg_pool2d")
    win = _windows(x.data, kernel, stride, ho, wo)
    out = win.mean(axis=-1)
    k2 = kernel * kernel
    shape = x.shape

    def backward(g):
        gw = np.broadcast_to((g / compute_dtype()(k2))[..., None], g.shape + (k2,))
        return (_scatter_windows(gw, shape, kernel, stride, ho, wo),)

    return make_result(out, (x,), backward, "avg_pool2d")


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    """Windowed max; ties route the gradient to the first row-major index."""
    stride = kernel if stride is None else stride
    ho, wo = _pool_dims(x, kernel, stride, "max_pool2d")
    win = _windows(x.data, kernel, stride, ho, wo)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    k2 = kernel * kernel
    shape = x.shape

    def backward(g):
        gw = np.zeros(g.shape + (k2,), dtype=compute_dtype())
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (_scatter_windows(gw, shape, kernel, stride, ho, wo),)

    return make_result(out, (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C]; equivalent to avg_pool2d with kernel = H = W."""
    return mean(x, axis=(2, 3))


def interpolate_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigError(f"interpolate_nearest: factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"interpolate_nearest expects [N,C,H,W], got {x.shape}")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "interpolate_nearest")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "interpolate_nearest")


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """[dst, src] interpolation weights, half-pixel centres (align_corners=False)."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        pos = min(max(pos, 0.0), src - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(compute_dtype())


def interpolate_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ConfigError(f"interpolate_bilinear: factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise DimensionError(f"interpolate_bilinear expects [N,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    ah = bilinear_matrix(h, h * factor)
    aw = bilinear_matrix(w, w * factor)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_result(out, (x,), backward, "interpolate_bilinear")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logp = log_softmax(logits, axis=-1)
    return neg(mean(pick(logp, labels)))
