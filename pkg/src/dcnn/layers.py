"""Composable layers built only from the autograd primitives."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from dcnn.autograd import functional as F
from dcnn.autograd.rng import RngState
from dcnn.autograd.tensor import DTYPE, Tensor
from dcnn.errors import ConfigError, DimensionError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-6


class Module:
    """Minimal parameter container.

    Attributes holding a requires_grad :class:`Tensor` are parameters,
    other tensors are buffers (BatchNorm running statistics), and
    sub-modules or lists of sub-modules are walked recursively.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and not value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Conv2d(Module):
    """Conv layer; fan-in scaled uniform init, zero bias."""

    def __init__(self, cin, cout, kernel, rng: RngState, name: str, stride=1, padding=0, groups=1, bias=True):
        if cin % groups or cout % groups:
            raise ConfigError(f"{name}: groups={groups} must divide {cin} and {cout}")
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = (cin // groups) * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        g = rng.keyed(name + ".weight")
        w = g.uniform(-bound, bound, size=(cout, cin // groups, kernel, kernel)).astype(DTYPE)
        self.weight = _param(w, name + ".weight")
        self.bias = _param(np.zeros(cout, DTYPE), name + ".bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Linear(Module):
    """``x @ W + b`` with W stored as [in, out]."""

    def __init__(self, din, dout, rng: RngState, name: str, bias=True):
        bound = 1.0 / math.sqrt(din)
        w = rng.keyed(name + ".weight").uniform(-bound, bound, size=(din, dout)).astype(DTYPE)
        self.weight = _param(w, name + ".weight")
        self.bias = _param(np.zeros(dout, DTYPE), name + ".bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, name: str, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.momentum, self.eps = momentum, eps
        self.weight = _param(np.ones(channels, DTYPE), name + ".weight")
        self.bias = _param(np.zeros(channels, DTYPE), name + ".bias")
        self.running_mean = Tensor(np.zeros(channels, DTYPE))
        self.running_var = Tensor(np.ones(channels, DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class LayerNorm(Module):
    def __init__(self, dim, name: str, eps=LN_EPS):
        self.eps = eps
        self.weight = _param(np.ones(dim, DTYPE), name + ".weight")
        self.bias = _param(np.zeros(dim, DTYPE), name + ".bias")

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class PatchEmbed(Module):
    """Stem: BN(gelu(conv_{k, stride k}(x))).

    With ``stride == kernel`` the convolution tiles the image into
    non-overlapping patches.
    """

    def __init__(self, cin, cout, patch, rng: RngState, name: str, gelu_variant="paper", stride=None):
        self.patch = patch
        self.stride = patch if stride is None else stride
        self.gelu_variant = gelu_variant
        self.conv = Conv2d(cin, cout, patch, rng, name + ".conv", stride=self.stride)
        self.bn = BatchNorm2d(cout, name + ".bn")

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if (h - self.patch) % self.stride or (w - self.patch) % self.stride:
            raise ConfigError(f"input {h}x{w} not tiled by patch {self.patch} at stride {self.stride}")
        return self.bn(F.gelu(self.conv(x), self.gelu_variant))


class Bottleneck(Module):
    """1x1 down -> KxK depthwise -> 1x1 pointwise -> 1x1 up, each followed by gelu and BN.

    The depthwise stage carries its own skip (``d = BN(gelu(dw(a))) + a``);
    the whole bottleneck adds its input to the output when ``residual`` is
    set.  ``conv_mode="conventional"`` swaps the depthwise + pointwise pair
    for one dense KxK convolution (the ablation variant).

    ``forward_mid`` / ``forward_out`` split the block at the mid-width
    feature so a bridge can read and modify it between the two halves.
    """

    def __init__(
        self,
        cin: int,
        cmid: int,
        cout: int,
        rng: RngState,
        name: str,
        kernel: int = 9,
        residual: Optional[bool] = None,
        conv_mode: str = "separable",
        gelu_variant: str = "paper",
    ):
        if kernel % 2 != 1:
            raise ConfigError(f"{name}: depthwise kernel must be odd, got {kernel}")
        if residual is None:
            residual = cin == cout
        if residual and cin != cout:
            raise ConfigError(f"{name}: residual connection requires cin == cout ({cin} != {cout})")
        if conv_mode not in ("separable", "conventional"):
            raise ConfigError(f"{name}: unknown conv_mode {conv_mode!r}")
        self.cin, self.cmid, self.cout = cin, cmid, cout
        self.residual = residual
        self.conv_mode = conv_mode
        self.gelu_variant = gelu_variant
        pad = (kernel - 1) // 2
        self.conv_down = Conv2d(cin, cmid, 1, rng, name + ".conv_down")
        self.bn_down = BatchNorm2d(cmid, name + ".bn_down")
        if conv_mode == "separable":
            self.conv_dw = Conv2d(cmid, cmid, kernel, rng, name + ".conv_dw", padding=pad, groups=cmid)
            self.bn_dw = BatchNorm2d(cmid, name + ".bn_dw")
            self.conv_pw = Conv2d(cmid, cmid, 1, rng, name + ".conv_pw")
            self.bn_pw = BatchNorm2d(cmid, name + ".bn_pw")
        else:
            self.conv_full = Conv2d(cmid, cmid, kernel, rng, name + ".conv_full", padding=pad)
            self.bn_full = BatchNorm2d(cmid, name + ".bn_full")
        self.conv_up = Conv2d(cmid, cout, 1, rng, name + ".conv_up")
        self.bn_up = BatchNorm2d(cout, name + ".bn_up")

    def _cbg(self, conv, bn, x):
        return bn(F.gelu(conv(x), self.gelu_variant))

    def forward_mid(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise DimensionError(f"bottleneck expects {self.cin} channels, got {x.shape[1]}")
        a = self._cbg(self.conv_down, self.bn_down, x)
        if self.conv_mode == "separable":
            d = F.add(self._cbg(self.conv_dw, self.bn_dw, a), a)
            return self._cbg(self.conv_pw, self.bn_pw, d)
        return F.add(self._cbg(self.conv_full, self.bn_full, a), a)

    def forward_out(self, mid: Tensor, x: Tensor) -> Tensor:
        y = self._cbg(self.conv_up, self.bn_up, mid)
        return F.add(y, x) if self.residual else y

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_out(self.forward_mid(x), x)


class MultiHeadSelfAttention(Module):
    """softmax(Q K^T / sqrt(head_dim)) V per head, heads concatenated, then projected."""

    def __init__(self, dim: int, num_heads: int, rng: RngState, name: str):
        if num_heads < 1 or dim % num_heads:
            raise ConfigError(f"{name}: embed dim {dim} not divisible by num_heads {num_heads}")
        self.dim, self.num_heads = dim, num_heads
        self.head_dim = dim // num_heads
        self.qkv = Linear(dim, 3 * dim, rng, name + ".qkv")
        self.proj = Linear(dim, dim, rng, name + ".proj")
        self._last_attention: Optional[np.ndarray] = None

    @property
    def last_attention(self) -> Optional[np.ndarray]:
        """Attention weights [N, heads, T, T] from the most recent forward."""
        return self._last_attention

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise DimensionError(f"attention expects [N,T,{self.dim}], got {x.shape}")
        n, t, d = x.shape
        qkv = self.qkv(x).reshape(n, t, 3, self.num_heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = F.mul_scalar(F.matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(self.head_dim))
        attn = F.softmax(scores, axis=-1)
        self._last_attention = attn.data
        ctx = F.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.proj(ctx)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: RngState, name: str, gelu_variant="paper"):
        self.gelu_variant = gelu_variant
        self.fc1 = Linear(dim, hidden, rng, name + ".fc1")
        self.fc2 = Linear(hidden, dim, rng, name + ".fc2")

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x), self.gelu_variant))


class TransformerBlock(Module):
    """Pre-norm block: t = x + attn(ln1(x)); out = t + mlp(ln2(t))."""

    def __init__(self, dim, num_heads, rng: RngState, name: str, mlp_ratio=4, gelu_variant="paper"):
        self.ln1 = LayerNorm(dim, name + ".ln1")
        self.attn = MultiHeadSelfAttention(dim, num_heads, rng, name + ".attn")
        self.ln2 = LayerNorm(dim, name + ".ln2")
        self.mlp = Mlp(dim, mlp_ratio * dim, rng, name + ".mlp", gelu_variant)

    def forward(self, x: Tensor) -> Tensor:
        t = F.add(x, self.attn(self.ln1(x)))
        return F.add(t, self.mlp(self.ln2(t)))
