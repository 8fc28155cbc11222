"""Dual-branch network: separable-conv branch, transformer branch, and the
cross-current bridges (DCU) that exchange features between them.

Per block the order is fixed::

    mid    = sc_block.forward_mid(x)                  # SC features at mid width
    tokens = bridge_down(mid, tokens, state)          # SC -> SA
    tokens = sa_block(tokens)
    mid    = bridge_up(tokens, mid, state)            # SA -> SC
    x      = sc_block.forward_out(mid, x)

Bridge accumulators (``BridgeState``) are carried across every block of
every stage and both live in the token width D.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from dcnn.autograd import functional as F
from dcnn.autograd.rng import RngState
from dcnn.autograd.tensor import DTYPE, Tensor, compute_dtype
from dcnn.config import ModelConfig
from dcnn.errors import DimensionError
from dcnn.layers import BatchNorm2d, Bottleneck, Conv2d, LayerNorm, Linear, Module, PatchEmbed, TransformerBlock


def map_to_tokens(x: Tensor) -> Tensor:
    """[N,C,g,g] -> [N,g*g,C] (row-major over the grid)."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def tokens_to_map(t: Tensor) -> Tensor:
    """[N,T,D] -> [N,D,sqrt(T),sqrt(T)]."""
    n, tcount, d = t.shape
    g = int(round(tcount**0.5))
    if g * g != tcount:
        raise DimensionError(f"token count {tcount} is not a square grid")
    return t.transpose(0, 2, 1).reshape(n, d, g, g)


@dataclass
class BridgeState:
    """Running bridge accumulators.

    ``b_sc`` is the SC->SA accumulator in token layout [N,T,D]; ``b_sa`` is
    the SA->SC accumulator in map layout [N,D,g,g].  Both start at zero.
    Under concat accumulation the per-bridge inputs are kept in the history
    lists, whose length equals ``layer_index`` after each full block.
    """

    b_sc: Tensor
    b_sa: Tensor
    layer_index: int = 0
    history_sc: list = field(default_factory=list)
    history_sa: list = field(default_factory=list)

    @classmethod
    def zeros(cls, n: int, num_tokens: int, dim: int) -> "BridgeState":
        g = int(round(num_tokens**0.5))
        dt = compute_dtype()
        return cls(Tensor(np.zeros((n, num_tokens, dim), dt)), Tensor(np.zeros((n, dim, g, g), dt)))


class ScToSaBridge(Module):
    """SC -> SA:  u = Conv1(Down(z));  b' = u + b;  tokens += LN(u + b')."""

    def __init__(self, cin, dim, factor, rng: RngState, name: str, down_mode="avg_pool", accum="additive", index=1):
        self.factor, self.down_mode, self.accum, self.index = factor, down_mode, accum, index
        self.down = Conv2d(cin, cin, factor, rng, name + ".down", stride=factor) if down_mode == "strided_conv" else None
        self.proj = Conv2d(cin, dim, 1, rng, name + ".proj")
        self.norm = LayerNorm(dim, name + ".norm")
        self.fuse = Conv2d(index * dim, dim, 1, rng, name + ".fuse") if (accum == "concat" and index > 1) else None

    def downsample(self, z: Tensor) -> Tensor:
        if self.down_mode == "avg_pool":
            return F.avg_pool2d(z, self.factor, self.factor)
        if self.down_mode == "max_pool":
            return F.max_pool2d(z, self.factor, self.factor)
        return self.down(z)

    def project(self, z: Tensor) -> Tensor:
        """Conv1(Down(z)) in token layout."""
        return map_to_tokens(self.proj(self.downsample(z)))

    def accumulate(self, u: Tensor, state: BridgeState) -> tuple[Tensor, list]:
        if self.accum == "additive":
            return F.add(u, state.b_sc), state.history_sc
        history = state.history_sc + [u]
        if self.fuse is None:
            return u, history
        stacked = F.concat(history, axis=-1)
        return map_to_tokens(self.fuse(tokens_to_map(stacked))), history

    def forward(self, z: Tensor, tokens: Tensor, state: BridgeState) -> tuple[Tensor, BridgeState]:
        n, c, h, w = z.shape
        t = tokens.shape[1]
        if h % self.factor or w % self.factor or (h // self.factor) * (w // self.factor) != t:
            raise DimensionError(f"SC map {h}x{w} does not align with {t} tokens at Down factor {self.factor}")
        u = self.project(z)
        b_new, history = self.accumulate(u, state)
        injected = self.norm(F.add(u, b_new))
        return F.add(tokens, injected), replace(state, b_sc=b_new, history_sc=history)


class SaToScBridge(Module):
    """SA -> SC:  m = map(tokens);  b' = m + b;  z += BN(Up(Conv1(m + b'))).

    The 1x1 conv runs before Up on the token grid; both are linear and the
    conv is pointwise, so the result equals Conv1(Up(m + b')).
    """

    def __init__(self, dim, cout, factor, rng: RngState, name: str, up_mode="nearest", accum="additive", index=1):
        self.factor, self.up_mode, self.accum, self.index = factor, up_mode, accum, index
        self.proj = Conv2d(dim, cout, 1, rng, name + ".proj", bias=False)
        self.norm = BatchNorm2d(cout, name + ".norm")
        self.fuse = Conv2d(index * dim, dim, 1, rng, name + ".fuse") if (accum == "concat" and index > 1) else None

    def upsample(self, x: Tensor) -> Tensor:
        if self.up_mode == "nearest":
            return F.interpolate_nearest(x, self.factor)
        return F.interpolate_bilinear(x, self.factor)

    def accumulate(self, m: Tensor, state: BridgeState) -> tuple[Tensor, list]:
        if self.accum == "additive":
            return F.add(m, state.b_sa), state.history_sa
        history = state.history_sa + [m]
        if self.fuse is None:
            return m, history
        return self.fuse(F.concat(history, axis=1)), history

    def forward(self, tokens: Tensor, z: Tensor, state: BridgeState) -> tuple[Tensor, BridgeState]:
        m = tokens_to_map(tokens)
        g = m.shape[2]
        if z.shape[2] != g * self.factor or z.shape[3] != g * self.factor:
            raise DimensionError(f"token grid {g}x{g} x{self.factor} does not match SC map {z.shape[2:]}")
        b_new, history = self.accumulate(m, state)
        contrib = self.norm(self.upsample(self.proj(F.add(m, b_new))))
        new_state = replace(state, b_sa=b_new, history_sa=history, layer_index=state.layer_index + 1)
        return F.add(z, contrib), new_state


@dataclass
class ActivationTrace:
    sc_features: Tensor
    tokens: Tensor
    pooled_sc: Tensor
    pooled_sa: Tensor

    @property
    def features(self) -> Tensor:
        """Fused pre-logit feature: [GAP(SC map), mean(tokens)]."""
        return F.concat([self.pooled_sc, self.pooled_sa], axis=1)


class DcnnModel(Module):
    def __init__(self, config: ModelConfig, rng: RngState):
        config.validate()
        self.config = config
        c = config
        self.stem = PatchEmbed(3, c.stem.out_channels, c.stem.kernel, rng, "stem", c.gelu_variant, c.stem.stride)
        self.patch_embed = Conv2d(c.stem.out_channels, c.embed_dim, c.patch_size, rng, "patch_embed", stride=c.patch_size)
        pos = rng.keyed("pos_embed").standard_normal((1, c.num_tokens, c.embed_dim)) * 0.02
        self.pos_embed = Tensor(pos.astype(DTYPE), requires_grad=True, name="pos_embed")
        self.sc_blocks: list[Bottleneck] = []
        self.sa_blocks: list[TransformerBlock] = []
        self.bridges_down: list[ScToSaBridge] = []
        self.bridges_up: list[SaToScBridge] = []
        for i, (_, cin, cmid, cout) in enumerate(c.block_plan()):
            self.sc_blocks.append(
                Bottleneck(
                    cin, cmid, cout, rng, f"sc_blocks.{i}",
                    kernel=c.dw_kernel, conv_mode=c.conv_mode, gelu_variant=c.gelu_variant,
                )
            )
            self.bridges_down.append(
                ScToSaBridge(cmid, c.embed_dim, c.patch_size, rng, f"bridges_down.{i}", c.down_mode, c.bridge_accum, i + 1)
            )
            self.sa_blocks.append(
                TransformerBlock(c.embed_dim, c.num_heads, rng, f"sa_blocks.{i}", c.mlp_ratio, c.gelu_variant)
            )
            self.bridges_up.append(
                SaToScBridge(c.embed_dim, cmid, c.patch_size, rng, f"bridges_up.{i}", c.up_mode, c.bridge_accum, i + 1)
            )
        self.sc_head = Conv2d(c.final_channels, c.num_classes, 1, rng, "sc_head")
        self.sa_head = Linear(c.embed_dim, c.num_classes, rng, "sa_head")

    # -- pieces ---------------------------------------------------------------
    def _check_input(self, images: Tensor) -> None:
        h, w = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (h, w):
            raise DimensionError(f"expected images [N,3,{h},{w}], got {images.shape}")

    def embed_tokens(self, stem_out: Tensor) -> Tensor:
        tokens = map_to_tokens(self.patch_embed(stem_out))
        return F.add(tokens, F.broadcast_to(self.pos_embed, tokens.shape))

    def sc_logits(self, x: Tensor) -> tuple[Tensor, Tensor]:
        pooled = F.global_avg_pool(x)
        n, c = pooled.shape
        logits = self.sc_head(pooled.reshape(n, c, 1, 1))
        return logits.reshape(n, self.config.num_classes), pooled

    def sa_logits(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        pooled = F.mean(tokens, axis=1)
        return self.sa_head(pooled), pooled

    # -- forward passes -------------------------------------------------------
    def forward(self, images: Tensor, training: Optional[bool] = None):
        """Returns (logits_sc, logits_sa, ActivationTrace)."""
        if training is not None:
            self.train(training)
        self._check_input(images)
        x = self.stem(images)
        tokens = self.embed_tokens(x)
        state = BridgeState.zeros(images.shape[0], self.config.num_tokens, self.config.embed_dim)
        for blk, down, sa, up in zip(self.sc_blocks, self.bridges_down, self.sa_blocks, self.bridges_up):
            mid = blk.forward_mid(x)
            tokens, state = down(mid, tokens, state)
            tokens = sa(tokens)
            mid, state = up(tokens, mid, state)
            x = blk.forward_out(mid, x)
        logits_sc, pooled_sc = self.sc_logits(x)
        logits_sa, pooled_sa = self.sa_logits(tokens)
        return logits_sc, logits_sa, ActivationTrace(x, tokens, pooled_sc, pooled_sa)

    def forward_sc_only(self, images: Tensor) -> Tensor:
        """SC branch alone (no bridges): stem -> bottlenecks -> SC head."""
        self._check_input(images)
        x = self.stem(images)
        for blk in self.sc_blocks:
            x = blk(x)
        return self.sc_logits(x)[0]

    def forward_sa_only(self, images: Tensor) -> Tensor:
        """SA branch alone (no bridges): stem -> patch tokens -> transformer blocks -> SA head."""
        self._check_input(images)
        tokens = self.embed_tokens(self.stem(images))
        for sa in self.sa_blocks:
            tokens = sa(tokens)
        return self.sa_logits(tokens)[0]

    def bridge_parameters(self) -> list[tuple[str, Tensor]]:
        """Conv weights/biases of every bridge (Down conv, 1x1 projections, concat fuses)."""
        out = []
        for name, p in self.named_parameters():
            if name.startswith("bridges_") and ".norm." not in name:
                out.append((name, p))
        return out


def build_model(config: ModelConfig, rng: Optional[RngState] = None) -> DcnnModel:
    return DcnnModel(config, rng if rng is not None else RngState(0))


def fuse_logits(logits_sc: Tensor, logits_sa: Tensor, mode: str = "mean_logits") -> Tensor:
    if logits_sc.shape != logits_sa.shape:
        raise DimensionError(f"head logits differ in shape: {logits_sc.shape} vs {logits_sa.shape}")
    if mode == "mean_logits":
        return F.mul_scalar(F.add(logits_sc, logits_sa), 0.5)
    if mode == "sc_only":
        return logits_sc
    if mode == "sa_only":
        return logits_sa
    raise ValueError(f"unknown head fusion {mode!r}")
