"""Declarative model configuration, presets, and (de)serialisation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from dcnn.errors import ConfigError

DOWN_MODES = ("avg_pool", "max_pool", "strided_conv")
UP_MODES = ("nearest", "bilinear")
CONV_MODES = ("separable", "conventional")
BRIDGE_ACCUM = ("additive", "concat")
GELU_VARIANTS = ("paper", "standard")
HEAD_FUSION = ("mean_logits", "sc_only", "sa_only")
PRESETS = ("full", "nano", "micro")


@dataclass
class StemSpec:
    kernel: int = 4
    stride: int = 4
    out_channels: int = 64


@dataclass
class StageSpec:
    """One SC stage group.

    ``first_out`` overrides ``c_out`` for the stage's first block only; the
    full preset uses it for the 128-then-256 widths of the first group.
    """

    num_blocks: int
    c_mid: int
    c_out: int
    first_out: Optional[int] = None

    def block_out(self, i: int) -> int:
        return self.first_out if (i == 0 and self.first_out is not None) else self.c_out


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (224, 224)
    stem: StemSpec = field(default_factory=StemSpec)
    stages: list[StageSpec] = field(default_factory=list)
    embed_dim: int = 576
    num_heads: int = 12
    mlp_ratio: int = 4
    num_classes: int = 1000
    patch_size: int = 4
    dw_kernel: int = 9
    down_mode: str = "avg_pool"
    up_mode: str = "nearest"
    conv_mode: str = "separable"
    bridge_accum: str = "additive"
    gelu_variant: str = "paper"
    head_fusion: str = "mean_logits"
    scale_preset: str = "full"

    # -- presets ---------------------------------------------------------
    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "full":
            cfg = cls(
                input_size=(224, 224),
                stem=StemSpec(4, 4, 64),
                stages=[
                    StageSpec(4, 32, 256, first_out=128),
                    StageSpec(4, 64, 256),
                    StageSpec(4, 128, 512),
                ],
                embed_dim=576,
                num_heads=12,
                num_classes=1000,
                patch_size=4,
                dw_kernel=9,
                scale_preset="full",
            )
        elif name == "nano":
            cfg = cls(
                input_size=(32, 32),
                stem=StemSpec(4, 4, 16),
                stages=[StageSpec(1, 8, 32), StageSpec(1, 16, 64), StageSpec(1, 32, 128)],
                embed_dim=48,
                num_heads=4,
                num_classes=4,
                patch_size=2,
                dw_kernel=3,
                scale_preset="nano",
            )
        elif name == "micro":
            cfg = cls(
                input_size=(8, 8),
                stem=StemSpec(2, 2, 4),
                stages=[StageSpec(1, 4, 4)],
                embed_dim=8,
                num_heads=2,
                num_classes=3,
                patch_size=2,
                dw_kernel=3,
                scale_preset="micro",
            )
        else:
            raise ConfigError(f"unknown scale preset {name!r}; expected one of {PRESETS}")
        cfg = cfg.replace(**overrides) if overrides else cfg
        cfg.validate()
        return cfg

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # -- derived geometry ---------------------------------------------------
    @property
    def feature_size(self) -> int:
        """Side of the SC feature map produced by the stem."""
        return (self.input_size[0] - self.stem.kernel) // self.stem.stride + 1

    @property
    def token_grid(self) -> int:
        return self.feature_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.token_grid**2

    @property
    def num_blocks(self) -> int:
        return sum(s.num_blocks for s in self.stages)

    def block_plan(self) -> list[tuple[int, int, int, int]]:
        """(stage index, cin, cmid, cout) for every SC block in order."""
        plan = []
        cin = self.stem.out_channels
        for si, st in enumerate(self.stages):
            for bi in range(st.num_blocks):
                cout = st.block_out(bi)
                plan.append((si, cin, st.c_mid, cout))
                cin = cout
        return plan

    @property
    def final_channels(self) -> int:
        return self.block_plan()[-1][3]

    # -- validation ----------------------------------------------------------
    def validate(self) -> "ModelConfig":
        def bad(msg):
            raise ConfigError(msg)

        h, w = self.input_size
        if h != w:
            bad(f"input_size must be square, got {self.input_size}")
        if self.stem.kernel < 1 or self.stem.stride < 1 or self.stem.out_channels < 1:
            bad("stem kernel, stride and out_channels must be positive")
        if (h - self.stem.kernel) % self.stem.stride:
            bad(f"stem (kernel {self.stem.kernel}, stride {self.stem.stride}) does not tile input {h}x{w}")
        side = self.feature_size
        if side < 1:
            bad(f"stem leaves no feature map for input {h}x{w}")
        if self.patch_size < 1 or side % self.patch_size:
            bad(f"stem feature map side {side} not divisible by the Down factor {self.patch_size}")
        if self.embed_dim < 2:
            bad("embed_dim must be >= 2")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            bad(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio < 1:
            bad("mlp_ratio must be >= 1")
        if self.num_classes < 1:
            bad("num_classes must be >= 1")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            bad(f"dw_kernel must be a positive odd number, got {self.dw_kernel}")
        if not self.stages:
            bad("at least one SC stage is required")
        for i, st in enumerate(self.stages):
            if st.num_blocks < 1 or st.c_mid < 1 or st.c_out < 1:
                bad(f"stage {i}: num_blocks, c_mid and c_out must be positive")
            if st.first_out is not None and st.first_out < 1:
                bad(f"stage {i}: first_out must be positive")
        for name, value, allowed in (
            ("down_mode", self.down_mode, DOWN_MODES),
            ("up_mode", self.up_mode, UP_MODES),
            ("conv_mode", self.conv_mode, CONV_MODES),
            ("bridge_accum", self.bridge_accum, BRIDGE_ACCUM),
            ("gelu_variant", self.gelu_variant, GELU_VARIANTS),
            ("head_fusion", self.head_fusion, HEAD_FUSION),
            ("scale_preset", self.scale_preset, PRESETS),
        ):
            if value not in allowed:
                bad(f"{name}={value!r} not in {allowed}")
        return self

    # -- serialisation -------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        preset = data.pop("preset", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        base = cls.preset(preset) if preset else cls()
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key == "input_size":
                value = tuple(value) if isinstance(value, (list, tuple)) else (int(value), int(value))
            elif key == "stem":
                value = _build(StemSpec, {**dataclasses.asdict(base.stem), **value}, "stem") if isinstance(value, dict) else value
            elif key == "stages":
                value = [_build(StageSpec, s, "stages[]") if isinstance(s, dict) else s for s in value]
            kwargs[key] = value
        cfg = dataclasses.replace(base, **kwargs)
        return cfg.validate()

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


def _build(kind, data: dict, where: str):
    known = {f.name for f in dataclasses.fields(kind)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return kind(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def reconciliation_notes(cfg: Optional[ModelConfig] = None) -> list[str]:
    """How each ambiguity in the reference layer layout was resolved."""
    notes = [
        "Stage layout: stem + three SC stage groups + heads; each group holds 4 bottlenecks "
        "(one leading block plus three repeats), 12 in total.",
        "First-group output width: block 1 up-projects to 128 channels, blocks 2-4 to 256; "
        "group 2 keeps 256; group 3 goes 256->512 in its first block.",
        "Bottleneck skip: a residual add wraps the depthwise conv (d = BN(gelu(dw(a))) + a) and an outer "
        "residual wraps the whole bottleneck only where input and output widths match "
        "(no projection shortcut is added).",
        "SA depth: 12 transformer blocks, one paired with every SC bottleneck, so every bottleneck "
        "has its own pair of bridges.",
        "SA input: a 4x4 stride-4 conv maps the 56x56 stem output to 14x14 = 196 tokens of width 576, plus a "
        "learnable positional embedding; no class token; SA head = token mean + linear.",
        "Bridge channels: bridges read/write the bottleneck's mid width (32/64/128); the SC->SA conv maps "
        "mid width -> 576, the SA->SC conv maps 576 -> mid width.",
        "Bridge accumulators live in the 576-wide token space in both directions because the SC width changes "
        "between groups: SC->SA keeps b = Conv1(Down(z)) + b_prev and injects LN(Conv1(Down(z)) + b); "
        "SA->SC keeps b = map(tokens) + b_prev and injects BN(Up(Conv1(map(tokens) + b))).",
        "SA->SC order: the 1x1 conv runs on the 14x14 grid before Up; 1x1 convs commute exactly with "
        "per-channel resampling, so this equals Conv1(Up(.)) at a quarter of the cost.",
        "Biases: present on every conv/linear except the SA->SC bridge conv, which feeds BatchNorm directly.",
        "Heads: SC = GAP + 1x1 conv to num_classes, SA = token mean + linear; default prediction = mean of logits.",
        "Down = 4x4 average pooling by default; Up = nearest-neighbour x4 by default.",
    ]
    if cfg is not None and cfg.bridge_accum == "concat":
        notes.append(
            "Concat accumulation: bridge L concatenates all L projected histories along channels and a "
            "1x1 conv (L*576 -> 576) produces the new accumulator; the first bridge uses its input directly."
        )
    return notes
