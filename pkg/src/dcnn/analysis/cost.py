"""Closed-form parameter and FLOP accounting from a ModelConfig alone.

Convention: one multiply-accumulate (MAC) = 2 FLOPs.  Convolutions,
linears and the two attention matmuls are counted as MACs.  Everything else
(bias adds, norms, activations, softmax, pooling, residual adds) is counted
as elementwise FLOPs using the per-element costs in ``ELEMENTWISE_COST``.
Counts are per image (batch 1).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

from dcnn.config import ModelConfig, reconciliation_notes

ELEMENTWISE_COST = {
    "bias": 1,
    "add": 1,
    "batch_norm": 2,  # folded scale + shift at inference
    "layer_norm": 5,
    "gelu": 8,
    "softmax": 3,
    "scale": 1,
    "pool": 1,  # per input element
    "bilinear": 4,  # per output element
    "nearest": 0,
}

CONVENTION = (
    "1 MAC = 2 FLOPs; conv/linear/attention matmuls counted as MACs; "
    "norms, activations, softmax, pooling and adds counted per element "
    "(bias 1, add 1, BN 2, LN 5, GELU 8, softmax 3, pool 1/input, bilinear 4/output); batch 1"
)

REFERENCE_PARAMS = 52.68e6
REFERENCE_FLOPS = 11.0e9


@dataclass
class CostRow:
    name: str
    param_count: int
    macs: int
    elementwise: int
    output_shape: tuple[int, ...]

    @property
    def flop_count(self) -> int:
        """2 FLOPs per MAC (elementwise work is reported separately)."""
        return 2 * self.macs


@dataclass
class CostReport:
    rows: list[CostRow]
    input_shape: tuple[int, ...]
    convention: str = CONVENTION
    notes: list[str] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.param_count for r in self.rows)

    @property
    def mac_total(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flop_total(self) -> int:
        return 2 * self.mac_total

    @property
    def elementwise_total(self) -> int:
        return sum(r.elementwise for r in self.rows)

    @property
    def full_total(self) -> int:
        return self.flop_total + self.elementwise_total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "params", "macs", "flops", "elementwise_flops", "output_shape"])
        for r in self.rows:
            w.writerow([r.name, r.param_count, r.macs, r.flop_count, r.elementwise, "x".join(map(str, r.output_shape))])
        w.writerow(["TOTAL", self.total_params, self.mac_total, self.flop_total, self.elementwise_total, ""])
        return buf.getvalue()

    def to_text(self, explain: bool = False, reference: bool = False) -> str:
        width = max(len(r.name) for r in self.rows) + 2
        lines = [f"{'layer':<{width}}{'params':>12}{'MACs':>16}{'elementwise':>14}  output"]
        for r in self.rows:
            shape = "x".join(map(str, r.output_shape))
            lines.append(f"{r.name:<{width}}{r.param_count:>12,}{r.macs:>16,}{r.elementwise:>14,}  {shape}")
        lines.append("-" * (width + 56))
        lines.append(f"total params        : {self.total_params:,} ({self.total_params / 1e6:.2f}M)")
        lines.append(f"MAC-only total      : {self.mac_total / 1e9:.3f}G")
        lines.append(f"2 FLOPs/MAC total   : {self.flop_total / 1e9:.3f}G")
        lines.append(f"full total          : {self.full_total / 1e9:.3f}G (2 FLOPs/MAC + elementwise)")
        lines.append(f"convention          : {self.convention}")
        if reference:
            p, f = self.total_params, self.mac_total
            lines.append(f"reference params    : 52.68M  (this model {100 * (p - REFERENCE_PARAMS) / REFERENCE_PARAMS:+.1f}%)")
            lines.append(
                f"reference FLOPs     : 11.0G   (MAC-only {100 * (f - REFERENCE_FLOPS) / REFERENCE_FLOPS:+.1f}%, "
                f"2 FLOPs/MAC {100 * (2 * f - REFERENCE_FLOPS) / REFERENCE_FLOPS:+.1f}%)"
            )
        if explain:
            lines.append("")
            lines.append("reconciliation notes:")
            lines.extend(f"  - {n}" for n in self.notes)
        return "\n".join(lines)


def parse_csv_totals(text: str) -> dict[str, int]:
    for row in csv.DictReader(io.StringIO(text)):
        if row["name"] == "TOTAL":
            return {
                "params": int(row["params"]),
                "macs": int(row["macs"]),
                "flops": int(row["flops"]),
                "elementwise_flops": int(row["elementwise_flops"]),
            }
    raise ValueError("no TOTAL row in cost CSV")


class _Builder:
    def __init__(self):
        self.rows: list[CostRow] = []

    def row(self, name, params=0, macs=0, elem=0, shape=()):
        self.rows.append(CostRow(name, int(params), int(macs), int(elem), tuple(shape)))

    def conv(self, name, cin, cout, k, hin, stride=1, padding=0, groups=1, bias=True):
        hout = (hin + 2 * padding - k) // stride + 1
        hw = hout * hout
        params = k * k * (cin // groups) * cout + (cout if bias else 0)
        macs = k * k * (cin // groups) * cout * hw
        self.row(name, params, macs, (cout * hw) if bias else 0, (cout, hout, hout))
        return hout

    def linear(self, name, din, dout, tokens, bias=True):
        shape = (tokens, dout) if tokens > 1 else (dout,)
        self.row(name, din * dout + (dout if bias else 0), din * dout * tokens, dout * tokens if bias else 0, shape)

    def bn(self, name, c, h):
        self.row(name, 2 * c, 0, ELEMENTWISE_COST["batch_norm"] * c * h * h, (c, h, h))

    def ln(self, name, d, tokens):
        self.row(name, 2 * d, 0, ELEMENTWISE_COST["layer_norm"] * d * tokens, (tokens, d))

    def elem(self, name, kind, count, shape):
        self.row(name, 0, 0, ELEMENTWISE_COST[kind] * count, shape)


def conv_cost(cin: int, cout: int, kernel: int, size: int, stride=1, padding=0, groups=1, bias=True) -> CostRow:
    """Closed-form cost of one convolution on a ``size`` x ``size`` input."""
    b = _Builder()
    b.conv("conv", cin, cout, kernel, size, stride, padding, groups, bias)
    return b.rows[0]


def analyze(config: ModelConfig, input_shape: Optional[tuple[int, ...]] = None) -> CostReport:
    """Per-layer parameters, MACs and elementwise FLOPs for ``config``."""
    config.validate()
    c = config
    if input_shape is None:
        input_shape = (3, *c.input_size)
    side_in = input_shape[-1]
    b = _Builder()
    c0 = c.stem.out_channels
    s = b.conv("stem.conv", 3, c0, c.stem.kernel, side_in, stride=c.stem.stride)
    b.elem("stem:gelu", "gelu", c0 * s * s, (c0, s, s))
    b.bn("stem.bn", c0, s)

    d, f = c.embed_dim, c.patch_size
    g = b.conv("patch_embed", c0, d, f, s, stride=f)
    t = g * g
    b.row("pos_embed", t * d, 0, t * d, (t, d))

    k = c.dw_kernel
    pad = (k - 1) // 2
    for i, (_, cin, cm, cout) in enumerate(c.block_plan()):
        p = f"sc_blocks.{i}"
        b.conv(f"{p}.conv_down", cin, cm, 1, s)
        b.elem(f"{p}:gelu_down", "gelu", cm * s * s, (cm, s, s))
        b.bn(f"{p}.bn_down", cm, s)
        if c.conv_mode == "separable":
            b.conv(f"{p}.conv_dw", cm, cm, k, s, padding=pad, groups=cm)
            b.elem(f"{p}:gelu_dw", "gelu", cm * s * s, (cm, s, s))
            b.bn(f"{p}.bn_dw", cm, s)
            b.elem(f"{p}:skip_dw", "add", cm * s * s, (cm, s, s))
            b.conv(f"{p}.conv_pw", cm, cm, 1, s)
            b.elem(f"{p}:gelu_pw", "gelu", cm * s * s, (cm, s, s))
            b.bn(f"{p}.bn_pw", cm, s)
        else:
            b.conv(f"{p}.conv_full", cm, cm, k, s, padding=pad)
            b.elem(f"{p}:gelu_full", "gelu", cm * s * s, (cm, s, s))
            b.bn(f"{p}.bn_full", cm, s)
            b.elem(f"{p}:skip_full", "add", cm * s * s, (cm, s, s))

        # SC -> SA bridge
        q = f"bridges_down.{i}"
        if c.down_mode == "strided_conv":
            b.conv(f"{q}.down", cm, cm, f, s, stride=f)
        else:
            b.elem(f"{q}:pool", "pool", cm * s * s, (cm, g, g))
        b.conv(f"{q}.proj", cm, d, 1, g)
        if c.bridge_accum == "concat" and i > 0:
            b.conv(f"{q}.fuse", (i + 1) * d, d, 1, g)
        else:
            b.elem(f"{q}:accumulate", "add", t * d if c.bridge_accum == "additive" else 0, (t, d))
        b.elem(f"{q}:sum", "add", t * d, (t, d))
        b.ln(f"{q}.norm", d, t)
        b.elem(f"{q}:inject", "add", t * d, (t, d))

        # transformer block
        a = f"sa_blocks.{i}"
        b.ln(f"{a}.ln1", d, t)
        b.linear(f"{a}.attn.qkv", d, 3 * d, t)
        h = c.num_heads
        b.row(
            f"{a}.attn:core",
            0,
            2 * t * t * d,
            (ELEMENTWISE_COST["softmax"] + ELEMENTWISE_COST["scale"]) * h * t * t,
            (h, t, t),
        )
        b.linear(f"{a}.attn.proj", d, d, t)
        b.elem(f"{a}:res_attn", "add", t * d, (t, d))
        b.ln(f"{a}.ln2", d, t)
        b.linear(f"{a}.mlp.fc1", d, c.mlp_ratio * d, t)
        b.elem(f"{a}.mlp:gelu", "gelu", c.mlp_ratio * d * t, (t, c.mlp_ratio * d))
        b.linear(f"{a}.mlp.fc2", c.mlp_ratio * d, d, t)
        b.elem(f"{a}:res_mlp", "add", t * d, (t, d))

        # SA -> SC bridge
        u = f"bridges_up.{i}"
        if c.bridge_accum == "concat" and i > 0:
            b.conv(f"{u}.fuse", (i + 1) * d, d, 1, g)
        else:
            b.elem(f"{u}:accumulate", "add", t * d if c.bridge_accum == "additive" else 0, (d, g, g))
        b.elem(f"{u}:sum", "add", t * d, (d, g, g))
        b.conv(f"{u}.proj", d, cm, 1, g, bias=False)
        b.elem(f"{u}:up", c.up_mode, cm * s * s, (cm, s, s))
        b.bn(f"{u}.norm", cm, s)
        b.elem(f"{u}:inject", "add", cm * s * s, (cm, s, s))

        b.conv(f"{p}.conv_up", cm, cout, 1, s)
        b.elem(f"{p}:gelu_up", "gelu", cout * s * s, (cout, s, s))
        b.bn(f"{p}.bn_up", cout, s)
        if cin == cout:
            b.elem(f"{p}:residual", "add", cout * s * s, (cout, s, s))

    cf = c.final_channels
    b.elem("sc_head:gap", "pool", cf * s * s, (cf,))
    b.conv("sc_head", cf, c.num_classes, 1, 1)
    b.elem("sa_head:token_mean", "pool", t * d, (d,))
    b.linear("sa_head", d, c.num_classes, 1)
    return CostReport(b.rows, tuple(input_shape), notes=reconciliation_notes(c))


def count_params(config: ModelConfig) -> CostReport:
    return analyze(config)


def count_flops(config: ModelConfig, input_shape: Optional[tuple[int, ...]] = None) -> CostReport:
    return analyze(config, input_shape)
