"""Single-variable ablation grid at desk scale."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

from dcnn.analysis.cost import count_params
from dcnn.autograd import RngState
from dcnn.config import ModelConfig
from dcnn.data import Sample
from dcnn.errors import ConfigError
from dcnn.model import build_model
from dcnn.training.loop import TrainConfig, Trainer, evaluate

AXIS_VALUES: dict[str, tuple] = {
    "conv_mode": ("separable", "conventional"),
    "down_mode": ("avg_pool", "max_pool", "strided_conv"),
    "num_heads": (12, 16),
    "bridge_accum": ("additive", "concat"),
}


@dataclass
class AblationRow:
    method: str
    axis: Optional[str]
    value: object
    params: int
    analytic_params: int
    train_top1: float
    val_top1: Optional[float]
    final_loss: float


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)

    def row(self, method: str) -> AblationRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "params", "analytic_params", "train_top1", "val_top1", "final_loss"])
        for r in self.rows:
            val = "" if r.val_top1 is None else repr(r.val_top1)
            w.writerow([r.method, r.params, r.analytic_params, repr(r.train_top1), val, repr(r.final_loss)])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len("Methods")] + [len(r.method) for r in self.rows]) + 2
        lines = [f"{'Methods':<{width}}{'#Params':>12}{'Train top-1':>13}{'Val top-1':>11}{'Loss':>11}"]
        for r in self.rows:
            val = "-" if r.val_top1 is None else f"{100 * r.val_top1:.1f}%"
            lines.append(
                f"{r.method:<{width}}{r.params:>12,}{100 * r.train_top1:>12.1f}%{val:>11}{r.final_loss:>11.4f}"
            )
        return "\n".join(lines)


def expand_axes(base: ModelConfig, axes: Union[Sequence[str], Mapping[str, Sequence]]) -> list[tuple[str, Optional[str], object]]:
    """(method label, axis, value) for the baseline and every non-baseline value."""
    if not isinstance(axes, Mapping):
        unknown = [a for a in axes if a not in AXIS_VALUES]
        if unknown:
            raise ConfigError(f"unknown ablation axis {unknown[0]!r}; expected one of {tuple(AXIS_VALUES)}")
        axes = {a: AXIS_VALUES[a] for a in axes}
    plan: list[tuple[str, Optional[str], object]] = [("baseline", None, None)]
    for axis, values in axes.items():
        if axis not in AXIS_VALUES:
            raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {tuple(AXIS_VALUES)}")
        for v in values:
            if getattr(base, axis) != v:
                plan.append((f"{axis}={v}", axis, v))
    return plan


def _run_variant(args) -> AblationRow:
    method, axis, value, base, train_cfg, data, val_data = args
    cfg = base if axis is None else base.replace(**{axis: value})
    cfg.validate()
    model = build_model(cfg, RngState(train_cfg.seed))
    trainer = Trainer(model, train_cfg)
    history = trainer.fit(data)
    train_top1 = evaluate(model, data).top1
    val_top1 = evaluate(model, val_data).top1 if val_data else None
    final_loss = history[-1].mean_loss if history else float("nan")
    return AblationRow(method, axis, value, model.num_parameters(), count_params(cfg).total_params, train_top1, val_top1, final_loss)


def run_ablation_grid(
    base_config: ModelConfig,
    axes: Union[Sequence[str], Mapping[str, Sequence]],
    train_cfg: TrainConfig,
    data: Sequence[Sample],
    val_data: Optional[Sequence[Sample]] = None,
    workers: int = 1,
) -> AblationReport:
    """Train the baseline and each single-axis variant with identical seeds and data."""
    train_cfg.validate()
    jobs = [(m, a, v, base_config, train_cfg, data, val_data) for m, a, v in expand_axes(base_config, axes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_variant, jobs))
    else:
        rows = [_run_variant(j) for j in jobs]
    return AblationReport(rows)
