"""Training and evaluation loops, metrics log and resumable trainer."""
from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from dcnn.autograd import functional as F
from dcnn.autograd import no_grad
from dcnn.config import ModelConfig
from dcnn.data import Sample, batches
from dcnn.errors import ConfigError, DatasetError
from dcnn.model import DcnnModel, fuse_logits
from dcnn.training.checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from dcnn.training.losses import CenterLossState, center_loss, cross_entropy_loss, topk_correct, update_centers
from dcnn.training.optim import OptimizerState, adamw_step

LOSSES = ("cross_entropy", "cross_entropy_plus_center")
SCHEDULES = ("constant", "cosine")
METRICS_HEADER = ["epoch", "loss", "top1", "top5", "seconds"]


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 200
    loss: str = "cross_entropy"
    center_lambda: float = 0.003
    center_alpha: float = 0.5
    seed: int = 0
    head_weights: tuple[float, float] = (1.0, 1.0)
    lr_schedule: str = "constant"
    checkpoint_every: int = 0
    log_seconds: bool = True

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss={self.loss!r} not in {LOSSES}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule={self.lr_schedule!r} not in {SCHEDULES}")
        if not 0.0 < self.center_alpha <= 1.0:
            raise ConfigError("center_alpha must be in (0, 1]")
        if len(self.head_weights) != 2:
            raise ConfigError("head_weights needs two entries (sc, sa)")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["head_weights"] = list(self.head_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config key(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        for key in ("betas", "head_weights"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d).validate()


@dataclass
class EpochReport:
    mean_loss: float
    top1: float
    top5: float
    seconds: float = 0.0


@dataclass
class EvalReport:
    top1: float
    top5: float
    loss: float


def epoch_seed(seed: int, epoch: int) -> int:
    """Shuffle seed for ``epoch``; a resumed run reproduces the same order."""
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def scheduled_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "constant" or total_steps <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def _loss(model: DcnnModel, images, labels, cfg: TrainConfig, center: Optional[CenterLossState]):
    logits_sc, logits_sa, trace = model(images, training=True)
    w_sc, w_sa = cfg.head_weights
    loss = F.add(
        F.mul_scalar(cross_entropy_loss(logits_sc, labels), w_sc),
        F.mul_scalar(cross_entropy_loss(logits_sa, labels), w_sa),
    )
    feats = None
    if cfg.loss == "cross_entropy_plus_center":
        feats = trace.features
        loss = F.add(loss, F.mul_scalar(center_loss(feats, labels, center), cfg.center_lambda))
    return loss, fuse_logits(logits_sc, logits_sa, model.config.head_fusion), feats


def train_epoch(
    model: DcnnModel,
    data: Sequence[Sample],
    cfg: TrainConfig,
    opt: OptimizerState,
    center: Optional[CenterLossState] = None,
    epoch: int = 0,
    total_steps: int = 0,
) -> tuple[EpochReport, Optional[CenterLossState]]:
    """One pass over seeded-shuffled batches; returns the report and the updated centers."""
    if not data:
        raise DatasetError("cannot train on an empty dataset")
    if cfg.loss == "cross_entropy_plus_center" and center is None:
        center = CenterLossState.zeros(model.config.num_classes, model.config.final_channels + model.config.embed_dim)
    start = time.perf_counter()
    model.train()
    loss_sum, top1, top5, seen = 0.0, 0, 0, 0
    for images, labels in batches(data, cfg.batch_size, epoch_seed(cfg.seed, epoch), shuffle=True):
        loss, logits, feats = _loss(model, images, labels, cfg, center)
        model.zero_grad()
        loss.backward()
        lr = scheduled_lr(cfg, opt.step, total_steps)
        adamw_step(model.named_parameters(), opt, lr, cfg.weight_decay, cfg.betas)
        if feats is not None:
            center = update_centers(feats.data, labels, center, cfg.center_alpha)
        n = len(labels)
        loss_sum += float(loss.data) * n
        top1 += int(topk_correct(logits.data, labels, 1).sum())
        top5 += int(topk_correct(logits.data, labels, 5).sum())
        seen += n
    report = EpochReport(loss_sum / seen, top1 / seen, top5 / seen, time.perf_counter() - start)
    return report, center


def evaluate(model: DcnnModel, data: Sequence[Sample], batch_size: int = 64) -> EvalReport:
    """Eval-mode pass (frozen BN statistics) in dataset order; restores the previous mode."""
    if not data:
        raise DatasetError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    loss_sum, top1, top5 = 0.0, 0, 0
    try:
        with no_grad():
            for images, labels in batches(data, batch_size, shuffle=False):
                logits_sc, logits_sa, _ = model(images)
                logits = fuse_logits(logits_sc, logits_sa, model.config.head_fusion)
                loss_sum += float(cross_entropy_loss(logits, labels).data) * len(labels)
                top1 += int(topk_correct(logits.data, labels, 1).sum())
                top5 += int(topk_correct(logits.data, labels, 5).sum())
    finally:
        model.train(was_training)
    n = len(data)
    return EvalReport(top1 / n, top5 / n, loss_sum / n)


def append_metrics(path, epoch: int, report: EpochReport, log_seconds: bool = True) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_HEADER)
        secs = f"{report.seconds:.3f}" if log_seconds else "0"
        w.writerow([epoch, repr(float(report.mean_loss)), repr(report.top1), repr(report.top5), secs])


class Trainer:
    """Owns the optimizer/center state and the epoch counter of one run."""

    def __init__(self, model: DcnnModel, cfg: TrainConfig, seed_state: Optional[dict] = None):
        self.model = model
        self.cfg = cfg.validate()
        self.opt = OptimizerState()
        self.center: Optional[CenterLossState] = None
        self.epoch = 0
        self.seed_state = seed_state
        self.history: list[EpochReport] = []

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def fit(
        self,
        data: Sequence[Sample],
        epochs: Optional[int] = None,
        metrics_path=None,
        checkpoint_dir=None,
        callback: Optional[Callable[[int, EpochReport], None]] = None,
    ) -> list[EpochReport]:
        """Train until ``epochs`` total epochs have run (counting resumed ones)."""
        target = self.cfg.epochs if epochs is None else epochs
        steps_per_epoch = -(-len(data) // self.cfg.batch_size) if data else 0
        total_steps = target * steps_per_epoch
        while self.epoch < target:
            report, self.center = train_epoch(
                self.model, data, self.cfg, self.opt, self.center, self.epoch, total_steps
            )
            self.epoch += 1
            self.history.append(report)
            if metrics_path is not None:
                append_metrics(metrics_path, self.epoch, report, self.cfg.log_seconds)
            if checkpoint_dir is not None and self.cfg.checkpoint_every and self.epoch % self.cfg.checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"epoch_{self.epoch:04d}.ckpt")
            if callback is not None:
                callback(self.epoch, report)
        return self.history

    def save(self, path) -> None:
        save_checkpoint(
            path,
            self.model,
            self.config.fingerprint(),
            self.epoch,
            self.opt,
            self.center,
            self.seed_state,
            self.config.to_dict(),
            self.cfg.to_dict(),
        )

    @classmethod
    def resume(cls, path, model: DcnnModel, cfg: TrainConfig) -> "Trainer":
        ckpt = load_checkpoint(path, expected_fingerprint=model.config.fingerprint())
        apply_checkpoint(ckpt, model)
        t = cls(model, cfg, ckpt.rng_state)
        t.opt = ckpt.optimizer
        t.center = ckpt.center
        t.epoch = ckpt.epoch
        return t
