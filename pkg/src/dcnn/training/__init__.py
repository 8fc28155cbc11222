from dcnn.training.checkpoint import Checkpoint, apply_checkpoint, load_checkpoint, save_checkpoint
from dcnn.training.losses import CenterLossState, center_loss, cross_entropy_loss, topk_correct, update_centers
from dcnn.training.loop import EpochReport, EvalReport, TrainConfig, Trainer, evaluate, train_epoch
from dcnn.training.optim import OptimizerState, adamw_step

__all__ = [
    "CenterLossState",
    "Checkpoint",
    "EpochReport",
    "EvalReport",
    "OptimizerState",
    "TrainConfig",
    "Trainer",
    "adamw_step",
    "apply_checkpoint",
    "center_loss",
    "cross_entropy_loss",
    "evaluate",
    "load_checkpoint",
    "save_checkpoint",
    "topk_correct",
    "train_epoch",
]
