"""Losses, optimization and the training loop."""
from .checkpoint import Checkpoint, CheckpointError
from .losses import l2_penalty, loss_closure, nll, regularized_nll
from .loop import IncompatibleData, TrainResult, evaluate, load_model, train
from .optim import AdamState, TrainConfig, adamw_step, lr_at

__all__ = ["AdamState", "Checkpoint", "CheckpointError", "IncompatibleData", "TrainConfig",
           "TrainResult", "adamw_step", "evaluate", "l2_penalty", "load_model", "loss_closure",
           "lr_at", "nll", "regularized_nll", "train"]
