"""Self-contained segmentation ML core: model, losses, optimizer."""

from .losses import (
    LossWeights,
    ce_loss,
    dice_loss,
    kl_loss,
    onehot_lastaxis,
    recon_loss,
    total_loss,
)
from .model import ModelConfig, SegModel, forward, init_weights
from .optim import OptimizerState, adam_step, cosine_lr
from .training import backward, loss_and_grads

__all__ = [
    "LossWeights",
    "ModelConfig",
    "OptimizerState",
    "SegModel",
    "adam_step",
    "backward",
    "ce_loss",
    "cosine_lr",
    "dice_loss",
    "forward",
    "init_weights",
    "kl_loss",
    "loss_and_grads",
    "onehot_lastaxis",
    "recon_loss",
    "total_loss",
]
