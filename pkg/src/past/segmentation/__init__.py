"""Volumetric segmentation: networks, Dice + cross-entropy losses, training
and patch-based inference."""

from .engine import (
    ARCHS,
    ProbMap,
    SegModel,
    SegTrainConfig,
    argmax_labels,
    load_segmodel,
    predict,
    predict_whole,
    save_segmodel,
    train_segmentation,
    write_train_log_csv,
)
from .losses import dice_ce_loss, gradcheck_losses, masked_cross_entropy, soft_dice_loss

__all__ = [
    "ARCHS",
    "ProbMap",
    "SegModel",
    "SegTrainConfig",
    "argmax_labels",
    "dice_ce_loss",
    "gradcheck_losses",
    "load_segmodel",
    "masked_cross_entropy",
    "predict",
    "predict_whole",
    "save_segmodel",
    "soft_dice_loss",
    "train_segmentation",
    "write_train_log_csv",
]
