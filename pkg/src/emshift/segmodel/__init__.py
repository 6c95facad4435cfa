"""Differentiable pixel classifiers and their training loop."""

from .model import (
    LinearSegModel,
    ModelSpec,
    SegModel,
    UNetSegModel,
    build_model,
    load_model,
    predict,
    save_model,
)
from .train import (
    PlateauController,
    TrainCurve,
    TrainSchedule,
    dice_coeff,
    dice_loss_and_grad,
    gradient_check,
    train,
)

__all__ = [
    "LinearSegModel", "ModelSpec", "SegModel", "UNetSegModel", "build_model", "load_model",
    "predict", "save_model", "PlateauController", "TrainCurve", "TrainSchedule", "dice_coeff",
    "dice_loss_and_grad", "gradient_check", "train",
]
