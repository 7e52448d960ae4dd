"""Encoder-decoder model, trainer, hyperparameter search and linear baseline."""

from .network import INPUT_MODES, SKIP_STYLES, ModelSpec, UNet, prepare_input
from .train import (
    EarlyStopping,
    ModelState,
    TrainConfig,
    evaluate_loss,
    forward,
    median_r2,
    predict,
    train,
)
from .baseline import LinearBaseline, linreg_baseline
from .checkpoint import load_checkpoint, save_checkpoint
from .search import HyperSpace, hypersearch, sample_hyperparameters

__all__ = [
    "INPUT_MODES",
    "SKIP_STYLES",
    "ModelSpec",
    "UNet",
    "prepare_input",
    "EarlyStopping",
    "ModelState",
    "TrainConfig",
    "evaluate_loss",
    "forward",
    "median_r2",
    "predict",
    "train",
    "LinearBaseline",
    "linreg_baseline",
    "load_checkpoint",
    "save_checkpoint",
    "HyperSpace",
    "hypersearch",
    "sample_hyperparameters",
]
