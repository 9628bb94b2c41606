"""Toy-scale masked language models, an MAE-style encoder/decoder, and rank diagnostics."""

from .model import ModelConfig, forward, init_params, mlm_loss
from .rank import effective_rank, residual_decompose
from .tensor import Tensor, backward
from .train import TrainRunConfig, train_mlm

__all__ = [
    "ModelConfig",
    "Tensor",
    "TrainRunConfig",
    "backward",
    "effective_rank",
    "forward",
    "init_params",
    "mlm_loss",
    "residual_decompose",
    "train_mlm",
]
