"""Outlier Exposure training and evaluation for classification under distribution shift."""

from .autodiff import Adam, Tensor, backward, grad_check
from .models import CnnConfig, MlpConfig, build_cnn, build_mlp, extract_activations, predict

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CnnConfig",
    "MlpConfig",
    "Tensor",
    "backward",
    "build_cnn",
    "build_mlp",
    "extract_activations",
    "grad_check",
    "predict",
]
