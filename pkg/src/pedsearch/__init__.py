"""Desk-scale text-based person search training pipeline."""

__version__ = "0.1.0"

from .config import TrainConfig
from .encoders import EncoderConfig
from .tensor import Tensor

__all__ = ["Tensor", "TrainConfig", "EncoderConfig", "__version__"]
