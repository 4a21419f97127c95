"""Decoder-only time-series forecaster with routed frequency-time experts."""

from .backbone import ConfigError, ModelConfig, MoFETime
from .objective import LossConfig
from .trainer import TrainConfig, finetune, grad_check, train

__all__ = ["ConfigError", "ModelConfig", "MoFETime", "LossConfig", "TrainConfig", "train",
           "finetune", "grad_check"]
__version__ = "0.1.0"
