"""Token-wise adaptive pondering for small decoder-only language models."""

__version__ = "0.1.0"

from .config import ModelConfig, PonderSettings, TrainConfig
from .model import PonderTransformer, init_parameters

__all__ = ["ModelConfig", "PonderSettings", "TrainConfig", "PonderTransformer", "init_parameters"]
