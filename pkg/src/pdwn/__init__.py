"""Pyramid deformable warping network for video frame interpolation."""

from .config import ArchConfig, ConfigError
from .model import PDWN
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
__all__ = ["ArchConfig", "ConfigError", "PDWN", "TrainConfig", "evaluate", "train"]
