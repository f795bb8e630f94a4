"""Dual dynamic graphs with hybrid metric training for cross-domain sequential recommendation."""
from .config import DataConfig, TrainConfig, load_config
from .model import DDGHM
from .training import train

__all__ = ["DDGHM", "DataConfig", "TrainConfig", "load_config", "train"]
__version__ = "0.1.0"
