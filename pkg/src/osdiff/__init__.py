"""Toy-scale one-step diffusion image codec."""

from .codec import compress, decompress
from .model import ModelConfig, OSDiffModel

__all__ = ["compress", "decompress", "ModelConfig", "OSDiffModel"]
__version__ = "0.1.0"
