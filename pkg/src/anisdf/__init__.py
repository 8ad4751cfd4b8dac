"""Anisotropic neural SDF reconstruction with fused-granularity hash grids and blended radiance."""

from .model import AniSDFModel, ModelConfig
from .trainer import TrainConfig, load_config, train

__all__ = ["AniSDFModel", "ModelConfig", "TrainConfig", "load_config", "train"]
__version__ = "0.1.0"
