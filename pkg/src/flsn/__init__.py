"""FLSN: single-frame structured-illumination super-resolution on numpy."""
from .model import FLSN, ModelConfig
from .synth import NoiseConfig, OpticsConfig
from .train import TrainConfig

__version__ = "0.1.0"
__all__ = ["FLSN", "ModelConfig", "NoiseConfig", "OpticsConfig", "TrainConfig", "__version__"]
