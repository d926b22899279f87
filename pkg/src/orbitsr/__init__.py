"""Tiled single-image super-resolution with residual dense non-local attention."""

from .model import PAPER, TOY, ModelConfig, build_model, forward, load_weights, save_weights
from .pipeline import run_pipeline, super_resolve

__version__ = "0.1.0"

__all__ = ["ModelConfig", "TOY", "PAPER", "build_model", "forward", "load_weights",
           "save_weights", "super_resolve", "run_pipeline", "__version__"]
