"""Lightweight audio-visual target speaker separation with heat-diffusion attention."""
from .config import ModelConfig, RunConfig
from .numerics import ConfigError

__version__ = "0.1.0"
