"""Command-line orchestration of generation, training, evaluation and sweeps."""

from .config import ExperimentConfig
from .main import main

__all__ = ["ExperimentConfig", "main"]
