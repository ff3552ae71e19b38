"""Bilevel data selection with a learned score model, sized for a single CPU."""

from .config import Config, ConfigError, load_config
from .pipeline import run, run_experiment

__all__ = ["Config", "ConfigError", "load_config", "run", "run_experiment"]
__version__ = "0.1.0"
