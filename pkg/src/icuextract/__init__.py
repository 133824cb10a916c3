"""Reproducible extraction of hourly ICU time series, interventions and benchmark samples."""

from .resources import ExtractConfig, load_config

__version__ = "0.1.0"

__all__ = ["ExtractConfig", "load_config", "__version__"]
