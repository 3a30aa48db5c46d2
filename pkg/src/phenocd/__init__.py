"""Bi-temporal change detection with a detector-constrainer design and
phenology-aware contrastive training, sized to run on a desk CPU."""
from .config import RunConfig, load_config
from .detector import ChangeDetector
from .errors import (ConfigError, IngestionError, NumericError, PhenoCDError, ShapeError,
                     ValidationError)

__version__ = "0.1.0"

__all__ = [
    "ChangeDetector", "ConfigError", "IngestionError", "NumericError", "PhenoCDError",
    "RunConfig", "ShapeError", "ValidationError", "load_config",
]
