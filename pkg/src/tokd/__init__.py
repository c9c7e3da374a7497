"""Token-disentangled transformer for novel-view synthesis, on a small numpy autodiff engine."""
from .blocks import BlockVariant
from .errors import (ArgumentError, ConfigError, DataError, DatasetIOError, DimensionError, FormatError,
                     GeometryError, NumericError, TokdError, ValidationError)
from .model import PAPER_CONFIG, TINY_CONFIG, ModelConfig, forward, forward_with_features, init_params

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "BlockVariant", "ConfigError", "DataError", "DatasetIOError", "DimensionError", "FormatError",
    "GeometryError", "ModelConfig", "NumericError", "PAPER_CONFIG", "TINY_CONFIG", "TokdError", "ValidationError",
    "forward", "forward_with_features", "init_params",
]
