"""Function-aware neuron grouping for post-training structured pruning."""

from .errors import (
    ConfigError,
    DimensionError,
    FangError,
    FormatError,
    InputError,
    NumericalError,
    ParameterError,
    SingularityError,
    StageError,
)
from .model import Checkpoint, ModelConfig, init_model

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ConfigError",
    "DimensionError",
    "FangError",
    "FormatError",
    "InputError",
    "ModelConfig",
    "NumericalError",
    "ParameterError",
    "SingularityError",
    "StageError",
    "init_model",
]
