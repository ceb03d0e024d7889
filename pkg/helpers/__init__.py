"""
Helper utilities for the SAMIRO lab.

This package contains the exception families, shared constants, tensor
containers and report writers used throughout the lab.
"""

from .constants import (
    ABLATION_SETTINGS,
    DEFAULT_IOU_THRESHOLD,
    DEFAULT_LAMBDA,
    DEFAULT_LANE_WIDTH,
    EXIT_CHECK,
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    LOSS_VARIANTS,
    NORM_MODES,
)

# Import exceptions
from .exceptions import (
    CheckFailure,
    CheckpointError,
    DataError,
    DatasetIOError,
    DimensionError,
    DivideByZeroError,
    GenerationError,
    GradientError,
    IncompatibleCheckpointError,
    ParseError,
    TensorError,
    TrainingError,
)

# Version info
__version__ = "1.0.0"

__all__ = [
    # Add exceptions to __all__
    "CheckFailure",
    "CheckpointError",
    "DataError",
    "DatasetIOError",
    "DimensionError",
    "DivideByZeroError",
    "GenerationError",
    "GradientError",
    "IncompatibleCheckpointError",
    "ParseError",
    "TensorError",
    "TrainingError",
    # Add constants to __all__
    "ABLATION_SETTINGS",
    "DEFAULT_IOU_THRESHOLD",
    "DEFAULT_LAMBDA",
    "DEFAULT_LANE_WIDTH",
    "EXIT_CHECK",
    "EXIT_DATA",
    "EXIT_OK",
    "EXIT_USAGE",
    "LOSS_VARIANTS",
    "NORM_MODES",
]
