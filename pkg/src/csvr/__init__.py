"""Collaborative self-supervised video representation learning on a synthetic corpus."""

from .config import ModelConfig, TrainConfig, finetune_defaults, load_config
from .exceptions import (CSVRError, CheckpointFormatError, CheckpointVersionError, ConfigSyntaxError,
                         ConfigValueError, DataShapeError, GradientUnavailableError,
                         TrainingDivergedError, ZeroNormError)

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "TrainConfig", "finetune_defaults", "load_config",
    "CSVRError", "CheckpointFormatError", "CheckpointVersionError", "ConfigSyntaxError",
    "ConfigValueError", "DataShapeError", "GradientUnavailableError", "TrainingDivergedError",
    "ZeroNormError", "__version__",
]
