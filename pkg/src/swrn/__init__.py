"""Sliding-window recurrent network for x4 video super-resolution, in numpy."""
from .errors import (ChecksumError, ConfigurationError, ContractViolation, FormatError,
                     ManifestError, QuantOverflow, SWRNError, TrainingDivergence)
from .model import ModelConfig, Parameters, forward, init_params, param_count
from .recurrence import run_clip
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ChecksumError", "ConfigurationError", "ContractViolation", "FormatError", "ManifestError",
    "QuantOverflow", "SWRNError", "TrainingDivergence", "ModelConfig", "Parameters", "forward",
    "init_params", "param_count", "run_clip", "TrainConfig", "train",
]
