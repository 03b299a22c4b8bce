"""Toy-scale multi-modal, multi-view driving-video diffusion built on a small numpy autodiff engine."""

from .errors import (ConfigError, ContractError, FormatError, MMVDError, NumericDomainError, ShapeError,
                     TrainingDivergenceError, UndefinedMetricError, VocabularyError)
from .pipeline import MODALITIES, DiffusionModel, ModelConfig
from .tensor import Parameter, Tape, Tensor
from .training import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DiffusionModel", "FormatError", "MMVDError", "MODALITIES",
    "ModelConfig", "NumericDomainError", "Parameter", "ShapeError", "Tape", "Tensor", "TrainConfig",
    "Trainer", "TrainingDivergenceError", "UndefinedMetricError", "VocabularyError",
]
