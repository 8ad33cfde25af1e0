"""Two-stage distillation: frozen vision-language teacher -> intermediate teacher -> student."""

from dait.errors import (
    BackendError,
    ConfigError,
    ContractError,
    DaitError,
    DegenerateInputError,
    FreezeViolation,
    IngestionError,
    TrainingError,
)
from dait.schedule import ScheduleParams, lambda_at

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "ConfigError",
    "ContractError",
    "DaitError",
    "DegenerateInputError",
    "FreezeViolation",
    "IngestionError",
    "ScheduleParams",
    "TrainingError",
    "lambda_at",
]
