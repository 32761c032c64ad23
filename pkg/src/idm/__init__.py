"""Informative data mining for one-shot domain-adaptive semantic segmentation."""

from idm.errors import (
    ConfigurationError,
    ContractError,
    EvaluationError,
    IngestionError,
    TrainingError,
)

IGNORE_INDEX = 255

__version__ = "0.1.0"

__all__ = [
    "IGNORE_INDEX",
    "ConfigurationError",
    "ContractError",
    "EvaluationError",
    "IngestionError",
    "TrainingError",
    "__version__",
]
