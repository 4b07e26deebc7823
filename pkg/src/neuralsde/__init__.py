"""Neural SDEs whose diffusion grows with a learned distance to the training data."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    ContractViolation,
    IntegrationDiverged,
    NeuralSdeError,
    TrainingDiverged,
)

__all__ = [
    "__version__",
    "ConfigurationError",
    "ContractViolation",
    "IntegrationDiverged",
    "NeuralSdeError",
    "TrainingDiverged",
]
