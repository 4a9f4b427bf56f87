"""
FedUP simulation harness: federated training with colluding poisoning
clients, pruning-based unlearning of detected clients, recovery and the
comparison baselines.
"""

from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    FedUPError,
    IntegrityError,
    MajorityViolationError,
    NumericalError,
    OutputError,
    StateError,
    UndefinedSimilarityError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointFormatError",
    "ConfigurationError",
    "FedUPError",
    "IntegrityError",
    "MajorityViolationError",
    "NumericalError",
    "OutputError",
    "StateError",
    "UndefinedSimilarityError",
    "UsageError",
]
