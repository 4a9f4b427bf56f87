"""
Error taxonomy for the simulation harness.

Every error carries a machine-readable category and the exit code the CLI
uses when the error reaches the top level.
"""

from typing import Dict


class FedUPError(Exception):
    """Base class for all harness errors."""

    category = "internal"
    exit_code = 1


class ConfigurationError(FedUPError):
    """Invalid model, dataset or experiment configuration."""

    category = "configuration"
    exit_code = 2


class UsageError(FedUPError, ValueError):
    """An operation was called outside its preconditions."""

    category = "usage"
    exit_code = 3


class NumericalError(FedUPError, ArithmeticError):
    """Non-finite values appeared during training or evaluation."""

    category = "numerical"
    exit_code = 4


class UndefinedSimilarityError(NumericalError):
    """Cosine similarity requested for a zero-norm vector."""

    category = "undefined_similarity"


class IntegrityError(FedUPError):
    """Structural mismatch: incongruent models, out-of-bounds masks, disjointness violations."""

    category = "integrity"
    exit_code = 5


class CheckpointFormatError(IntegrityError):
    """A checkpoint or IDX file does not match its binary format."""


class StateError(FedUPError):
    """Server state does not allow the requested operation."""

    category = "state"
    exit_code = 6


class MajorityViolationError(FedUPError):
    """Malicious clients are not a strict minority."""

    category = "majority_violation"
    exit_code = 7


class OutputError(FedUPError):
    """Reading or writing a result file failed; the message names the path."""

    category = "io"
    exit_code = 8


def error_response(operation: str, error: Exception) -> Dict:
    """Build the JSON error document returned at the CLI boundary."""
    category = getattr(error, "category", "internal")
    return {
        "status": "error",
        "operation": operation,
        "category": category,
        "message": str(error),
    }
