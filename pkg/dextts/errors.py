"""
Exception hierarchy for dextts.

Each error also derives from the builtin the calling code would otherwise
raise, so callers that only know about ValueError/ArithmeticError keep working.
"""
from typing import Optional


class DexError(Exception):
    """Base class for all dextts errors."""


class DimensionError(DexError, ValueError):
    """Tensor extents do not fit the operation."""


class ContractError(DexError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(DexError, ValueError):
    """A configuration value is inconsistent with the model being built."""


class InputError(DexError, ValueError):
    """User supplied data (token ids, reference mels, files) is invalid."""


class InfeasibleAlignmentError(DexError, ValueError):
    """No monotonic surjective alignment exists (fewer frames than tokens)."""


class ExtentError(DexError, ValueError):
    """A learned embedding was asked for a position beyond its trained extent."""


class UsageError(DexError, ValueError):
    """An operation was invoked in a way its mode forbids."""


class CheckpointFormatError(DexError, ValueError):
    """A checkpoint or corpus file is truncated or has the wrong magic/version."""


class NumericError(DexError, ArithmeticError):
    """A non-finite value appeared. `where` names the op or loss component."""

    def __init__(self, message: str, where: Optional[str] = None):
        super().__init__(message)
        self.where = where


class TrainingDivergedError(DexError, RuntimeError):
    """Training loss exceeded the divergence threshold."""
