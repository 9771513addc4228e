"""Exception hierarchy shared across the package.

CLI exit codes map onto these classes: usage/config problems exit 2,
data and protocol problems exit 3, numeric aborts exit 4.
"""


class FingermatchError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FingermatchError):
    """Operand shapes are incompatible. Message names both shapes."""


class ConfigError(FingermatchError):
    """Invalid configuration value or inconsistent configuration."""


class UsageError(FingermatchError):
    """Bad CLI invocation (missing/conflicting arguments)."""


class DataError(FingermatchError):
    """Manifest or input-file problem (parse error, unreadable image)."""


class ProtocolError(FingermatchError):
    """Evaluation protocol cannot be run on the given data."""


class DegenerateEmbeddingError(FingermatchError):
    """A vector that must be normalized has zero norm."""


class NumericError(FingermatchError):
    """Non-finite value where finite values are required; aborts training."""
