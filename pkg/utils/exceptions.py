"""
Exception hierarchy shared by every app.

Each family carries the process exit code the management commands use when
the error escapes a command (see utils/commands.py).
"""


class FewShotError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigurationError(FewShotError):
    """Invalid flags, run configuration or API preconditions."""

    exit_code = 2


class DataError(FewShotError):
    """Missing, malformed or inconsistent data on disk or in memory."""

    exit_code = 3


class NumericError(FewShotError):
    """NaN/Inf values or other numeric breakdowns."""

    exit_code = 4


class ShapeError(ConfigurationError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(NumericError):
    """A forward op or a loss produced NaN or Inf."""

    def __init__(self, message, *, tensor_name=None, episode=None):
        super().__init__(message)
        self.tensor_name = tensor_name
        self.episode = episode
