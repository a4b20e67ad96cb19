"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so new error types should
subclass one of the four families below.
"""


class DpmlBenchError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(DpmlBenchError, ValueError):
    """Invalid configuration, shape mismatch, or malformed input."""

    exit_code = 2


class FormatError(ConfigError):
    """A data file does not follow its declared binary/text format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BudgetError(DpmlBenchError):
    """The requested work cannot fit inside the privacy budget."""

    exit_code = 3


class CalibrationError(BudgetError):
    """No noise multiplier in the search range meets the target."""


class NumericError(DpmlBenchError, ArithmeticError):
    """Non-finite values appeared during training or accounting."""

    exit_code = 4


class DomainError(DpmlBenchError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 2


class SubspaceError(NumericError):
    """Public gradients are degenerate and span no usable subspace."""


class AbstainError(DpmlBenchError):
    """A private query could not be answered (e.g. too few neighbours)."""
