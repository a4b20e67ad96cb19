"""Differentially private training, label-DP, ensembles, and membership-inference evaluation on numpy."""

__version__ = "0.1.0"

from .errors import (AbstainError, BudgetError, CalibrationError, ConfigError, DomainError, DpmlBenchError,
                     FormatError, NumericError, SubspaceError)

__all__ = ["__version__", "AbstainError", "BudgetError", "CalibrationError", "ConfigError", "DomainError",
           "DpmlBenchError", "FormatError", "NumericError", "SubspaceError"]
