"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Anything else is a bug and escapes as-is.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Input data violates a precondition (coverage, support, sample)."""


class NumericError(ArithmeticError):
    """A numeric routine failed to produce a usable result."""
