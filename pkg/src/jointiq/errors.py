"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class ConfigError(ValueError):
    """Bad or inconsistent configuration (unknown keys, mismatched model)."""


class DataError(ValueError):
    """Malformed input data: bad bitstream, bad image file, truncation."""


class NumericError(ArithmeticError):
    """Non-finite values or numeric failure during computation."""


class ShapeError(ValueError):
    """Operand shapes do not agree."""
