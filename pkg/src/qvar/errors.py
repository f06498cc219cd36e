"""Exception hierarchy shared by all qvar modules.

The CLI maps these onto exit codes: data-shaped problems (parsing, domain
violations, insufficient or degenerate inputs, shape mismatches) exit 2,
optimizer failures exit 3.
"""


class QvarError(Exception):
    """Base class for all qvar errors."""


class ParseError(QvarError):
    """An input file could not be parsed; message carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DomainError(QvarError):
    """A value violates a domain constraint (non-positive price, theta outside (0,1), ...)."""


class InsufficientDataError(QvarError):
    """Not enough observations to perform the requested operation."""


class DegenerateDataError(QvarError):
    """Input data is degenerate (e.g. zero variance) for the requested operation."""


class ShapeError(QvarError):
    """Array lengths or channel counts do not line up."""


class FitError(QvarError):
    """An optimizer failed to produce a usable fit."""
