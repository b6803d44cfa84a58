"""Exception types shared across the package."""


class MetasimError(Exception):
    """Base class for all package-specific errors."""


class DomainError(MetasimError, ValueError):
    """Invalid input values or an operation outside its precondition."""


class ConvergenceError(MetasimError, RuntimeError):
    """An iterative routine exhausted its budget before meeting tolerance."""


class ShapeError(MetasimError, RuntimeError):
    """A density does not have the shape an algorithm requires.

    Raised when a highest-density interval is requested but the superlevel
    set at the solution cut is disconnected.
    """


class ParseError(MetasimError, ValueError):
    """Malformed input file. Carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
