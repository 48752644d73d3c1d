class HedgeError(Exception):
    """Base class for errors raised by rlhedge."""


class ValidationError(HedgeError, ValueError):
    """Invalid inputs or parameters."""


class NoSolutionError(HedgeError, ValueError):
    """A root-finding problem has no solution in the admissible range."""


class NumericError(HedgeError, ArithmeticError):
    """A numerical routine failed (non-convergence, NaN loss, ...)."""


class OutOfStepsError(HedgeError, IndexError):
    """Stepping past the end of an episode."""


class SchemaError(ValidationError):
    """An input file does not match the expected wire format."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.column = column


class NotFittedError(HedgeError, AttributeError):
    """An estimator was used before ``fit``."""
