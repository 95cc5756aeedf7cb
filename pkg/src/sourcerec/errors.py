"""Exception hierarchy shared by all sourcerec modules."""


class SourcerecError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(SourcerecError, ValueError):
    pass


class NotPositiveDefinite(SourcerecError, ArithmeticError):
    """Raised when a Cholesky pivot is non-positive.

    ``pivot`` is the index (in the permuted ordering) of the failing column.
    """

    def __init__(self, pivot, value=None, message=None):
        self.pivot = int(pivot)
        self.value = value
        if message is None:
            message = f"matrix is not positive definite (pivot {self.pivot}"
            if value is not None:
                message += f", value {value:.3e}"
            message += ")"
        super().__init__(message)


class SingularOperator(SourcerecError, ArithmeticError):
    pass


class InvalidExtent(SourcerecError, ValueError):
    pass


class UnsupportedAlpha(SourcerecError, ValueError):
    pass


class InvalidStep(SourcerecError, ValueError):
    pass


class LocationOutsideMesh(SourcerecError, ValueError):
    pass


class ConfigInvalid(SourcerecError, ValueError):
    """Configuration error, carrying optional line/field diagnostics."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
