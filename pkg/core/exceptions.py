"""Exception hierarchy shared by every rks app.

Each error carries the process exit code the management commands report for it:
2 for bad input data or configuration, 3 for numerical failures.
"""


class RksError(Exception):
    exit_code = 1


class DataError(RksError, ValueError):
    """Malformed, corrupt or inconsistent input."""

    exit_code = 2


class ConfigurationError(DataError):
    pass


class InsufficientLengthError(DataError):
    """The trajectory is too short for any requested subsequence length."""


class NumericalError(RksError, ArithmeticError):
    exit_code = 3


class NoInformationError(NumericalError):
    """Correspondence weights sum to (almost) zero."""


class DegenerateGeometryError(NumericalError):
    """All weighted points coincide, so no rotation is defined."""


class GradientUnavailableError(NumericalError):
    pass


class TrainingAbortedError(NumericalError):
    pass


class OptimisationError(NumericalError):
    pass


def parse_error(path, message, offset=None, line=None):
    """Build a DataError that names where in the file parsing failed."""
    where = ""
    if offset is not None:
        where = f" at byte offset {offset}"
    elif line is not None:
        where = f" at line {line}"
    return DataError(f"{path}: {message}{where}")
