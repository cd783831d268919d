"""Exception hierarchy shared by every module."""


class MigflowError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    exit_code = 1


class StructuralError(MigflowError):
    """Shapes, indices or supports that cannot describe a valid problem."""

    exit_code = 3


class DomainError(MigflowError, ValueError):
    """A value outside the mathematical domain of an operation."""

    exit_code = 4


class ConvergenceError(MigflowError):
    """An iterative procedure stopped before reaching its tolerance."""

    exit_code = 5

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class EstimationError(MigflowError):
    """Not enough (or degenerate) data to estimate a quantity."""

    exit_code = 6


class IngestionError(MigflowError):
    """Malformed, missing or inconsistent input files."""

    exit_code = 7


class GapError(MigflowError):
    """A required time series has missing years."""

    exit_code = 8


class NumericError(MigflowError, FloatingPointError):
    """Non-finite values appeared where finite ones are required."""

    exit_code = 9


class UsageError(MigflowError):
    """An API object was used outside its contract (e.g. reusing a tape)."""

    exit_code = 10


class RunError(MigflowError):
    """A training or estimation run failed part-way."""

    exit_code = 11
