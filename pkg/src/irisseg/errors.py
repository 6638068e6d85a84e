"""Exception taxonomy shared by all irisseg modules.

The CLI maps these onto exit codes: config errors -> 2, data errors -> 3,
numerical failures -> 4.
"""


class IrisSegError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(IrisSegError):
    """Operands have inconsistent or unsupported shapes."""


class ConfigError(IrisSegError):
    """A configuration value is missing, malformed, or infeasible."""


class DataError(IrisSegError):
    """A dataset file or manifest is missing, malformed, or inconsistent."""


class StateError(IrisSegError):
    """Mutable state (gradients, optimizer buffers) is not in the expected shape."""


class NumericsError(IrisSegError):
    """A forward or backward pass produced a non-finite value."""


class DivergenceError(NumericsError):
    """Training produced a non-finite loss; carries the epoch/step it happened at."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class NoBoundaryFound(IrisSegError):
    """The boundary detector's peak objective fell below the acceptance floor."""
