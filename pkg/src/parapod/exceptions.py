"""Exception hierarchy for parapod."""


class ParapodError(Exception):
    """Base class for all errors raised by parapod."""


class ConfigurationError(ParapodError, ValueError):
    """Invalid problem, grid, time-partition or run configuration.

    ``field`` names the offending configuration entry when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class AssemblyError(ParapodError):
    """Non-finite coefficients met while assembling a discrete system."""


class SolverError(ParapodError):
    """A linear solve failed or did not meet its residual contract."""

    def __init__(self, message, residual=None, context=None):
        super().__init__(message)
        self.residual = residual
        self.context = context or {}


class DimensionMismatchError(ParapodError, ValueError):
    pass


class PODError(ParapodError):
    pass


class EmptySpectrumError(PODError):
    """The snapshot Gram matrix has no eigenvalue above the rank cut."""


class SnapshotDataError(PODError, ValueError):
    """Snapshot data contains NaN or inf."""


class DegenerateInputError(PODError):
    """A vector with zero M-norm cannot be normalized."""


class ConsistencyError(ParapodError):
    """An internal bookkeeping invariant was violated."""


class MetricError(ParapodError, ValueError):
    """A relative metric was requested against a zero reference."""


class DiagnosticsUnavailableError(ParapodError):
    pass
