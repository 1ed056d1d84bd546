"""Exception types shared across the package."""


class DDKError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DDKError, ValueError):
    """Input contains NaN/Inf or is otherwise unusable."""


class DimensionError(DDKError, ValueError):
    """Shapes of the supplied arrays do not match the operation."""


class RankDeficiencyError(DDKError):
    """A matrix required to have full (row or column) rank does not."""


class AssumptionViolationError(DDKError):
    """A runtime-checkable precondition of the identification method failed."""


class ConditioningError(DDKError):
    """A linear solve was refused because the system is too ill-conditioned."""


class InsufficientDataError(DDKError):
    """The data stream is too short to form even one batch."""


class DivergenceError(DDKError):
    """Simulated state became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericalFailureError(DDKError):
    """A loss/gradient evaluation produced a non-finite value."""

    def __init__(self, message, term_index=None):
        super().__init__(message)
        self.term_index = term_index


class GraphConnectivityError(DDKError):
    """The communication graph is not strongly connected."""
