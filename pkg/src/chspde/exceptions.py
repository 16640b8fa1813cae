"""Exception hierarchy used across the package."""


class CHSPDEError(Exception):
    """Base class for all package errors."""


class ParameterError(CHSPDEError, ValueError):
    """Invalid construction parameter (dimension, length, coefficients, ...)."""


class DomainError(CHSPDEError, ValueError):
    """Operation undefined on the given input, e.g. a negative power of A on a field with mass."""


class UndersamplingError(CHSPDEError, ValueError):
    """Collocation grid too coarse for the requested transform or projection."""


class RegularityError(CHSPDEError, ValueError):
    """Noise covariance fails the declared regularity condition."""


class ResourceError(CHSPDEError, RuntimeError):
    """Requested allocation exceeds the configured memory cap."""


class StepsizeError(CHSPDEError, ValueError):
    """Time step violates the solvability restriction of the implicit scheme."""

    def __init__(self, message, dt=None, bound=None):
        super().__init__(message)
        self.dt = dt
        self.bound = bound


class SolverError(CHSPDEError, RuntimeError):
    """Nonlinear solve failed (divergence or iteration budget exhausted)."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class StepFailure(SolverError):
    """A time step of a trajectory could not be completed."""

    def __init__(self, message, step, residual=float("nan"), iterations=0):
        super().__init__(message, residual=residual, iterations=iterations)
        self.step = step


class StudyAborted(CHSPDEError, RuntimeError):
    """Too many paths failed during a Monte Carlo study."""

    def __init__(self, message, failed_paths=()):
        super().__init__(message)
        self.failed_paths = tuple(failed_paths)


class ConfigError(CHSPDEError, ValueError):
    """Configuration document failed validation; ``field`` is the dotted path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
