"""Exception hierarchy shared by all modules."""


class GpssmError(Exception):
    """Base class for errors raised by vgpssm."""


class InvalidArgumentError(GpssmError, ValueError):
    """An argument has the wrong shape, range or value."""


class ConfigurationError(GpssmError, ValueError):
    """A model or training configuration is inconsistent."""


class SingularMatrixError(GpssmError, ArithmeticError):
    """Cholesky factorization failed even after jitter escalation."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class DegenerateWeightsError(GpssmError, ArithmeticError):
    """Every particle received zero weight at some time step."""

    def __init__(self, message, time_index):
        super().__init__(message)
        self.time_index = time_index


class NumericalError(GpssmError, ArithmeticError):
    """A non-finite value appeared in a gradient or objective."""

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class ResourceError(GpssmError, MemoryError):
    """A requested computation exceeds the configured size limits."""
