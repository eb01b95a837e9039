"""Exception types raised across the toolkit."""


class StochLoheError(Exception):
    """Base class for all toolkit errors."""


class DomainError(StochLoheError, ValueError):
    """An argument lies outside the closed unit ball or the unit circle."""


class StepRejectionExhausted(StochLoheError):
    """Step halving could not keep an interior trajectory inside the ball."""

    def __init__(self, message, t=None, stream_id=None):
        super().__init__(message)
        self.t = t
        self.stream_id = stream_id


class MassDefectError(StochLoheError):
    """A field lost or gained more L2 mass in one step than allowed."""


class UnderflowError(StochLoheError, ArithmeticError):
    """A probability underflowed even after log-domain rescaling."""


class BinMismatch(StochLoheError, ValueError):
    """Two binned laws do not share a common binning."""


class TimestampMismatch(StochLoheError, ValueError):
    """Two paths were not recorded on the same time stamps."""


class NoiseFloorError(StochLoheError):
    """Too few total-variation values lie above the sampling noise floor."""


class QuadratureError(StochLoheError, ArithmeticError):
    """Two independent quadrature routes disagree beyond tolerance."""


class ConfigError(StochLoheError, ValueError):
    """An experiment configuration is malformed or fails validation."""
