"""Exception hierarchy shared across the simulator."""


class AceSyncError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(AceSyncError, ValueError):
    pass


class ShapeError(AceSyncError, ValueError):
    pass


class NumericError(AceSyncError, ValueError):
    pass


class CapacityError(AceSyncError):
    """Raised when an exact solver instance exceeds its configured limits."""


class ProtocolError(AceSyncError):
    pass


class TraceParseError(AceSyncError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EndOfSimulation(AceSyncError):
    """The event queue is empty."""


class InvariantViolation(AceSyncError):
    pass


class IOFailure(AceSyncError, OSError):
    pass
