"""Adaptive cloud-edge synchronization simulator."""

from .errors import (AceSyncError, CapacityError, ConfigurationError, EndOfSimulation,
                     InvariantViolation, IOFailure, NumericError, ProtocolError, ShapeError,
                     TraceParseError)

__version__ = "0.1.0"
