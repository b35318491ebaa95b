"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration and I/O problems exit 1,
runtime pipeline failures exit 2, bridge transport/protocol failures exit 3.
"""


class EvtrackError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(EvtrackError):
    """Invalid configuration value or file."""


class ParseError(EvtrackError):
    """Malformed event record in a text or binary stream."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class BoundsError(EvtrackError):
    """Event coordinate outside the declared sensor geometry."""


class OrderingError(EvtrackError):
    """Event or measurement timestamps out of order."""

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (index {index})")
        self.index = index


class RangeError(EvtrackError):
    """Query or evaluation interval not covered by the available data."""


class FilterError(EvtrackError):
    """Numerical failure inside the state estimator."""


class UndefinedMetricError(EvtrackError):
    """Metric requested over an empty or degenerate evaluation set."""


class BridgeError(EvtrackError):
    """Base class for detector-bridge failures."""


class BridgeConnectionError(BridgeError):
    """Transport-level failure talking to a detection backend."""


class BridgeProtocolError(BridgeError):
    """Backend sent a malformed or out-of-order protocol message."""
