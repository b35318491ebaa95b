"""Exception taxonomy for the backend server."""


class BridgeBackendError(Exception):
    """Base class for everything raised on purpose by this package."""


class ConfigError(BridgeBackendError):
    """Invalid configuration (bad flag value, unloadable model, ...)."""


class RequestError(BridgeBackendError):
    """A request that violates the wire contract.

    Carries the request index so the error reply can echo it; ``k`` is -1
    when the offending request had no usable index.
    """

    def __init__(self, message: str, k: int = -1):
        super().__init__(message)
        self.k = k


class ModelError(BridgeBackendError):
    """Reconstruction or detection failed at inference time."""
