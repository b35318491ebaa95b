"""Detection service for event-camera windows over a line-JSON protocol.

A client opens a connection, sends a ``hello`` describing the sensor
geometry and tensor layout, and then streams ``detect`` requests with
strictly increasing window indices.  Each request is tensorized into a
voxel grid, turned into an intensity frame by a reconstruction engine
(stateful across the session), and scanned for boxes by a detector.
"""

from .detect import BlobDetector, YoloV5Detector, build_detector
from .errors import BridgeBackendError, ConfigError, ModelError, RequestError
from .frames import dump_frame
from .protocol import (
    PROTOCOL_VERSION,
    decode_line,
    detections_reply,
    encode_message,
    error_reply,
    ready_reply,
    validate_detect,
    validate_hello,
)
from .reconstruct import (
    AccumulatorReconstructor,
    ReconstructedFrame,
    TorchscriptReconstructor,
    build_reconstructor,
)
from .server import (
    BackendConfig,
    BridgeServer,
    SessionStats,
    mock_serve,
    serve,
)
from .tensorize import voxel_grid

__version__ = "0.1.0"

__all__ = [
    "AccumulatorReconstructor",
    "BackendConfig",
    "BlobDetector",
    "BridgeBackendError",
    "BridgeServer",
    "ConfigError",
    "ModelError",
    "PROTOCOL_VERSION",
    "ReconstructedFrame",
    "RequestError",
    "SessionStats",
    "TorchscriptReconstructor",
    "YoloV5Detector",
    "build_detector",
    "build_reconstructor",
    "decode_line",
    "detections_reply",
    "dump_frame",
    "encode_message",
    "error_reply",
    "mock_serve",
    "ready_reply",
    "serve",
    "validate_detect",
    "validate_hello",
    "voxel_grid",
]
