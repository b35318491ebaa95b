"""Event-camera tracking toolkit.

Fixed-count event windowing, voxel-grid tensorization, pluggable detection
(groundtruth oracle or an external backend over a line-JSON protocol), an
asynchronous Kalman tracker, a contrast-threshold scene simulator, and the
matching evaluation metrics.
"""

from ._kernels import USING_NUMBA, NUMBA_ENV_FLAG
from .detection import (
    BridgeClient,
    Detection,
    DetectorOutcome,
    Measurement,
    MeasurementNoise,
    OracleConfig,
    OracleDetector,
    bridge_detect,
    oracle_detect,
    select_measurement,
)
from .errors import (
    BoundsError,
    BridgeConnectionError,
    BridgeError,
    BridgeProtocolError,
    ConfigError,
    EvtrackError,
    FilterError,
    OrderingError,
    ParseError,
    RangeError,
    UndefinedMetricError,
)
from .events import (
    EVENT_DTYPE,
    CountWindower,
    Event,
    EventTensor,
    EventWindow,
    SensorGeometry,
    WindowConfig,
    build_event_tensor,
    events_array,
    parse_event_stream,
    read_events,
    window_by_count,
    write_events,
)
from .logs import (
    WindowDetections,
    read_detection_log,
    read_estimate_log,
    write_detection_log,
    write_estimate_log,
)
from .metrics import (
    BBox,
    EstimateTrace,
    EvalWindow,
    FrameEval,
    PrecisionRecall,
    build_frames,
    build_report,
    detection_coverage,
    error_cov,
    error_gt,
    iou,
    precision_recall,
    precision_recall_frames,
)
from .simulate import (
    ConstantVelocity,
    DiskTarget,
    DriftingTexture,
    GroundTruth,
    SceneConfig,
    Sinusoidal,
    Waypoints,
    groundtruth_center,
    load_scene_config,
    scene_from_dict,
    simulate_scene,
)
from .tracker import (
    CHI2_GATE_99,
    KalmanTracker,
    MotionModel,
    PipelineConfig,
    PipelineResult,
    StateEstimate,
    fixed_prior,
    measurement_prior,
    predict,
    query,
    run_pipeline,
    transition,
    update,
)

__version__ = "0.1.0"
