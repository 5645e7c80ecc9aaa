"""diffusecal: spatial response-map calibration for diffuse (wide-IFOV)
time-of-flight LiDAR against a co-located RGB camera.

The package estimates, for each LiDAR pixel, where in the RGB image plane
the pixel is sensitive (its effective support) and how strongly (relative
spatial weights), from a scanned retroreflective-patch dataset. A forward
simulator generates synthetic datasets with known ground truth so the
whole pipeline is verifiable without hardware.
"""

from .core import (
    GridSpec,
    RgbFrameSpec,
    SensorConfig,
    snake_cell_to_index,
    snake_index_to_cell,
)
from .errors import (
    CalibrationError,
    ConfigError,
    ConsistencyError,
    DatasetError,
    DegenerateMapError,
    NoSignalError,
    UndefinedIouError,
)
from .histogram import (
    BinWindow,
    HistogramCube,
    auto_select_window,
    patch_response,
    patch_responses,
    peak_normalize,
)
from .patch_detect import (
    CircleCandidate,
    HoughParams,
    PatchDetection,
    detect_patch,
    gradient_field,
    hough_circles,
    to_grayscale,
)
from .response_map import (
    ConsistencyReport,
    ResponseMap,
    SupportMask,
    assemble_map,
    centroid,
    compare_modes,
    cosine_similarity,
    iou,
    peak_normalize_map,
    support_mask,
)
from .simulator import (
    GaussianComponent,
    KernelBank,
    SceneSpec,
    SimConfig,
    apply_noise,
    default_kernel_bank,
    eval_kernel,
    render_frame,
    render_transient,
    simulate_scan,
)

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "RgbFrameSpec",
    "SensorConfig",
    "snake_cell_to_index",
    "snake_index_to_cell",
    "CalibrationError",
    "ConfigError",
    "ConsistencyError",
    "DatasetError",
    "DegenerateMapError",
    "NoSignalError",
    "UndefinedIouError",
    "BinWindow",
    "HistogramCube",
    "auto_select_window",
    "patch_response",
    "patch_responses",
    "peak_normalize",
    "CircleCandidate",
    "HoughParams",
    "PatchDetection",
    "detect_patch",
    "gradient_field",
    "hough_circles",
    "to_grayscale",
    "ConsistencyReport",
    "ResponseMap",
    "SupportMask",
    "assemble_map",
    "centroid",
    "compare_modes",
    "cosine_similarity",
    "iou",
    "peak_normalize_map",
    "support_mask",
    "GaussianComponent",
    "KernelBank",
    "SceneSpec",
    "SimConfig",
    "apply_noise",
    "default_kernel_bank",
    "eval_kernel",
    "render_frame",
    "render_transient",
    "simulate_scan",
    "__version__",
]
