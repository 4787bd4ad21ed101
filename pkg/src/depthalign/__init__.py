"""Toy-scale monocular depth estimation with adaptive depth bins.

The model classifies each pixel over an image-adaptive partition of the
depth range and reads depth out as the probability-weighted mix of bin
centers. A pyramid of transformer paths over the coarsest feature map
predicts the partition; training runs a local alignment stage and then
a global one that also matches the depth range. Drift diagnostics
compare predicted and reference depth distributions.
"""

from .bins import (
    BinPartition,
    BinProbabilityMap,
    DepthMap,
    DepthRange,
    bin_centers,
    combine,
    normalize_bin_widths,
)
from .data import (
    DatasetManifest,
    SceneConfig,
    SceneSample,
    apply_augmentation,
    augment,
    generate_dataset,
    generate_scene,
    hflip,
    load_manifest,
    read_sample,
    write_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    CorruptImageError,
    DataError,
    DepthOutOfRangeError,
    DivergenceError,
    ManifestError,
    MissingFileError,
    ShapeMismatchError,
    ValidationError,
)
from .losses import (
    GLOBAL_STAGE,
    LOCAL_STAGE,
    LossBreakdown,
    StageConfig,
    chamfer_bin_loss,
    depth_related_weights,
    minmax_loss,
    ssi_loss,
    total_loss,
)
from .metrics import (
    DepthHistogram,
    DriftReport,
    ErrorMetrics,
    depth_histogram,
    drift_report,
    error_map,
    range_deviation,
    standard_metrics,
    total_variation_distance,
)
from .network import (
    DepthEstimator,
    DepthPrediction,
    NetworkConfig,
    count_parameters,
    predict_sample,
)
from .pst import (
    AecGeometry,
    AdaptiveEmbedding,
    PyramidSceneTransformer,
    compute_aec_geometry,
    path_target_hw,
)
from .training import (
    EvaluationResult,
    OptimizerConfig,
    StageSchedule,
    TrainConfig,
    TrainResult,
    build_checkpoint,
    build_dataset,
    diagnose,
    evaluate,
    load_checkpoint,
    lr_for_epoch,
    restore_model,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptiveEmbedding",
    "AecGeometry",
    "BinPartition",
    "BinProbabilityMap",
    "CheckpointError",
    "ConfigError",
    "CorruptImageError",
    "DataError",
    "DatasetManifest",
    "DepthEstimator",
    "DepthHistogram",
    "DepthMap",
    "DepthOutOfRangeError",
    "DepthPrediction",
    "DepthRange",
    "DivergenceError",
    "DriftReport",
    "ErrorMetrics",
    "EvaluationResult",
    "GLOBAL_STAGE",
    "LOCAL_STAGE",
    "LossBreakdown",
    "ManifestError",
    "MissingFileError",
    "NetworkConfig",
    "OptimizerConfig",
    "PyramidSceneTransformer",
    "SceneConfig",
    "SceneSample",
    "ShapeMismatchError",
    "StageConfig",
    "StageSchedule",
    "TrainConfig",
    "TrainResult",
    "ValidationError",
    "apply_augmentation",
    "augment",
    "bin_centers",
    "build_checkpoint",
    "build_dataset",
    "chamfer_bin_loss",
    "combine",
    "compute_aec_geometry",
    "count_parameters",
    "depth_histogram",
    "depth_related_weights",
    "diagnose",
    "drift_report",
    "error_map",
    "evaluate",
    "generate_dataset",
    "generate_scene",
    "hflip",
    "load_checkpoint",
    "load_manifest",
    "lr_for_epoch",
    "minmax_loss",
    "normalize_bin_widths",
    "path_target_hw",
    "predict_sample",
    "range_deviation",
    "read_sample",
    "restore_model",
    "save_checkpoint",
    "ssi_loss",
    "standard_metrics",
    "total_loss",
    "total_variation_distance",
    "train",
    "write_dataset",
]
