"""Point-cloud semantic segmentation: kernel-point convolution fused with
local/global self-attention, boundary-weighted cross-entropy, and a small
reverse-mode autodiff core."""

from cloudseg.config import (
    ConfigError,
    NetworkConfig,
    OptimizerConfig,
    PGAConfig,
    load_config,
)
from cloudseg.data_io import (
    DatasetManifest,
    LabelRemap,
    SceneSpec,
    default_remap,
    generate_scene,
    read_kitti_labels,
    read_kitti_scan,
    scene_preset,
    write_kitti_labels,
    write_kitti_scan,
    write_ply,
)
from cloudseg.geometry import (
    KernelDisposition,
    NeighborIndex,
    PointCloud,
    generate_kernel_disposition,
    knn_neighbors,
    nearest_upsample_map,
    radius_neighbors,
    sample_sphere,
    voxel_grid_subsample,
)
from cloudseg.loss_metrics import (
    confusion_matrix,
    format_iou_table,
    iou_per_class,
    mean_iou,
    overall_accuracy,
    pga_cross_entropy,
    pga_score,
    pga_weights,
)
from cloudseg.network import Model, Pyramid, build_pyramid
from cloudseg.trainer import (
    TrainLog,
    ablate,
    evaluate,
    predict_cloud,
    train,
    vote_probabilities,
)

__all__ = [
    # geometry
    "PointCloud",
    "NeighborIndex",
    "KernelDisposition",
    "voxel_grid_subsample",
    "radius_neighbors",
    "knn_neighbors",
    "sample_sphere",
    "nearest_upsample_map",
    "generate_kernel_disposition",
    # configuration
    "ConfigError",
    "NetworkConfig",
    "OptimizerConfig",
    "PGAConfig",
    "load_config",
    # data
    "DatasetManifest",
    "LabelRemap",
    "SceneSpec",
    "default_remap",
    "generate_scene",
    "scene_preset",
    "read_kitti_scan",
    "write_kitti_scan",
    "read_kitti_labels",
    "write_kitti_labels",
    "write_ply",
    # loss and metrics
    "pga_score",
    "pga_weights",
    "pga_cross_entropy",
    "confusion_matrix",
    "iou_per_class",
    "mean_iou",
    "overall_accuracy",
    "format_iou_table",
    # model and training
    "Model",
    "Pyramid",
    "build_pyramid",
    "TrainLog",
    "train",
    "evaluate",
    "predict_cloud",
    "vote_probabilities",
    "ablate",
]

__version__ = "0.1.0"
