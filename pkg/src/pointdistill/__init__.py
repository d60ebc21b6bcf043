"""Structured knowledge distillation for point cloud feature encoders.

The pipeline voxelizes a scene, encodes per-voxel features with a frozen
teacher and a small trainable student, keeps only the most informative
candidates, and matches local KNN-graph features between the two sides under
an importance-weighted loss. Everything runs on float64 numpy arrays; the
neighbor-search kernels optionally compile with numba (see
POINTDISTILL_BACKEND).
"""

from ._kernels import ACTIVE_BACKEND
from .distill import (
    DistillConfig,
    DistillError,
    DistillState,
    StepMetrics,
    TrainSetup,
    build_state,
    distill_loss,
    evaluate,
    forward_pipeline,
    pipeline_backward,
    train,
    train_step,
    trainable_params,
)
from .encoders import (
    EncoderParams,
    TeacherArtifact,
    TeacherConfig,
    encoder_backward,
    encoder_forward,
    load_checkpoint,
    make_teacher,
    save_checkpoint,
)
from .graph import (
    GammaParams,
    build_edge_features,
    graph_conv_backward,
    graph_conv_forward,
    knn_bruteforce,
    knn_grid,
)
from .numerics import (
    BatchNormState,
    LinearParams,
    SgdMomentum,
    ShapeMismatchError,
    grad_check,
    softmax_temp,
)
from .pointcloud import PointCloud, SceneSpec, load_point_cloud, synth_scene, write_point_cloud
from .sampler import (
    ImportanceScores,
    SelectedSet,
    phi_entropy,
    point_importance,
    reweight_point,
    reweight_voxel,
    top_n_select,
    voxel_importance,
)
from .voxelizer import (
    GridConfig,
    VoxelGrid,
    count_histogram,
    single_point_fraction,
    voxel_input_features,
    voxelize,
)

__version__ = "0.1.0"

__all__ = [
    "ACTIVE_BACKEND",
    "BatchNormState",
    "DistillConfig",
    "DistillError",
    "DistillState",
    "EncoderParams",
    "GammaParams",
    "GridConfig",
    "ImportanceScores",
    "LinearParams",
    "PointCloud",
    "SceneSpec",
    "SelectedSet",
    "SgdMomentum",
    "ShapeMismatchError",
    "StepMetrics",
    "TeacherArtifact",
    "TeacherConfig",
    "TrainSetup",
    "VoxelGrid",
    "build_edge_features",
    "build_state",
    "count_histogram",
    "distill_loss",
    "encoder_backward",
    "encoder_forward",
    "evaluate",
    "forward_pipeline",
    "grad_check",
    "graph_conv_backward",
    "graph_conv_forward",
    "knn_bruteforce",
    "knn_grid",
    "load_checkpoint",
    "load_point_cloud",
    "make_teacher",
    "phi_entropy",
    "pipeline_backward",
    "point_importance",
    "reweight_point",
    "reweight_voxel",
    "save_checkpoint",
    "single_point_fraction",
    "softmax_temp",
    "synth_scene",
    "top_n_select",
    "train",
    "train_step",
    "trainable_params",
    "voxel_importance",
    "voxel_input_features",
    "voxelize",
    "write_point_cloud",
    "__version__",
]
