"""Category-level 9D object pose from dense 2D-3D correspondences to deformable prototype meshes."""

from .geometry import (
    CameraIntrinsics,
    CategoryPrototype,
    Pose9D,
    SceneGroundTruth,
    build_prototype_set,
    default_intrinsics,
)
from .features import FeatureMap, VertexBank, contrastive_loss, contrastive_loss_grad, match_correspondences
from .solver import SolverParams, multi_model_pnp, ransac_pnp
from .refine import RefinementParams, RefinementProblem, refine_instance
from .metrics import MetricsReport, aggregate_map, evaluate_scene, iou3d, niou
from .sim import SimConfig, simulate
from .pipeline import PipelineParams, detect_and_refine, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CategoryPrototype",
    "FeatureMap",
    "MetricsReport",
    "PipelineParams",
    "Pose9D",
    "RefinementParams",
    "RefinementProblem",
    "SceneGroundTruth",
    "SimConfig",
    "SolverParams",
    "VertexBank",
    "aggregate_map",
    "build_prototype_set",
    "contrastive_loss",
    "contrastive_loss_grad",
    "default_intrinsics",
    "detect_and_refine",
    "evaluate_scene",
    "iou3d",
    "match_correspondences",
    "multi_model_pnp",
    "niou",
    "ransac_pnp",
    "refine_instance",
    "run_pipeline",
    "simulate",
]
