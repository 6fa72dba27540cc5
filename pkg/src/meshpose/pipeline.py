"""Inference: dense matching, multi-instance PnP, then per-instance 9D refinement."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .features import (
    DEFAULT_T1,
    DEFAULT_T2,
    CorrespondenceSet,
    FeatureMap,
    VertexBank,
    match_correspondences,
)
from .geometry import CameraIntrinsics, CategoryPrototype, Pose9D
from .refine import RefinementParams, RefinementProblem, refine_instance, unrefined_pose
from .solver.ransac import PoseHypothesis, SolverParams, multi_model_pnp


@dataclass(frozen=True)
class PipelineParams:
    t1: float = DEFAULT_T1
    t2: float = DEFAULT_T2
    solver: SolverParams = field(default_factory=SolverParams)
    refinement: RefinementParams = field(default_factory=RefinementParams)
    refine: bool = True
    # Refinement support must have been an inlier of the detection in the
    # category-level map; False tests each instance-map correspondence's own
    # residual instead.
    inliers_from_detection: bool = True
    seed: int = 0


@dataclass(frozen=True, eq=False)
class PipelineResult:
    poses: tuple[Pose9D, ...]
    hypotheses: tuple[PoseHypothesis, ...]
    correspondences: CorrespondenceSet  # category-level matches the hypotheses index into


def detect_and_refine(
    mean_map: FeatureMap,
    instance_map: FeatureMap,
    K: CameraIntrinsics,
    prototypes: Mapping[str, CategoryPrototype],
    params: PipelineParams = PipelineParams(),
    bank: VertexBank | None = None,
) -> PipelineResult:
    bank = VertexBank(prototypes) if bank is None else bank
    corr = match_correspondences(mean_map, bank, params.t1, params.t2)
    hyps = multi_model_pnp(corr, prototypes, K, params.solver, params.seed)
    if not params.refine:
        poses = [unrefined_pose(h.category, h.rotation, h.translation, prototypes[h.category].metric_vertices)
                 for h in hyps]
        return PipelineResult(tuple(poses), tuple(hyps), corr)
    inst = match_correspondences(instance_map, bank, params.t1, params.t2)
    mask = instance_map.heatmap >= params.t1
    poses = []
    for h in hyps:
        proto = prototypes[h.category]
        reference = corr.subset(h.inliers) if params.inliers_from_detection else None
        problem = RefinementProblem(
            K, h.category, h.rotation, h.translation,
            inst.for_category(h.category), proto.metric_vertices, mask, reference,
        )
        poses.append(refine_instance(problem, params.refinement))
    return PipelineResult(tuple(poses), tuple(hyps), corr)


def run_pipeline(observation, prototypes, params: PipelineParams = PipelineParams(), bank=None) -> list[Pose9D]:
    """Poses for a simulated observation, using only its feature maps and camera."""
    K = observation.gt.intrinsics
    res = detect_and_refine(
        observation.mean_scale_map, observation.instance_scale_map, K, prototypes, params, bank
    )
    return list(res.poses)
