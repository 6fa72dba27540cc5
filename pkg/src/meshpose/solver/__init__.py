from .common import BEHIND_CAMERA_RESIDUAL, reprojection_residual, residuals
from .epnp import solve_epnp
from .p3p import solve_p3p
from .ransac import (
    PoseHypothesis,
    SolverParams,
    hypotheses_to_jsonl,
    multi_model_pnp,
    ransac_pnp,
)

__all__ = [
    "BEHIND_CAMERA_RESIDUAL",
    "PoseHypothesis",
    "SolverParams",
    "hypotheses_to_jsonl",
    "multi_model_pnp",
    "ransac_pnp",
    "reprojection_residual",
    "residuals",
    "solve_epnp",
    "solve_p3p",
]
