"""Instance-level 9D refinement: deformation first, then rotation and translation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConvergenceWarning, InsufficientSupportError
from .geometry import CameraIntrinsics, Pose9D, bounding_box_size, nearest_rotation, skew, so3_exp
from .solver.common import residuals

MIN_SUPPORT = 6


@dataclass(frozen=True)
class RefinementParams:
    pixel_threshold: float = 4.0
    t2: float = 0.7
    max_iterations: int = 100
    rtol: float = 1e-10
    huber: bool = False


@dataclass(frozen=True)
class LMResult:
    x: object
    cost: float
    initial_cost: float
    iterations: int
    converged: bool


def _project_with_jacobian(K: CameraIntrinsics, Xc: np.ndarray):
    """Pixels (N, 2) and d(pixel)/d(Xc) (N, 2, 3)."""
    X, Y, Z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    uv = np.stack([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy], axis=1)
    J = np.zeros((len(Xc), 2, 3))
    J[:, 0, 0] = K.fx / Z
    J[:, 0, 2] = -K.fx * X / Z**2
    J[:, 1, 1] = K.fy / Z
    J[:, 1, 2] = -K.fy * Y / Z**2
    return uv, J


def _robust_weights(r: np.ndarray, delta: float | None) -> np.ndarray:
    """Per-point IRLS weights for a Huber kernel on the 2D residual norm."""
    e = np.linalg.norm(r.reshape(-1, 2), axis=1)
    if delta is None:
        return np.ones_like(e)
    return np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))


def _robust_cost(r: np.ndarray, delta: float | None) -> float:
    e = np.linalg.norm(r.reshape(-1, 2), axis=1)
    if delta is None:
        return float(np.sum(e**2))
    return float(np.sum(np.where(e <= delta, e**2, 2 * delta * e - delta**2)))


def levenberg_marquardt(
    evaluate: Callable,
    x0,
    apply_step: Callable,
    max_iterations: int = 100,
    rtol: float = 1e-10,
    huber_delta: float | None = None,
) -> LMResult:
    """Minimize a sum of squared 2D residuals.

    `evaluate(x)` returns (residuals (2N,), Jacobian (2N, P)) or None if `x` is
    infeasible; `apply_step(x, step)` returns the updated state. Only steps that
    lower the cost are accepted, so the final cost never exceeds the initial one.
    """
    x = x0
    r, J = evaluate(x)
    cost = _robust_cost(r, huber_delta)
    initial = cost
    lam = None
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        if cost == 0.0:
            converged = True
            break
        w = np.repeat(_robust_weights(r, huber_delta), 2)
        A = J.T @ (w[:, None] * J)
        g = J.T @ (w * r)
        diag = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1e-300))
        if lam is None:
            lam = 1e-3
        improved = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = apply_step(x, step)
            out = evaluate(x_new)
            if out is not None:
                r_new, J_new = out
                cost_new = _robust_cost(r_new, huber_delta)
                if cost_new < cost:
                    improved = True
                    break
            lam *= 10.0
        if not improved:
            converged = True
            break
        rel = (cost - cost_new) / cost
        x, r, J, cost = x_new, r_new, J_new, cost_new
        lam = max(lam / 10.0, 1e-12)
        if rel < rtol:
            converged = True
            break
    return LMResult(x, cost, initial, it, converged)


def optimize_deformation(
    K: CameraIntrinsics, R, t, pixels, vertices, params: RefinementParams = RefinementParams()
) -> tuple[np.ndarray, LMResult]:
    """Per-axis deformation minimizing reprojection error with the pose held fixed.

    Optimizes log d from d = (1, 1, 1), so d stays positive.
    """
    uv = np.asarray(pixels, float)
    V = np.asarray(vertices, float)
    R = np.asarray(R, float)
    t = np.asarray(t, float)
    if len(uv) < 3:
        raise InsufficientSupportError("deformation needs at least 3 correspondences")

    def evaluate(logd):
        d = np.exp(logd)
        Xc = (V * d) @ R.T + t
        if np.any(Xc[:, 2] <= 1e-9):
            return None
        proj, Jp = _project_with_jacobian(K, Xc)
        dX = R[None, :, :] * (V * d)[:, None, :]  # column j: R[:, j] * d_j v_j
        return (proj - uv).ravel(), np.einsum("nij,njk->nik", Jp, dX).reshape(-1, 3)

    delta = params.pixel_threshold / 2 if params.huber else None
    res = levenberg_marquardt(
        evaluate, np.zeros(3), lambda x, s: x + s, params.max_iterations, params.rtol, delta
    )
    if not res.converged:
        warnings.warn("deformation optimization hit the iteration cap", ConvergenceWarning, stacklevel=2)
    return np.exp(res.x), res


def optimize_pose(
    K: CameraIntrinsics, d, pixels, vertices, R0, t0, params: RefinementParams = RefinementParams()
) -> tuple[np.ndarray, np.ndarray, LMResult]:
    """Rotation and translation for fixed deformation; rotation updates exp(w) R."""
    uv = np.asarray(pixels, float)
    W = np.asarray(vertices, float) * np.asarray(d, float)

    def evaluate(state):
        R, t = state
        RW = W @ R.T
        Xc = RW + t
        if np.any(Xc[:, 2] <= 1e-9):
            return None
        proj, Jp = _project_with_jacobian(K, Xc)
        dX = np.empty((len(W), 3, 6))
        dX[:, :, :3] = -np.stack([skew(p) for p in RW])
        dX[:, :, 3:] = np.eye(3)
        return (proj - uv).ravel(), np.einsum("nij,njk->nik", Jp, dX).reshape(-1, 6)

    def apply_step(state, step):
        R, t = state
        return nearest_rotation(so3_exp(step[:3]) @ R), t + step[3:]

    delta = params.pixel_threshold / 2 if params.huber else None
    res = levenberg_marquardt(
        evaluate,
        (nearest_rotation(R0), np.asarray(t0, float)),
        apply_step,
        params.max_iterations,
        params.rtol,
        delta,
    )
    if not res.converged:
        warnings.warn("pose optimization hit the iteration cap", ConvergenceWarning, stacklevel=2)
    R, t = res.x
    return R, t, res


def reprojection_cost(K, R, t, d, pixels, vertices) -> float:
    r = residuals(K, R, t, np.asarray(vertices) * np.asarray(d), np.asarray(pixels))
    return float(np.sum(r**2))


def select_refinement_inliers(
    correspondences,
    mask,
    t2: float,
    R,
    t,
    pixel_threshold: float,
    vertices,
    K: CameraIntrinsics,
    category: str | None = None,
    reference=None,
) -> np.ndarray:
    """Indices of instance-map correspondences usable for refining one detection.

    Keeps a correspondence iff its cell is inside `mask`, its similarity is at
    least `t2`, and its 2D location is an inlier of the 6D pose under the
    category-level geometry. With `reference` (the category-level
    correspondences of the same category) the last test is applied to the
    category-level correspondence at the same cell; without it, to the
    correspondence's own residual.
    """
    corr = correspondences
    keep = np.ones(len(corr), dtype=bool)
    if category is not None:
        keep &= corr.categories == category
    cols, rows = corr.cells[:, 0], corr.cells[:, 1]
    keep &= np.asarray(mask, bool)[rows, cols]
    keep &= corr.similarity >= t2
    V = np.asarray(vertices, float)
    if reference is None:
        r = residuals(K, R, t, V[corr.vertices], corr.pixels)
        keep &= r <= pixel_threshold
    else:
        rr = residuals(K, R, t, V[reference.vertices], reference.pixels)
        good = reference.cells[rr <= pixel_threshold]
        h = max(int(rows.max(initial=0)), int(good[:, 1].max(initial=0))) + 1
        w = max(int(cols.max(initial=0)), int(good[:, 0].max(initial=0))) + 1
        grid = np.zeros((h, w), dtype=bool)
        grid[good[:, 1], good[:, 0]] = True
        keep &= grid[rows, cols]
    return np.flatnonzero(keep)


@dataclass(frozen=True, eq=False)
class RefinementProblem:
    intrinsics: CameraIntrinsics
    category: str
    rotation: np.ndarray  # initial 6D pose
    translation: np.ndarray
    correspondences: object  # CorrespondenceSet from the instance-scale map
    vertices: np.ndarray  # category prototype vertices at mean metric scale
    mask: np.ndarray | None = None  # instance foreground (cell grid); None = everywhere
    reference: object | None = None  # category-level correspondences of this category


def refine_instance(problem: RefinementProblem, params: RefinementParams = RefinementParams()) -> Pose9D:
    """Select support, fit the deformation at the 6D pose, then re-fit the pose.

    Falls back to the 6D pose with unit deformation and the mean size when
    fewer than 6 correspondences survive selection.
    """
    p = problem
    corr = p.correspondences
    mean_size = bounding_box_size(p.vertices)
    R0 = nearest_rotation(p.rotation)
    t0 = np.asarray(p.translation, float)
    if len(corr):
        mask = p.mask
        if mask is None:
            mask = np.ones((int(corr.cells[:, 1].max()) + 1, int(corr.cells[:, 0].max()) + 1), bool)
        sel = select_refinement_inliers(
            corr, mask, params.t2, R0, t0, params.pixel_threshold, p.vertices,
            p.intrinsics, p.category, p.reference,
        )
    else:
        sel = np.zeros(0, np.int64)
    if len(sel) < MIN_SUPPORT:
        return Pose9D(p.category, R0, t0, np.ones(3), mean_size, refined=False)
    uv = corr.pixels[sel]
    V = np.asarray(p.vertices)[corr.vertices[sel]]
    d, _ = optimize_deformation(p.intrinsics, R0, t0, uv, V, params)
    R, t, _ = optimize_pose(p.intrinsics, d, uv, V, R0, t0, params)
    return Pose9D(p.category, R, t, d, mean_size * d, refined=True)


def unrefined_pose(category: str, R, t, vertices) -> Pose9D:
    """The 6D detection as a 9D pose with the category mean size."""
    return Pose9D(category, nearest_rotation(R), np.asarray(t, float), np.ones(3),
                  bounding_box_size(vertices), refined=False)
