import json

import numpy as np
import pytest

from meshpose.errors import DegenerateConfigurationError, InsufficientPointsError
from meshpose.features import CorrespondenceSet
from meshpose.geometry import (
    CameraIntrinsics,
    default_intrinsics,
    project_points,
    random_rotation,
    rotation_about,
    rotation_angle,
)
from meshpose.raster import rasterize_mesh
from meshpose.solver import (
    BEHIND_CAMERA_RESIDUAL,
    SolverParams,
    hypotheses_to_jsonl,
    multi_model_pnp,
    ransac_pnp,
    reprojection_residual,
    solve_epnp,
    solve_p3p,
)
from meshpose.solver.common import residuals

K = default_intrinsics()


def _pose(rng, depth=(0.6, 1.5)):
    R = random_rotation(rng)
    t = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(*depth)])
    return R, t


def _angle(Ra, Rb):
    return rotation_angle(Ra.T @ Rb)


def _cube_points(rng, n=12, half=0.1):
    X = rng.uniform(-half, half, (n, 3))
    axis = rng.integers(0, 3, n)
    X[np.arange(n), axis] = rng.choice([-half, half], n)
    return X


# ----------------------------------------------------------------------- P3P


def test_p3p_recovers_pose(rng):
    for _ in range(50):
        R, t = _pose(rng)
        X = _cube_points(rng, 3)
        uv, _ = project_points(K, R, t, X)
        sols = solve_p3p(uv, X, K)
        assert 1 <= len(sols) <= 4
        assert min(_angle(Rs, R) for Rs, _ in sols) < 1e-8
        for Rs, ts in sols:
            assert np.max(residuals(K, Rs, ts, X, uv)) < 1e-6


def test_p3p_collinear_raises():
    X = np.array([[0, 0, 0], [0.1, 0, 0], [0.3, 0, 0]], float)
    uv, _ = project_points(K, np.eye(3), np.array([0, 0, 1.0]), X)
    with pytest.raises(DegenerateConfigurationError):
        solve_p3p(uv, X, K)


# ---------------------------------------------------------------------- EPnP


def test_epnp_cube_points(rng):
    for _ in range(50):
        R, t = _pose(rng)
        X = _cube_points(rng)
        uv, _ = project_points(K, R, t, X)
        Rs, ts = solve_epnp(uv, X, K)
        assert _angle(Rs, R) < 1e-6
        assert np.linalg.norm(ts - t) / np.linalg.norm(t) < 1e-8
        assert abs(np.linalg.det(Rs) - 1) < 1e-9


def test_epnp_coplanar(rng):
    for _ in range(30):
        R, t = _pose(rng)
        X = rng.uniform(-0.1, 0.1, (15, 3))
        X[:, 2] = 0.1  # one box face
        uv, _ = project_points(K, R, t, X)
        Rs, _ = solve_epnp(uv, X, K)
        assert _angle(Rs, R) < 1e-5


def test_epnp_minimal_and_errors(rng):
    R, t = _pose(rng)
    X = _cube_points(rng, 4)
    uv, _ = project_points(K, R, t, X)
    Rs, ts = solve_epnp(uv, X, K)
    assert np.mean(residuals(K, Rs, ts, X, uv)) < 1e-6
    with pytest.raises(InsufficientPointsError):
        solve_epnp(uv[:3], X[:3], K)
    line = np.outer(np.linspace(-0.1, 0.1, 6), [1.0, 0.5, 0.2])
    uvl, _ = project_points(K, R, t, line)
    with pytest.raises(DegenerateConfigurationError):
        solve_epnp(uvl, line, K)


# ------------------------------------------------------------------ residual


def test_reprojection_residual_examples():
    x = np.array([0.05, -0.02, 0.0])
    t = np.array([0, 0, 1.0])
    p, _ = project_points(K, np.eye(3), t, x[None])
    assert reprojection_residual(K, np.eye(3), t, p[0], x) == 0.0
    assert reprojection_residual(K, np.eye(3), t, p[0] + (3, 4), x) == pytest.approx(5.0, abs=1e-12)
    assert reprojection_residual(K, np.eye(3), -t, p[0], x) == BEHIND_CAMERA_RESIDUAL == 1e6


# --------------------------------------------------------------------- RANSAC


def _mug_points(prototypes, rng, n):
    V = prototypes["mug"].metric_vertices
    return V[rng.choice(len(V), n, replace=False)]


def test_ransac_noiseless(prototypes, rng):
    R, t = _pose(rng)
    X = _mug_points(prototypes, rng, 200)
    uv, _ = project_points(K, R, t, X)
    h = ransac_pnp(uv, X, K, SolverParams(), np.random.default_rng(0))
    assert h is not None
    assert _angle(h.rotation, R) < 1e-6
    assert len(h.inliers) == 200


def test_ransac_with_outliers_over_100_trials(prototypes):
    errors = []
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        R, t = _pose(rng, (0.5, 1.0))
        X = _mug_points(prototypes, rng, 100)
        uv, _ = project_points(K, R, t, X)
        uv = uv + rng.normal(0, 1.0, uv.shape)
        out_uv = rng.uniform((0, 0), (K.width, K.height), (100, 2))
        out_X = _mug_points(prototypes, rng, 100)
        h = ransac_pnp(np.vstack([uv, out_uv]), np.vstack([X, out_X]), K, SolverParams(pixel_threshold=4.0),
                       np.random.default_rng(trial))
        assert h is not None
        true = np.sum(h.inliers < 100)
        assert true >= 95
        assert len(h.inliers) - true <= 5
        errors.append(np.degrees(_angle(h.rotation, R)))
    assert np.median(errors) < 1.0


def test_ransac_too_few_correspondences(prototypes, rng):
    X = _mug_points(prototypes, rng, 10)
    uv, _ = project_points(K, np.eye(3), np.array([0, 0, 1.0]), X)
    assert ransac_pnp(uv, X, K, SolverParams(min_inliers=12), rng) is None


def test_monotone_robustness(prototypes):
    medians = []
    for frac in (0.0, 0.2, 0.4):
        errs = []
        for trial in range(50):
            # Common random numbers: the same scene and noise at every outlier level.
            rng = np.random.default_rng(trial)
            R, t = _pose(rng, (0.5, 1.0))
            X = _mug_points(prototypes, rng, 60)
            uv, _ = project_points(K, R, t, X)
            uv = uv + rng.normal(0, 1.0, uv.shape)
            bad = rng.permutation(60)[: int(round(frac * 60))]
            uv[bad] = rng.uniform((0, 0), (K.width, K.height), (60, 2))[: len(bad)]
            h = ransac_pnp(uv, X, K, SolverParams(), np.random.default_rng(10_000 + trial))
            errs.append(np.pi if h is None else _angle(h.rotation, R))
        medians.append(np.median(errs))
    assert medians[0] <= medians[1] <= medians[2]


def test_solver_params_validation():
    for kw in (dict(pixel_threshold=0), dict(min_inliers=5), dict(confidence=1.0), dict(max_instances=0),
               dict(duplicate_extent=1.0)):
        with pytest.raises(ValueError):
            SolverParams(**kw)


# ---------------------------------------------------------------- multi-model


def _instance_correspondences(prototypes, poses, noise, rng, occluders=()):
    """Visible vertices of each mug as exact (or jittered) correspondences."""
    proto = prototypes["mug"]
    V = proto.metric_vertices
    pix, verts, owner = [], [], []
    for i, (R, t) in enumerate(poses):
        r = rasterize_mesh(V, proto.triangles, K, R, t)
        keep = r.visible.copy()
        for j in occluders:
            if j == i:
                continue
            cover = rasterize_mesh(V, proto.triangles, K, *poses[j]).buffer
            px = np.clip(np.floor(r.pixels).astype(int), 0, [K.width - 1, K.height - 1])
            keep &= ~(cover.coverage[px[:, 1], px[:, 0]] & (cover.depth[px[:, 1], px[:, 0]] < r.depths))
        idx = np.flatnonzero(keep)
        pix.append(r.pixels[idx] + rng.normal(0, noise, (len(idx), 2)))
        verts.append(idx)
        owner.append(np.full(len(idx), i))
    pixels = np.vstack(pix)
    n = len(pixels)
    corr = CorrespondenceSet(pixels, np.floor(pixels / 4).astype(np.int64), np.array(["mug"] * n, dtype=object),
                             np.concatenate(verts), np.ones(n))
    return corr, np.concatenate(owner)


def _owner_of(h, owner):
    vals, counts = np.unique(owner[h.inliers], return_counts=True)
    return vals[np.argmax(counts)]


def test_three_disjoint_mugs(prototypes, rng):
    poses = [(rotation_about((0, 1, 0), a), np.array([x, 0.0, 1.0])) for a, x in ((0.3, -0.3), (1.2, 0.0), (2.5, 0.3))]
    corr, owner = _instance_correspondences(prototypes, poses, 0.0, rng)
    hyps = multi_model_pnp(corr, prototypes, K, SolverParams(), seed=0)
    assert len(hyps) == 3
    for h in hyps:
        o = _owner_of(h, owner)
        assert np.array_equal(np.sort(h.inliers), np.flatnonzero(owner == o))
        assert h.category == "mug"


def test_two_overlapping_mugs(prototypes, rng):
    poses = [(rotation_about((1, 0, 0), 0.4), np.array([0.0, 0.0, 0.9])),
             (rotation_about((0, 1, 0), 1.0), np.array([0.07, 0.0, 1.1]))]
    corr, owner = _instance_correspondences(prototypes, poses, 1.0, rng, occluders=(0, 1))
    hyps = multi_model_pnp(corr, prototypes, K, SolverParams(), seed=1)
    assert len(hyps) == 2
    correct = sum(int(np.sum(owner[h.inliers] == _owner_of(h, owner))) for h in hyps)
    assert correct / len(corr) >= 0.9


def test_multi_model_invariants(prototypes, rng):
    poses = [(random_rotation(rng), np.array([x, 0.0, 1.0])) for x in (-0.2, 0.15)]
    corr, _ = _instance_correspondences(prototypes, poses, 1.0, rng)
    # Add clutter so acceptance and rejection both happen.
    n_out = 150
    clutter = CorrespondenceSet(rng.uniform((0, 0), (K.width, K.height), (n_out, 2)), np.zeros((n_out, 2), np.int64),
                                np.array(["mug"] * n_out, dtype=object), rng.integers(0, 1000, n_out), np.ones(n_out))
    both = CorrespondenceSet(*(np.concatenate([getattr(corr, f), getattr(clutter, f)])
                               for f in ("pixels", "cells", "categories", "vertices", "similarity")))
    params = SolverParams()
    a = multi_model_pnp(both, prototypes, K, params, seed=5)
    b = multi_model_pnp(both, prototypes, K, params, seed=5)
    assert hypotheses_to_jsonl(a) == hypotheses_to_jsonl(b)
    seen = set()
    V = prototypes["mug"].metric_vertices
    for h in a:
        assert len(h.inliers) >= params.min_inliers
        r = residuals(K, h.rotation, h.translation, V[both.vertices[h.inliers]], both.pixels[h.inliers])
        assert r.max() <= params.pixel_threshold
        assert seen.isdisjoint(h.inliers.tolist())
        seen.update(h.inliers.tolist())
        assert abs(np.linalg.det(h.rotation) - 1) < 1e-9


def test_empty_category_group(prototypes):
    assert multi_model_pnp(CorrespondenceSet.empty(), prototypes, K) == []


def test_hypothesis_dump(prototypes, rng):
    poses = [(random_rotation(rng), np.array([0.0, 0.0, 1.0]))]
    corr, _ = _instance_correspondences(prototypes, poses, 0.0, rng)
    hyps = multi_model_pnp(corr, prototypes, K)
    rows = [json.loads(line) for line in hypotheses_to_jsonl(hyps).splitlines()]
    assert len(rows) == 1
    assert set(rows[0]) >= {"category", "quaternion", "translation", "inliers", "score"}
    assert rows[0]["category"] == "mug"
