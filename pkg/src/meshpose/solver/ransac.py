"""Locally optimized MSAC for PnP and sequential multi-instance extraction.

Multi-model fitting follows the Progressive-X outline without the graph-cut
spatial-coherence energy: instances are peeled off greedily with LO-MSAC,
then every correspondence is reassigned to its best-fitting instance and
each instance is refit on its final support.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import MeshPoseError
from ..geometry import CameraIntrinsics, CategoryPrototype, matrix_to_quaternion
from .common import bearings, residuals, residuals_batch
from .epnp import solve_epnp
from .p3p import p3p_batch


@dataclass(frozen=True)
class SolverParams:
    pixel_threshold: float = 4.0
    max_iterations: int = 1000
    min_inliers: int = 12
    max_instances: int = 8
    confidence: float = 0.999
    lo_iterations: int = 10
    batch_size: int = 32
    # A model is a duplicate of an accepted instance when that instance
    # reprojects its support with a median error below this fraction of the
    # instance's own image extent.
    duplicate_extent: float = 0.1

    def __post_init__(self):
        if not self.pixel_threshold > 0:
            raise ValueError("pixel_threshold must be positive")
        if self.min_inliers < 6:
            raise ValueError("min_inliers must be at least 6")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1 or self.max_instances < 1:
            raise ValueError("iteration and instance caps must be positive")
        if not 0 <= self.duplicate_extent < 1:
            raise ValueError("duplicate_extent must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class PoseHypothesis:
    rotation: np.ndarray
    translation: np.ndarray
    inliers: np.ndarray  # indices into the correspondence sequence
    score: float
    category: str = ""

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "quaternion": matrix_to_quaternion(self.rotation).tolist(),
            "translation": np.asarray(self.translation).tolist(),
            "inliers": np.asarray(self.inliers).tolist(),
            "score": float(self.score),
        }


def hypotheses_to_jsonl(hyps) -> str:
    return "".join(json.dumps(h.to_dict()) + "\n" for h in hyps)


def _msac(res: np.ndarray, tau: float) -> np.ndarray:
    return np.minimum(res**2, tau**2).sum(axis=-1)


def _required_iterations(n_inliers: int, n: int, confidence: float, sample_size: int = 3) -> float:
    w = n_inliers / n
    p = w**sample_size
    if p >= 1.0:
        return 0
    if p <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log(1.0 - p)


def _sample_triples(rng: np.random.Generator, pool: np.ndarray, count: int) -> np.ndarray:
    idx = rng.integers(0, len(pool), size=(count, 3))
    dup = (idx[:, 0] == idx[:, 1]) | (idx[:, 1] == idx[:, 2]) | (idx[:, 0] == idx[:, 2])
    while dup.any():
        idx[dup] = rng.integers(0, len(pool), size=(int(dup.sum()), 3))
        dup = (idx[:, 0] == idx[:, 1]) | (idx[:, 1] == idx[:, 2]) | (idx[:, 0] == idx[:, 2])
    return pool[idx]


def _fit(uv, X, K):
    try:
        return solve_epnp(uv, X, K)
    except MeshPoseError:
        return None


class _Model:
    __slots__ = ("R", "t", "res", "score")

    def __init__(self, R, t, res, tau):
        self.R, self.t, self.res = R, t, res
        self.score = float(_msac(res, tau))

    def inliers(self, tau) -> np.ndarray:
        return np.flatnonzero(self.res <= tau)


def _local_optimize(model: _Model, uv, X, K, params: SolverParams, rng) -> _Model:
    """Iterated EPnP refit on the inliers plus a small inner RANSAC over them."""
    tau = params.pixel_threshold

    def refit_loop(m: _Model) -> _Model:
        for _ in range(5):
            inl = m.inliers(tau)
            if len(inl) < 6:
                break
            fit = _fit(uv[inl], X[inl], K)
            if fit is None:
                break
            cand = _Model(fit[0], fit[1], residuals(K, fit[0], fit[1], X, uv), tau)
            if cand.score >= m.score:
                break
            m = cand
        return m

    best = refit_loop(model)
    inl = best.inliers(tau)
    subset = min(12, len(inl) // 2)
    if subset >= 6:
        for _ in range(params.lo_iterations):
            pick = rng.choice(inl, size=subset, replace=False)
            fit = _fit(uv[pick], X[pick], K)
            if fit is None:
                continue
            cand = _Model(fit[0], fit[1], residuals(K, fit[0], fit[1], X, uv), tau)
            if cand.score < best.score:
                best = refit_loop(cand)
    return best


def ransac_pnp(
    pixels,
    points,
    K: CameraIntrinsics,
    params: SolverParams = SolverParams(),
    rng: np.random.Generator | None = None,
) -> PoseHypothesis | None:
    """Single-instance LO-MSAC: P3P hypotheses, EPnP refits, adaptive termination.

    Returns None when fewer than ``params.min_inliers`` correspondences support
    the best model.
    """
    rng = np.random.default_rng() if rng is None else rng
    uv = np.asarray(pixels, float).reshape(-1, 2)
    X = np.asarray(points, float).reshape(-1, 3)
    n = len(uv)
    if n < params.min_inliers:
        return None
    tau = params.pixel_threshold
    rays = bearings(K, uv)
    pool = np.arange(n)
    best: _Model | None = None
    needed = params.max_iterations
    done = 0
    while done < min(needed, params.max_iterations):
        count = min(params.batch_size, params.max_iterations - done)
        samples = _sample_triples(rng, pool, count)
        done += count
        Rs, ts, _ = p3p_batch(rays[samples], X[samples], newton_steps=1)
        if len(Rs) == 0:
            continue
        res = residuals_batch(K, Rs, ts, X, uv)
        scores = _msac(res, tau)
        j = int(np.argmin(scores))
        if best is not None and scores[j] >= best.score:
            continue
        best = _local_optimize(_Model(Rs[j], ts[j], res[j], tau), uv, X, K, params, rng)
        needed = _required_iterations(len(best.inliers(tau)), n, params.confidence)
    if best is None:
        return None
    # Final non-minimal refit on the best support.
    inl = best.inliers(tau)
    if len(inl) >= 6:
        fit = _fit(uv[inl], X[inl], K)
        if fit is not None:
            cand = _Model(fit[0], fit[1], residuals(K, fit[0], fit[1], X, uv), tau)
            if cand.score < best.score:
                best = cand
    inl = best.inliers(tau)
    if len(inl) < params.min_inliers or best.t[2] <= 0:
        return None
    return PoseHypothesis(best.R, best.t, inl, best.score)


def _category_rng(seed, category_index: int) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy if isinstance(seed.entropy, int) else 0
        ss = np.random.SeedSequence([entropy, *seed.spawn_key, category_index])
    else:
        ss = np.random.SeedSequence([int(seed), category_index])
    return np.random.default_rng(ss)


def _explains(R, t, support: np.ndarray, members: np.ndarray, uv, X, K, frac: float) -> bool:
    extent = float(np.linalg.norm(np.ptp(uv[support], axis=0)))
    r = residuals(K, R, t, X[members], uv[members])
    return float(np.median(r)) <= frac * extent


def extract_instances(uv, X, K, params: SolverParams, rng) -> list[PoseHypothesis]:
    """Greedy extraction followed by global reassignment, refit and duplicate pruning.

    Each proposal is fitted on the not-yet-assigned correspondences. A
    proposal whose support an accepted instance already reprojects closely
    (relative to that instance's image extent) is dropped as a duplicate; its
    support still leaves the pool. The same test runs again on the refitted
    instances, largest support first, since reassignment can turn a partial
    fit of a big object into one that agrees with its neighbour.
    """
    tau = params.pixel_threshold
    frac = params.duplicate_extent
    remaining = np.arange(len(uv))
    found: list[tuple[PoseHypothesis, np.ndarray]] = []
    proposals = 0
    while (
        len(found) < params.max_instances
        and proposals < 2 * params.max_instances
        and len(remaining) >= params.min_inliers
    ):
        h = ransac_pnp(uv[remaining], X[remaining], K, params, rng)
        if h is None:
            break
        proposals += 1
        members = remaining[h.inliers]
        remaining = np.delete(remaining, h.inliers)
        if any(_explains(f.rotation, f.translation, fm, members, uv, X, K, frac) for f, fm in found):
            continue
        found.append((h, members))
    if not found:
        return []
    res = np.stack([residuals(K, h.rotation, h.translation, X, uv) for h, _ in found])
    owner = np.argmin(res, axis=0)
    owned = res[owner, np.arange(len(uv))] <= tau
    refit = []
    for i, (h, _) in enumerate(found):
        members = np.flatnonzero(owned & (owner == i))
        if len(members) < params.min_inliers:
            continue
        R, t = h.rotation, h.translation
        fit = _fit(uv[members], X[members], K)
        if fit is not None:
            R, t = fit
        r = residuals(K, R, t, X[members], uv[members])
        keep = members[r <= tau]
        if len(keep) < params.min_inliers or t[2] <= 0:
            continue
        score = float(_msac(residuals(K, R, t, X, uv), tau))
        refit.append(PoseHypothesis(R, t, keep, score))
    kept: list[PoseHypothesis] = []
    for h in sorted(refit, key=lambda h: -len(h.inliers)):
        if not any(_explains(k.rotation, k.translation, k.inliers, h.inliers, uv, X, K, frac) for k in kept):
            kept.append(h)
    return [h for h in refit if any(h is k for k in kept)]


def multi_model_pnp(
    correspondences,
    prototypes: Mapping[str, CategoryPrototype],
    K: CameraIntrinsics,
    params: SolverParams = SolverParams(),
    seed=0,
) -> list[PoseHypothesis]:
    """Detect every instance of every category present in `correspondences`.

    Prototype vertices are used at the category's mean metric scale. Each
    category is solved with its own generator derived from (`seed`, category
    index), so the result does not depend on the order categories are solved.
    Inlier indices refer to positions in `correspondences`.
    """
    order = sorted(prototypes)
    out = []
    for c in sorted(set(correspondences.categories.tolist())):
        idx = np.flatnonzero(correspondences.categories == c)
        if len(idx) < params.min_inliers:
            continue
        proto = prototypes[c]
        X = proto.metric_vertices[correspondences.vertices[idx]]
        uv = correspondences.pixels[idx]
        rng = _category_rng(seed, order.index(c))
        for h in extract_instances(uv, X, K, params, rng):
            out.append(PoseHypothesis(h.rotation, h.translation, idx[h.inliers], h.score, c))
    return out
