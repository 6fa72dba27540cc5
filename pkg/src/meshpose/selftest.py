"""Oracle suite: each analytic component checked against an independent computation."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .features import DEFAULT_KAPPA, contrastive_loss, contrastive_loss_grad
from .geometry import build_prototype_set, default_intrinsics, project_points, random_rotation, rotation_angle
from .metrics import OrientedBox, iou3d
from .oracles import central_difference, relative_error, voxel_iou
from .raster import AnnotationSet
from .solver.epnp import solve_epnp

GRADIENT_TOL = 1e-5
GRADIENT_STEP = 1e-5
IOU_TOL = 0.01
PNP_TOL_RAD = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    trials: int
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (f"{tag} {self.name}: worst {self.worst:.3e} vs tolerance {self.tolerance:.0e} "
                f"over {self.trials} trials ({self.seconds:.1f} s)")


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_gradient_instance(rng: np.random.Generator):
    """Small bank, an annotation set with some invisible rows, and an optional negative mask."""
    M, V, D = rng.integers(6, 16), rng.integers(3, 7), rng.integers(3, 9)
    bank = _unit(rng.normal(size=(M, D)))
    ids = rng.choice(M, V, replace=False)
    visible = rng.random(V) < 0.8
    visible[0] = True
    ann = AnnotationSet(ids, bank[ids], _unit(rng.normal(size=(V, D))), visible)
    mask = rng.random(M) < 0.7 if rng.random() < 0.5 else None
    return ann, bank, mask


def gradient_errors(ann, bank, mask, kappa=DEFAULT_KAPPA, eps=GRADIENT_STEP, perturb=0.0):
    gf, gb = contrastive_loss_grad(ann, bank, kappa, mask)
    if perturb:
        gb = gb * (1 + perturb)

    def f_of_pixels(F):
        return contrastive_loss(AnnotationSet(ann.vertex_ids, ann.vertex_features, F, ann.visible), bank, kappa, mask)

    nf = central_difference(f_of_pixels, ann.pixel_features, eps)
    nb = central_difference(lambda B: contrastive_loss(ann, B, kappa, mask), bank, eps)
    return relative_error(gf, nf), relative_error(gb, nb)


def check_gradients(n=50, seed=0, perturb=0.0) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n):
        worst = max(worst, *gradient_errors(*random_gradient_instance(rng), perturb=perturb))
    return CheckResult("contrastive gradient vs central differences", worst < GRADIENT_TOL, worst,
                       GRADIENT_TOL, n, time.perf_counter() - start)


def random_box_pair(rng: np.random.Generator):
    a = OrientedBox(rng.normal(0, 0.05, 3), random_rotation(rng), rng.uniform(0.05, 0.3, 3))
    b = OrientedBox(a.center + rng.normal(0, 0.08, 3), random_rotation(rng), rng.uniform(0.05, 0.3, 3))
    return a, b


def check_iou(n=100, seed=1, resolution=200) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n):
        a, b = random_box_pair(rng)
        worst = max(worst, abs(iou3d(a, b) - voxel_iou(a, b, resolution)))
    return CheckResult(f"iou3d vs {resolution}^3 voxel grid", worst < IOU_TOL, worst, IOU_TOL, n,
                       time.perf_counter() - start)


def check_pnp(n=100, seed=2, points=50) -> CheckResult:
    rng = np.random.default_rng(seed)
    K = default_intrinsics()
    protos = build_prototype_set()
    cats = sorted(protos)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n):
        proto = protos[cats[rng.integers(len(cats))]]
        X = proto.metric_vertices[rng.choice(proto.num_vertices, points, replace=False)]
        R = random_rotation(rng)
        t = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.15, 0.15), rng.uniform(0.5, 2.0)])
        uv, _ = project_points(K, R, t, X)
        Rs, _ = solve_epnp(uv, X, K)
        worst = max(worst, rotation_angle(Rs.T @ R))
    return CheckResult("PnP projection round trip (rad)", worst < PNP_TOL_RAD, worst, PNP_TOL_RAD, n,
                       time.perf_counter() - start)


def run_selftest(perturb_gradient: float = 0.0) -> list[CheckResult]:
    return [check_gradients(perturb=perturb_gradient), check_iou(), check_pnp()]
