"""Grunert's P3P solver, vectorized over many minimal samples."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateConfigurationError
from ..geometry import CameraIntrinsics
from .common import bearings, kabsch, residuals

_COLLINEAR_TOL = 1e-9


def _quartic_roots(coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Real roots of B quartics a4 v^4 + ... + a0 via companion eigenvalues.

    Returns (roots (B, 4), valid (B, 4)).
    """
    B = len(coeffs)
    a4 = coeffs[:, 0]
    ok = np.abs(a4) > 1e-12 * np.max(np.abs(coeffs), axis=1)
    safe = np.where(ok, a4, 1.0)
    C = np.zeros((B, 4, 4))
    C[:, 0, :] = -coeffs[:, 1:] / safe[:, None]
    C[:, 1, 0] = C[:, 2, 1] = C[:, 3, 2] = 1.0
    C[~ok] = np.eye(4)
    ev = np.linalg.eigvals(C)
    real = np.abs(ev.imag) <= 1e-6 * np.maximum(1.0, np.abs(ev.real))
    return ev.real, real & ok[:, None]


def p3p_batch(J: np.ndarray, P: np.ndarray, newton_steps: int = 3):
    """Camera poses consistent with B minimal samples.

    J: (B, 3, 3) unit bearing rows, P: (B, 3, 3) object points.
    Returns (R (S, 3, 3), t (S, 3), sample index (S,)); up to 4 per sample.
    """
    p1, p2, p3 = P[:, 0], P[:, 1], P[:, 2]
    j1, j2, j3 = J[:, 0], J[:, 1], J[:, 2]
    a2 = np.sum((p2 - p3) ** 2, axis=1)
    b2 = np.sum((p1 - p3) ** 2, axis=1)
    c2 = np.sum((p1 - p2) ** 2, axis=1)
    area = np.linalg.norm(np.cross(p2 - p1, p3 - p1), axis=1)
    scale = np.maximum.reduce([a2, b2, c2])
    good = (area > _COLLINEAR_TOL * scale) & (b2 > 0)
    b2s = np.where(good, b2, 1.0)
    ca = np.sum(j2 * j3, axis=1)
    cb = np.sum(j1 * j3, axis=1)
    cg = np.sum(j1 * j2, axis=1)

    amc = (a2 - c2) / b2s
    apc = (a2 + c2) / b2s
    bmc = (b2 - c2) / b2s
    bma = (b2 - a2) / b2s
    A4 = (amc - 1) ** 2 - 4 * c2 / b2s * ca**2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2s * ca**2 * cb)
    A2 = 2 * (
        amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * bmc * ca**2
        - 4 * apc * ca * cb * cg + 2 * bma * cg**2
    )
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2s * cg**2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2s * cg**2

    roots, valid = _quartic_roots(np.stack([A4, A3, A2, A1, A0], axis=1))
    valid &= good[:, None]
    sample, slot = np.nonzero(valid)
    v = roots[sample, slot]
    amc_s, cb_s, cg_s, ca_s = amc[sample], cb[sample], cg[sample], ca[sample]
    den = 2 * (cg_s - v * ca_s)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = ((-1 + amc_s) * v**2 - 2 * amc_s * cb_s * v + 1 + amc_s) / den
        s1 = np.sqrt(c2[sample] / (1 + u**2 - 2 * u * cg_s))
    ok = np.isfinite(u) & np.isfinite(s1) & (u > 0) & (v > 0)
    sample, u, v, s1 = sample[ok], u[ok], v[ok], s1[ok]
    s = np.stack([s1, u * s1, v * s1], axis=1)

    # Newton on the three inter-point distance equations.
    cos3 = np.stack([cg[sample], ca[sample], cb[sample]], axis=1)  # pairs (0,1),(1,2),(0,2)
    d2 = np.stack([c2[sample], a2[sample], b2[sample]], axis=1)
    pairs = ((0, 1), (1, 2), (0, 2))
    for _ in range(newton_steps):
        F = np.empty_like(s)
        Jn = np.zeros((len(s), 3, 3))
        for r, (i, k) in enumerate(pairs):
            F[:, r] = s[:, i] ** 2 + s[:, k] ** 2 - 2 * s[:, i] * s[:, k] * cos3[:, r] - d2[:, r]
            Jn[:, r, i] = 2 * s[:, i] - 2 * s[:, k] * cos3[:, r]
            Jn[:, r, k] = 2 * s[:, k] - 2 * s[:, i] * cos3[:, r]
        solvable = np.abs(np.linalg.det(Jn)) > 1e-14
        if not solvable.any():
            break
        step = np.zeros_like(s)
        step[solvable] = np.linalg.solve(Jn[solvable], F[solvable][..., None])[..., 0]
        s = s - step

    Xc = s[:, :, None] * J[sample]
    R, t = kabsch(P[sample], Xc)
    return R, t, sample


def solve_p3p(points_2d, points_3d, K: CameraIntrinsics) -> list[tuple[np.ndarray, np.ndarray]]:
    """All real P3P solutions (at most 4) for three correspondences."""
    uv = np.asarray(points_2d, float).reshape(3, 2)
    X = np.asarray(points_3d, float).reshape(3, 3)
    area = np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0]))
    scale = max(np.sum((X[0] - X[1]) ** 2), np.sum((X[1] - X[2]) ** 2), np.sum((X[0] - X[2]) ** 2))
    if area <= _COLLINEAR_TOL * scale:
        raise DegenerateConfigurationError("P3P points are collinear")
    R, t, _ = p3p_batch(bearings(K, uv)[None], X[None], newton_steps=5)
    out = []
    for Ri, ti in zip(R, t):
        if np.all(residuals(K, Ri, ti, X, uv) < 1e-3):
            out.append((Ri, ti))
    return out
