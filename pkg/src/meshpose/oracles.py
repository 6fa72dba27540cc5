"""Independent reference computations used by the self-test and the test suite."""

from __future__ import annotations

import numpy as np

from .metrics import OrientedBox


def voxel_iou(a: OrientedBox, b: OrientedBox, n: int = 200) -> float:
    """IoU by sampling an n^3 cell-centre grid over the joint bounding box of a and b."""
    ca, cb = a.corners(), b.corners()
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    axes = [(lo[k] + (np.arange(n) + 0.5) * (hi[k] - lo[k]) / n).astype(np.float32) for k in range(3)]

    def local_terms(box: OrientedBox):
        # Box-frame coordinate m of grid point (i, j, k) = X[i]*R[0,m] + Y[j]*R[1,m] + Z[k]*R[2,m] - c·R[:,m]
        R = box.rotation.astype(np.float32)
        off = (box.center @ box.rotation).astype(np.float32)
        half = (box.size / 2).astype(np.float32)
        return [
            (axes[0][:, None] * R[0, m] + axes[1][None, :] * R[1, m] - off[m], axes[2] * R[2, m], half[m])
            for m in range(3)
        ]

    ta, tb = local_terms(a), local_terms(b)
    inter = union = 0
    for k in range(n):
        ina = np.ones((n, n), bool)
        inb = np.ones((n, n), bool)
        for (xy, z, h) in ta:
            ina &= np.abs(xy + z[k]) <= h
        for (xy, z, h) in tb:
            inb &= np.abs(xy + z[k]) <= h
        inter += np.count_nonzero(ina & inb)
        union += np.count_nonzero(ina | inb)
    return inter / union if union else 0.0


def central_difference(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of a scalar function by central differences."""
    x = np.array(x, float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn(x)
        flat[i] = old - eps
        fm = fn(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference ||a - b|| / max(||a||, ||b||)."""
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)
