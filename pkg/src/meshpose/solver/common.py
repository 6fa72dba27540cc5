"""Shared PnP helpers: bearings, absolute orientation, residuals."""

from __future__ import annotations

import numpy as np

from ..geometry import CameraIntrinsics

BEHIND_CAMERA_RESIDUAL = 1e6


def bearings(K: CameraIntrinsics, uv) -> np.ndarray:
    """Unit viewing rays of pixel coordinates (..., 2)."""
    uv = np.asarray(uv, float)
    rays = np.stack(
        [(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy, np.ones(uv.shape[:-1])], axis=-1
    )
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def kabsch(P, Q) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) minimizing sum ||R p + t - q||^2. Batched over leading dims."""
    P = np.asarray(P, float)
    Q = np.asarray(Q, float)
    pc = P.mean(axis=-2, keepdims=True)
    qc = Q.mean(axis=-2, keepdims=True)
    H = np.swapaxes(P - pc, -1, -2) @ (Q - qc)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, -1, -2)
    Ut = np.swapaxes(U, -1, -2)
    d = np.sign(np.linalg.det(V @ Ut))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = V @ D @ Ut
    t = qc[..., 0, :] - (R @ pc[..., 0, :, None])[..., 0]
    return R, t


def residuals(K: CameraIntrinsics, R, t, X, uv) -> np.ndarray:
    """Pixel reprojection residual per point; BEHIND_CAMERA_RESIDUAL if z <= 1e-9."""
    Xc = np.asarray(X, float) @ np.asarray(R, float).T + np.asarray(t, float)
    z = Xc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    du = K.fx * Xc[:, 0] / zs + K.cx - uv[:, 0]
    dv = K.fy * Xc[:, 1] / zs + K.cy - uv[:, 1]
    return np.where(front, np.hypot(du, dv), BEHIND_CAMERA_RESIDUAL)


def residuals_batch(K: CameraIntrinsics, R, t, X, uv) -> np.ndarray:
    """Residuals of B poses (B, 3, 3), (B, 3) on N points -> (B, N)."""
    Xc = np.einsum("bij,nj->bni", R, X) + t[:, None, :]
    z = Xc[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    du = K.fx * Xc[..., 0] / zs + K.cx - uv[None, :, 0]
    dv = K.fy * Xc[..., 1] / zs + K.cy - uv[None, :, 1]
    return np.where(front, np.hypot(du, dv), BEHIND_CAMERA_RESIDUAL)


def reprojection_residual(K: CameraIntrinsics, R, t, pixel, vertex) -> float:
    """Reprojection error of one 2D/3D correspondence in pixels."""
    return float(residuals(K, R, t, np.asarray(vertex, float)[None], np.asarray(pixel, float)[None])[0])
