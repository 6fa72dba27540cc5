"""EPnP (Lepetit, Moreno-Noguer, Fua 2009) with Gauss-Newton refinement of the betas.

Coplanar point sets use three control points spanning the plane.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from ..errors import DegenerateConfigurationError, InsufficientPointsError
from ..geometry import CameraIntrinsics
from .common import bearings, kabsch, residuals
from .p3p import p3p_batch

_PLANAR_TOL = 1e-10
_GN_ITERS = 10


def _control_points(X: np.ndarray) -> np.ndarray:
    c0 = X.mean(axis=0)
    Xc = X - c0
    evals, evecs = np.linalg.eigh(Xc.T @ Xc / len(X))
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if evals[1] <= _PLANAR_TOL * evals[0] or evals[0] <= 0:
        raise DegenerateConfigurationError("3D points are collinear")
    n_axes = 2 if evals[2] <= _PLANAR_TOL * evals[0] else 3
    cps = [c0] + [c0 + np.sqrt(evals[k]) * evecs[:, k] for k in range(n_axes)]
    return np.array(cps)


def _barycentric(X: np.ndarray, cps: np.ndarray) -> np.ndarray:
    basis = (cps[1:] - cps[0]).T  # (3, nc-1)
    a, *_ = np.linalg.lstsq(basis, (X - cps[0]).T, rcond=None)
    a = a.T
    return np.hstack([1.0 - a.sum(axis=1, keepdims=True), a])


def _m_matrix(alphas: np.ndarray, uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    n, nc = alphas.shape
    M = np.zeros((2 * n, 3 * nc))
    for j in range(nc):
        a = alphas[:, j]
        M[0::2, 3 * j] = a * K.fx
        M[0::2, 3 * j + 2] = a * (K.cx - uv[:, 0])
        M[1::2, 3 * j + 1] = a * K.fy
        M[1::2, 3 * j + 2] = a * (K.cy - uv[:, 1])
    return M


def _pair_products(null: np.ndarray, nc: int):
    """For each control-point pair, the Gram matrix of null-vector differences."""
    pairs = list(combinations(range(nc), 2))
    k = null.shape[1]
    vecs = null.T.reshape(k, nc, 3)
    G = np.empty((len(pairs), k, k))
    for p, (i, j) in enumerate(pairs):
        dv = vecs[:, i] - vecs[:, j]  # (k, 3)
        G[p] = dv @ dv.T
    return pairs, G


def _gauss_newton(beta: np.ndarray, G: np.ndarray, rho: np.ndarray) -> np.ndarray:
    for _ in range(_GN_ITERS):
        r = np.einsum("pkl,k,l->p", G, beta, beta) - rho
        Jb = 2.0 * np.einsum("pkl,l->pk", G, beta)
        step, *_ = np.linalg.lstsq(Jb, -r, rcond=None)
        beta = beta + step
        if np.linalg.norm(step) <= 1e-15 * max(1.0, np.linalg.norm(beta)):
            break
    return beta


def _initial_betas(G: np.ndarray, rho: np.ndarray, k: int) -> list[np.ndarray]:
    """Linearized beta estimates for 1..k null vectors, padded to length k."""
    inits = []
    # One null vector: beta^2 G11 = rho.
    b2 = np.dot(G[:, 0, 0], rho) / np.dot(G[:, 0, 0], G[:, 0, 0])
    inits.append(np.r_[np.sqrt(abs(b2)), np.zeros(k - 1)])
    for n in range(2, k + 1):
        idx = [(a, b) for a in range(n) for b in range(a, n)]
        if len(idx) > len(rho):
            break
        L = np.stack([G[:, a, b] * (1.0 if a == b else 2.0) for a, b in idx], axis=1)
        sol, *_ = np.linalg.lstsq(L, rho, rcond=None)
        quad = dict(zip(idx, sol))
        b = np.zeros(k)
        b[0] = np.sqrt(abs(quad[(0, 0)]))
        for m in range(1, n):
            b[m] = np.sign(quad[(0, m)]) * np.sqrt(abs(quad[(m, m)])) if b[0] > 0 else 0.0
        inits.append(b)
    if k >= 3:
        # Lepetit's approximation: keep only the beta_1 * beta_m products.
        L = np.stack([G[:, 0, m] * (1.0 if m == 0 else 2.0) for m in range(k)], axis=1)
        sol, *_ = np.linalg.lstsq(L, rho, rcond=None)
        if sol[0] != 0:
            b0 = np.sqrt(abs(sol[0]))
            inits.append(np.r_[b0, sol[1:] / (b0 * np.sign(sol[0]))])
    return inits


def solve_epnp(points_2d, points_3d, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    uv = np.asarray(points_2d, float).reshape(-1, 2)
    X = np.asarray(points_3d, float).reshape(-1, 3)
    n = len(X)
    if n < 4:
        raise InsufficientPointsError(f"EPnP needs at least 4 points, got {n}")
    cps = _control_points(X)
    nc = len(cps)
    alphas = _barycentric(X, cps)
    M = _m_matrix(alphas, uv, K)
    _, evecs = np.linalg.eigh(M.T @ M)
    k = min(4, nc)
    null = evecs[:, :k]
    pairs, G = _pair_products(null, nc)
    rho = np.array([np.sum((cps[i] - cps[j]) ** 2) for i, j in pairs])

    best, best_err = None, np.inf
    for beta in _initial_betas(G, rho, k):
        beta = _gauss_newton(beta, G, rho)
        ccam = (null @ beta).reshape(nc, 3)
        Xcam = alphas @ ccam
        if np.mean(Xcam[:, 2]) < 0:
            Xcam = -Xcam
        R, t = kabsch(X, Xcam)
        err = np.mean(residuals(K, R, t, X, uv))
        if err < best_err:
            best, best_err = (R, t), err
    if n < 6:
        # Few points leave a high-dimensional null space where the beta
        # Gauss-Newton can stall; P3P on point triples disambiguated by the
        # remaining points covers that regime.
        triples = np.array(list(combinations(range(n), 3)))
        Rs, ts, _ = p3p_batch(bearings(K, uv[triples]), X[triples], newton_steps=5)
        for R, t in zip(Rs, ts):
            err = np.mean(residuals(K, R, t, X, uv))
            if err < best_err:
                best, best_err = (R, t), err
    return best
