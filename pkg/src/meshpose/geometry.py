"""Cuboid mesh prototypes, pinhole camera, rotations and 9D poses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    EmptyInputError,
    InsufficientResolutionError,
    InvalidDeformationError,
    InvalidRotationError,
    InvalidSizeError,
)

PROTOTYPE_FORMAT_VERSION = 1
DEFAULT_VERTEX_COUNT = 1058
DEFAULT_FEATURE_DIM = 64

# Approximate NOCS category extents in meters (x, y, z), y is the up axis.
NOCS_MEAN_SIZES: dict[str, tuple[float, float, float]] = {
    "bottle": (0.087, 0.220, 0.087),
    "bowl": (0.165, 0.075, 0.165),
    "camera": (0.120, 0.095, 0.110),
    "can": (0.070, 0.120, 0.070),
    "laptop": (0.330, 0.220, 0.260),
    "mug": (0.125, 0.095, 0.090),
}

_MIN_DEPTH = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------- camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, stride: int) -> "CameraIntrinsics":
        """Intrinsics of the stride-`stride` cell grid.

        Cell ``i`` of the returned camera has its center at image coordinate
        ``stride * (i + 0.5)``.
        """
        if stride == 1:
            return self
        return CameraIntrinsics(
            self.fx / stride,
            self.fy / stride,
            self.cx / stride,
            self.cy / stride,
            self.width // stride,
            self.height // stride,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


def default_intrinsics() -> CameraIntrinsics:
    """640x480 camera with REAL275-like focal length."""
    return CameraIntrinsics(591.0125, 590.16775, 322.525, 244.11084, 640, 480)


def project_point(K: CameraIntrinsics, R, t, x) -> np.ndarray:
    X = np.asarray(R, float) @ np.asarray(x, float) + np.asarray(t, float)
    if X[2] <= _MIN_DEPTH:
        raise BehindCameraError(f"point has depth {X[2]:.3g}")
    return np.array([K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy])


def project_points(K: CameraIntrinsics, R, t, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (pixels (N, 2), depths (N,)); no depth check."""
    Xc = np.asarray(X, float) @ np.asarray(R, float).T + np.asarray(t, float)
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * Xc[:, 0] / z + K.cx, K.fy * Xc[:, 1] / z + K.cy], axis=1)
    return uv, z


# ------------------------------------------------------------------------ rotations


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return (
        np.eye(3)
        + math.sin(theta) / theta * W
        + (1.0 - math.cos(theta)) / theta**2 * W @ W
    )


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    # arccos is ill-conditioned near 0; use the sine from the skew part there.
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(math.atan2(s, c))


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, float)
    return so3_exp(axis / np.linalg.norm(axis) * angle)


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(M, float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def is_rotation(R, tol: float = 1e-6) -> bool:
    R = np.asarray(R, float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (
        np.linalg.norm(R.T @ R - np.eye(3)) < tol and abs(np.linalg.det(R) - 1.0) < tol
    )


def quaternion_to_matrix(q) -> np.ndarray:
    """(w, x, y, z) quaternion, not necessarily normalized, to rotation matrix."""
    w, x, y, z = np.asarray(q, float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(R) -> np.ndarray:
    """Rotation matrix to (w, x, y, z) with w >= 0."""
    R = np.asarray(R, float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    return quaternion_to_matrix(rng.standard_normal(4))


# ----------------------------------------------------------------------- prototypes


@dataclass(frozen=True, eq=False)
class CategoryPrototype:
    """Cuboid neural mesh of one category.

    ``vertices`` lie on the surface of the box with extents ``mean_size``
    (unit diagonal), centered at the origin. ``mean_scale`` maps the unit
    mesh to the category's average metric size.
    """

    category: str
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_features: np.ndarray
    mean_size: np.ndarray
    mean_scale: float

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def feature_dim(self) -> int:
        return self.vertex_features.shape[1]

    @property
    def metric_vertices(self) -> np.ndarray:
        """Vertices at the category's mean metric scale."""
        return self.vertices * self.mean_scale

    def with_features(self, features) -> "CategoryPrototype":
        features = np.asarray(features, float)
        if features.shape != self.vertex_features.shape:
            raise ValueError("feature array shape mismatch")
        features = features / np.linalg.norm(features, axis=1, keepdims=True)
        return CategoryPrototype(
            self.category, self.vertices, self.triangles, _frozen(features),
            self.mean_size, self.mean_scale,
        )


def _grid_counts(size: np.ndarray, density: float) -> np.ndarray:
    spacing = 1.0 / math.sqrt(density)
    return np.maximum(1, np.rint(size / spacing)).astype(int)


def _surface_vertex_count(n: np.ndarray) -> int:
    nx, ny, nz = (int(v) for v in n)
    return (nx + 1) * (ny + 1) * (nz + 1) - (nx - 1) * (ny - 1) * (nz - 1)


def box_surface_area(size) -> float:
    sx, sy, sz = size
    return 2.0 * (sx * sy + sy * sz + sx * sz)


def density_for_vertex_count(raw_mean_size, n_vertices: int = DEFAULT_VERTEX_COUNT) -> float:
    """Vertices-per-unit-area giving the surface lattice closest to `n_vertices`."""
    size = np.asarray(raw_mean_size, float)
    size = size / np.linalg.norm(size)
    area = box_surface_area(size)
    best, best_err = n_vertices / area, math.inf
    for f in np.linspace(0.6, 1.4, 161):
        rho = f * n_vertices / area
        err = abs(_surface_vertex_count(_grid_counts(size, rho)) - n_vertices)
        if err < best_err:
            best, best_err = rho, err
    return float(best)


def _box_lattice(size: np.ndarray, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nx, ny, nz = (int(v) for v in n)
    index = -np.ones((nx + 1, ny + 1, nz + 1), dtype=np.int64)
    coords = []
    for i in range(nx + 1):
        for j in range(ny + 1):
            for k in range(nz + 1):
                if i in (0, nx) or j in (0, ny) or k in (0, nz):
                    index[i, j, k] = len(coords)
                    coords.append((i / nx, j / ny, k / nz))
    vertices = (np.array(coords) - 0.5) * size

    tris = []

    def face(fixed_axis: int, fixed_value: int):
        a, b = [ax for ax in range(3) if ax != fixed_axis]
        for u in range(n[a]):
            for v in range(n[b]):
                corners = []
                for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    ijk = [0, 0, 0]
                    ijk[fixed_axis] = fixed_value
                    ijk[a], ijk[b] = u + du, v + dv
                    corners.append(index[tuple(ijk)])
                c0, c1, c2, c3 = corners
                if fixed_value == 0:
                    tris.append((c0, c2, c1))
                    tris.append((c0, c3, c2))
                else:
                    tris.append((c0, c1, c2))
                    tris.append((c0, c2, c3))

    for axis in range(3):
        face(axis, 0)
        face(axis, int(n[axis]))
    return vertices, np.array(tris, dtype=np.int64)


def build_prototype(
    category: str,
    raw_mean_size,
    vertices_per_unit_area: float | None = None,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    seed: int = 0,
) -> CategoryPrototype:
    """Sample a regular vertex grid on the surface of the category's mean box.

    Each box axis gets ``round(extent * sqrt(density))`` subdivisions, so
    every face receives a number of grid cells proportional to its area and
    neighbouring faces share their edge vertices. With
    ``vertices_per_unit_area=None`` the density is chosen to give about
    ``DEFAULT_VERTEX_COUNT`` vertices.
    """
    raw = np.asarray(raw_mean_size, float)
    if raw.shape != (3,) or not np.all(raw > 0):
        raise InvalidSizeError(f"mean size must be 3 positive values, got {raw_mean_size}")
    scale = float(np.linalg.norm(raw))
    size = raw / scale
    if vertices_per_unit_area is None:
        vertices_per_unit_area = density_for_vertex_count(raw)
    if not vertices_per_unit_area > 0 or vertices_per_unit_area * box_surface_area(size) < 8:
        raise InsufficientResolutionError(
            f"density {vertices_per_unit_area} gives fewer than 8 vertices"
        )
    vertices, triangles = _box_lattice(size, _grid_counts(size, vertices_per_unit_area))
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((len(vertices), feature_dim))
    features /= np.linalg.norm(features, axis=1, keepdims=True)
    return CategoryPrototype(
        category, _frozen(vertices), _frozen(triangles, np.int64), _frozen(features),
        _frozen(size), scale,
    )


def build_prototype_set(
    sizes: Mapping[str, Sequence[float]] | None = None,
    n_vertices: int = DEFAULT_VERTEX_COUNT,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    seed: int = 0,
) -> dict[str, CategoryPrototype]:
    """One prototype per category, each seeded from (`seed`, category index)."""
    sizes = NOCS_MEAN_SIZES if sizes is None else sizes
    out = {}
    for i, (cat, raw) in enumerate(sorted(sizes.items())):
        rho = density_for_vertex_count(raw, n_vertices)
        sub_seed = np.random.SeedSequence([seed, i]).generate_state(1)[0]
        out[cat] = build_prototype(cat, raw, rho, feature_dim, int(sub_seed))
    return out


def deform_mesh(prototype: CategoryPrototype, d) -> CategoryPrototype:
    d = np.asarray(d, float)
    if d.shape != (3,) or not np.all(d > 0):
        raise InvalidDeformationError(f"deformation must be 3 positive values, got {d}")
    return CategoryPrototype(
        prototype.category,
        _frozen(prototype.vertices * d),
        prototype.triangles,
        prototype.vertex_features,
        prototype.mean_size,
        prototype.mean_scale,
    )


def bounding_box_size(vertices) -> np.ndarray:
    v = np.asarray(vertices, float).reshape(-1, 3)
    if len(v) == 0:
        raise EmptyInputError("bounding box of an empty vertex set")
    return v.max(axis=0) - v.min(axis=0)


def box_corners(size) -> np.ndarray:
    """8 corners of the centered box with full extents `size`."""
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    return 0.5 * signs * np.asarray(size, float)


def save_prototypes(path, prototypes: Mapping[str, CategoryPrototype]) -> None:
    """Write a prototype set as a versioned ``.npz`` container."""
    cats = sorted(prototypes)
    arrays = {
        "format_version": np.array(PROTOTYPE_FORMAT_VERSION),
        "categories": np.array(cats),
    }
    for i, c in enumerate(cats):
        p = prototypes[c]
        arrays[f"{i}/vertices"] = p.vertices
        arrays[f"{i}/triangles"] = p.triangles
        arrays[f"{i}/features"] = p.vertex_features
        arrays[f"{i}/mean_size"] = p.mean_size
        arrays[f"{i}/mean_scale"] = np.array(p.mean_scale)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_prototypes(path) -> dict[str, CategoryPrototype]:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != PROTOTYPE_FORMAT_VERSION:
            raise ValueError(f"unsupported prototype format version {version}")
        out = {}
        for i, c in enumerate(data["categories"].tolist()):
            out[c] = CategoryPrototype(
                c,
                _frozen(data[f"{i}/vertices"]),
                _frozen(data[f"{i}/triangles"], np.int64),
                _frozen(data[f"{i}/features"]),
                _frozen(data[f"{i}/mean_size"]),
                float(data[f"{i}/mean_scale"]),
            )
    return out


# ---------------------------------------------------------------------------- poses


@dataclass(frozen=True, eq=False)
class Pose9D:
    """Rotation, translation (m), per-axis deformation and metric box size.

    ``refined`` is False for poses that fell back to the 6D estimate.
    """

    category: str
    rotation: np.ndarray
    translation: np.ndarray
    deformation: np.ndarray
    size: np.ndarray
    refined: bool = True

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        object.__setattr__(self, "translation", _frozen(self.translation))
        object.__setattr__(self, "deformation", _frozen(self.deformation))
        object.__setattr__(self, "size", _frozen(self.size))
        if not is_rotation(self.rotation):
            raise InvalidRotationError("pose rotation is not in SO(3)")
        if not np.all(self.deformation > 0):
            raise InvalidDeformationError("deformation must be positive")
        if not self.translation[2] > 0:
            raise BehindCameraError("object center must be in front of the camera")

    @property
    def scale(self) -> float:
        return float(np.linalg.norm(self.size))

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "quaternion": matrix_to_quaternion(self.rotation).tolist(),
            "translation": self.translation.tolist(),
            "deformation": self.deformation.tolist(),
            "size": self.size.tolist(),
            "refined": self.refined,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Pose9D":
        return cls(
            d["category"],
            quaternion_to_matrix(d["quaternion"]),
            np.asarray(d["translation"], float),
            np.asarray(d.get("deformation", (1.0, 1.0, 1.0)), float),
            np.asarray(d["size"], float),
            bool(d.get("refined", True)),
        )


@dataclass(frozen=True)
class SceneGroundTruth:
    objects: tuple[Pose9D, ...]
    intrinsics: CameraIntrinsics
    # Unit-mesh multiplier used to render each object: size = scale * (d * mean_size).
    render_scales: tuple[float, ...] = field(default=())

    def categories(self) -> set[str]:
        return {o.category for o in self.objects}


def render_scale(pose: Pose9D, prototype: CategoryPrototype) -> float:
    """Multiplier taking the unit prototype to the instance's metric frame."""
    return pose.scale / float(np.linalg.norm(pose.deformation * prototype.mean_size))


def poses_to_jsonl(poses: Iterable[Pose9D], scene: int | None = None) -> str:
    import json

    lines = []
    for p in poses:
        row = p.to_dict()
        if scene is not None:
            row = {"scene": scene, **row}
        lines.append(json.dumps(row))
    return "".join(line + "\n" for line in lines)
