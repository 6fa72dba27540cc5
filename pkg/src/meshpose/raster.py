"""Z-buffer rasterization of prototype meshes.

Produces per-vertex visibility annotations, per-object coverage masks and
the annotation sets used by the contrastive objective.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numba
import numpy as np

from .errors import BehindCameraError, EmptyVisibilityWarning, MissingPrototypeError
from .geometry import (
    CameraIntrinsics,
    CategoryPrototype,
    SceneGroundTruth,
    deform_mesh,
    project_points,
    render_scale,
)

VISIBILITY_RTOL = 1e-3
MASK_OVERLAPS = "mask_overlaps"
KEEP_NEAREST = "keep_nearest"


@numba.njit(cache=True)
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True)
def _is_top_left(ax, ay, bx, by):
    dy = by - ay
    dx = bx - ax
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


@numba.njit(cache=True)
def _raster_kernel(uv, z, tris, width, height, depth, tri_id, tri_offset):
    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
        if z[i0] <= 0.0 or z[i1] <= 0.0 or z[i2] <= 0.0:
            continue
        x0, y0 = uv[i0, 0], uv[i0, 1]
        x1, y1 = uv[i1, 0], uv[i1, 1]
        x2, y2 = uv[i2, 0], uv[i2, 1]
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, y1, x2, y2 = x2, y2, x1, y1
            i1, i2 = i2, i1
            area = -area
        iz0, iz1, iz2 = 1.0 / z[i0], 1.0 / z[i1], 1.0 / z[i2]
        tl0 = _is_top_left(x1, y1, x2, y2)
        tl1 = _is_top_left(x2, y2, x0, y0)
        tl2 = _is_top_left(x0, y0, x1, y1)
        xmin = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                w0 = _edge(x1, y1, x2, y2, cx, cy)
                w1 = _edge(x2, y2, x0, y0, cx, cy)
                w2 = _edge(x0, y0, x1, y1, cx, cy)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not tl0) or (w1 == 0.0 and not tl1) or (w2 == 0.0 and not tl2):
                    continue
                inv = (w0 * iz0 + w1 * iz1 + w2 * iz2) / area
                d = 1.0 / inv
                if d < depth[py, px]:
                    depth[py, px] = d
                    tri_id[py, px] = f + tri_offset


@dataclass(frozen=True)
class DepthBuffer:
    """Nearest-surface depth and covering triangle per pixel (inf / -1 if empty)."""

    depth: np.ndarray
    triangle: np.ndarray

    @property
    def coverage(self) -> np.ndarray:
        return self.triangle >= 0


def rasterize_depth(uv, z, triangles, width: int, height: int) -> DepthBuffer:
    """Scan-convert triangles with a top-left fill rule, sampling pixel centers."""
    depth = np.full((height, width), np.inf)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    _raster_kernel(
        np.ascontiguousarray(uv, dtype=np.float64),
        np.ascontiguousarray(z, dtype=np.float64),
        np.ascontiguousarray(triangles, dtype=np.int64),
        width, height, depth, tri_id, 0,
    )
    return DepthBuffer(depth, tri_id)


def surface_depth_at(uv_tri: np.ndarray, z_tri: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Depth of each triangle's plane at `points`, interpolating 1/z in screen space.

    uv_tri: (N, 3, 2), z_tri: (N, 3), points: (N, 2).
    """
    a, b, c = uv_tri[:, 0], uv_tri[:, 1], uv_tri[:, 2]

    def cross(p, q, r):
        return (q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0])

    area = cross(a, b, c)
    w0 = cross(b, c, points) / area
    w1 = cross(c, a, points) / area
    w2 = 1.0 - w0 - w1
    return 1.0 / (w0 / z_tri[:, 0] + w1 / z_tri[:, 1] + w2 / z_tri[:, 2])


@dataclass(frozen=True)
class VertexAnnotation:
    vertex_index: int
    pixel: tuple[float, float]
    visible: bool


@dataclass(frozen=True)
class MeshRaster:
    """Array form of a single-mesh rasterization."""

    pixels: np.ndarray  # (V, 2)
    depths: np.ndarray  # (V,)
    visible: np.ndarray  # (V,) bool
    buffer: DepthBuffer

    def annotations(self) -> list[VertexAnnotation]:
        return [
            VertexAnnotation(k, (float(p[0]), float(p[1])), bool(o))
            for k, (p, o) in enumerate(zip(self.pixels, self.visible))
        ]


def _vertex_visibility(uv, z, triangles, buffer: DepthBuffer, rtol: float) -> np.ndarray:
    h, w = buffer.depth.shape
    px = np.floor(uv[:, 0]).astype(np.int64)
    py = np.floor(uv[:, 1]).astype(np.int64)
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    visible = np.zeros(len(uv), dtype=bool)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return visible
    tri = buffer.triangle[py[idx], px[idx]]
    covered = tri >= 0
    # An empty pixel has infinite buffer depth, so a silhouette vertex whose
    # pixel centre misses the mesh is not occluded.
    visible[idx[~covered]] = True
    idx, tri = idx[covered], tri[covered]
    corners = triangles[tri]
    # Evaluate the visible surface exactly at the vertex, not at the pixel center.
    z_surf = surface_depth_at(uv[corners], z[corners], uv[idx])
    visible[idx] = z[idx] <= z_surf + rtol * z[idx]
    return visible


def rasterize_mesh(
    vertices, triangles, K: CameraIntrinsics, R, t, rtol: float = VISIBILITY_RTOL
) -> MeshRaster:
    uv, z = project_points(K, R, t, vertices)
    if np.any(z <= 1e-9):
        raise BehindCameraError("mesh has vertices behind the camera")
    buffer = rasterize_depth(uv, z, triangles, K.width, K.height)
    visible = _vertex_visibility(uv, z, np.asarray(triangles), buffer, rtol)
    return MeshRaster(uv, z, visible, buffer)


def rasterize_vertices(
    mesh: CategoryPrototype, K: CameraIntrinsics, R, t
) -> list[VertexAnnotation]:
    """Project every vertex and flag it visible if it is not hidden in the z-buffer."""
    result = rasterize_mesh(mesh.vertices, mesh.triangles, K, R, t)
    if not result.visible.any():
        warnings.warn("no vertex is visible", EmptyVisibilityWarning, stacklevel=2)
    return result.annotations()


# ------------------------------------------------------------------------ scene masks


def instance_mesh(
    pose, prototype: CategoryPrototype, deformed: bool = True
) -> CategoryPrototype:
    """Prototype geometry placed at the instance's metric scale.

    ``deformed=False`` gives the mean-shape mesh at the same render scale, the
    geometry the category-level feature map is aligned with.
    """
    d = pose.deformation if deformed else np.ones(3)
    return deform_mesh(prototype, render_scale(pose, prototype) * d)


@dataclass(frozen=True)
class SceneRender:
    per_object: np.ndarray  # (N, H, W) bool, after multi-object rule
    foreground: np.ndarray  # (H, W) bool, union before overlap removal
    overlap: np.ndarray  # (H, W) bool, pixels covered by more than one object
    buffers: tuple[DepthBuffer, ...]
    rasters: tuple[MeshRaster, ...]


def combine_masks(coverage: np.ndarray, depths: np.ndarray, rule: str) -> tuple[np.ndarray, np.ndarray]:
    """Apply the multi-object rule to stacked coverage masks.

    Returns (per-object masks, overlap mask). Pure reduction over objects, so
    the result does not depend on the order objects were rendered in.
    """
    count = coverage.sum(axis=0)
    overlap = count > 1
    if rule == MASK_OVERLAPS:
        return coverage & ~overlap[None], overlap
    if rule == KEEP_NEAREST:
        if len(coverage) == 0:
            return coverage.copy(), overlap
        nearest = np.argmin(np.where(coverage, depths, np.inf), axis=0)
        keep = nearest[None] == np.arange(len(coverage))[:, None, None]
        return coverage & keep, overlap
    raise ValueError(f"unknown multi-object rule {rule!r}")


def render_scene(
    scene: SceneGroundTruth,
    prototypes: Mapping[str, CategoryPrototype],
    stride: int = 1,
    rule: str = MASK_OVERLAPS,
    deformed: bool = True,
) -> SceneRender:
    K = scene.intrinsics.scaled(stride)
    buffers, rasters = [], []
    for pose in scene.objects:
        if pose.category not in prototypes:
            raise MissingPrototypeError(f"no prototype for category {pose.category!r}")
        mesh = instance_mesh(pose, prototypes[pose.category], deformed)
        r = rasterize_mesh(mesh.vertices, mesh.triangles, K, pose.rotation, pose.translation)
        rasters.append(r)
        buffers.append(r.buffer)
    shape = (K.height, K.width)
    if buffers:
        coverage = np.stack([b.coverage for b in buffers])
        depths = np.stack([b.depth for b in buffers])
    else:
        coverage = np.zeros((0,) + shape, bool)
        depths = np.zeros((0,) + shape)
    per_object, overlap = combine_masks(coverage, depths, rule)
    return SceneRender(per_object, coverage.any(axis=0), overlap, tuple(buffers), tuple(rasters))


def render_prototype_masks(
    scene: SceneGroundTruth,
    prototypes: Mapping[str, CategoryPrototype],
    stride: int = 1,
    multi_object_rule: str = MASK_OVERLAPS,
    deformed: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-object masks (N, H, W) and the scene foreground mask (H, W)."""
    r = render_scene(scene, prototypes, stride, multi_object_rule, deformed)
    return r.per_object, r.foreground


def write_pgm(path, mask) -> None:
    """Binary PGM (P5), 1 byte per pixel; nonzero pixels are written as 255."""
    m = np.asarray(mask)
    img = np.where(m > 0, 255, 0).astype(np.uint8) if m.dtype == bool or m.max() <= 1 else m.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # Header is four whitespace-separated tokens followed by exactly one whitespace byte.
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM file")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)


# ------------------------------------------------------------------------ annotations


@dataclass(frozen=True)
class AnnotationSet:
    """Per-vertex (vertex feature, pixel feature, visibility) triples of one mesh.

    ``vertex_ids`` index the rows of the vertex bank the features came from,
    so the contrastive gradient can be routed back to shared vertex features.
    """

    vertex_ids: np.ndarray  # (V,) int
    vertex_features: np.ndarray  # (V, D)
    pixel_features: np.ndarray  # (V, D)
    visible: np.ndarray  # (V,) bool

    def __len__(self) -> int:
        return len(self.vertex_ids)


def snap_to_cells(pixels: np.ndarray, stride: int) -> np.ndarray:
    """Image pixel coordinates to (col, row) indices of the containing cell."""
    return np.floor(np.asarray(pixels) / stride).astype(np.int64)


def build_annotation_set(
    raster: MeshRaster,
    feature_map,
    vertex_ids: np.ndarray,
    vertex_features: np.ndarray,
    excluded_cells: np.ndarray | None = None,
) -> AnnotationSet:
    """Pair each vertex with the pixel feature of the cell its projection falls in.

    `raster` must be computed at image resolution. Vertices projecting outside
    the feature map, or into `excluded_cells` (e.g. multi-object overlaps),
    get visibility 0.
    """
    cells = snap_to_cells(raster.pixels, feature_map.stride)
    h, w = feature_map.height, feature_map.width
    inside = (cells[:, 0] >= 0) & (cells[:, 0] < w) & (cells[:, 1] >= 0) & (cells[:, 1] < h)
    cx = np.clip(cells[:, 0], 0, w - 1)
    cy = np.clip(cells[:, 1], 0, h - 1)
    visible = raster.visible & inside
    if excluded_cells is not None:
        visible &= ~excluded_cells[cy, cx]
    pixel_features = feature_map.features[cy, cx].astype(float)
    return AnnotationSet(
        np.asarray(vertex_ids, np.int64), np.asarray(vertex_features, float), pixel_features, visible
    )


def scene_annotation_sets(
    scene: SceneGroundTruth,
    prototypes: Mapping[str, CategoryPrototype],
    feature_map,
    bank,
    deformed: bool,
    rule: str = MASK_OVERLAPS,
) -> list[AnnotationSet]:
    """Annotation sets of every object against one feature map.

    Meshes are placed at ground-truth scale (deformed or mean shape) and
    rendered individually at image resolution; under ``mask_overlaps`` cells
    covered by more than one object are not supervised.
    """
    render = render_scene(scene, prototypes, feature_map.stride, rule, deformed)
    excluded = render.overlap if rule == MASK_OVERLAPS else None
    out = []
    for i, pose in enumerate(scene.objects):
        proto = prototypes[pose.category]
        mesh = instance_mesh(pose, proto, deformed)
        r = rasterize_mesh(mesh.vertices, mesh.triangles, scene.intrinsics, pose.rotation, pose.translation)
        if rule == KEEP_NEAREST:
            cells = snap_to_cells(r.pixels, feature_map.stride)
            cx = np.clip(cells[:, 0], 0, feature_map.width - 1)
            cy = np.clip(cells[:, 1], 0, feature_map.height - 1)
            owned = render.per_object[i][cy, cx] | ~render.foreground[cy, cx]
            r = MeshRaster(r.pixels, r.depths, r.visible & owned, r.buffer)
        ids = bank.global_ids(pose.category)
        out.append(build_annotation_set(r, feature_map, ids, proto.vertex_features, excluded))
    return out
