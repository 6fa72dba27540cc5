"""Synthetic scenes and feature maps standing in for a trained feature extractor.

A scene is a set of ground-truth 9D poses. For each scene two feature maps
are rendered at feature-map resolution: one aligned with the mean-shape mesh
and one with the deformed instance mesh, both placed at the instance's
ground-truth scale. A covered cell carries a vMF sample around the feature of
the visible mesh vertex whose projection is nearest to the cell centre.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, PlacementError
from .features import DEFAULT_KAPPA, FeatureMap, sample_vmf_batch, uniform_unit_vectors
from .geometry import (
    CameraIntrinsics,
    CategoryPrototype,
    Pose9D,
    SceneGroundTruth,
    box_corners,
    default_intrinsics,
    random_rotation,
    render_scale,
)
from .raster import MASK_OVERLAPS, render_scene

OBSERVATION_FORMAT_VERSION = 1
MAX_PLACEMENT_ATTEMPTS = 1000
BACKGROUND = -1


@dataclass(frozen=True)
class SimConfig:
    categories: tuple = ("bottle", "bowl", "camera", "can", "laptop", "mug")
    instances: tuple = (1, 4)  # inclusive range of objects per scene
    same_category: bool = False  # all objects of a scene share one category
    depth_range: tuple = (0.5, 2.0)  # metres
    scale_range: tuple = (0.8, 1.2)  # multiplier on each category's mean scale
    deformation_range: tuple = (0.7, 1.3)  # per axis
    kappa: float = DEFAULT_KAPPA
    # Concentration actually used is kappa * D unless `literal_kappa`; see sample_cell_features.
    literal_kappa: bool = False
    outlier_rate: float = 0.0
    heatmap_sigma: float = 0.0
    occlusion: bool = False  # allow heavily overlapping placements
    max_overlap: float = 0.8
    distractors: bool = False  # background cells imitate other categories' vertices
    stride: int = 4
    seed: int = 0
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)

    def __post_init__(self):
        lo, hi = self.instances
        if not 0 <= lo <= hi:
            raise ConfigError("instances must be a range 0 <= lo <= hi")
        for name in ("depth_range", "scale_range", "deformation_range"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi")
        if self.kappa < 0:
            raise ConfigError("kappa must be non-negative")
        if not 0 <= self.outlier_rate < 1:
            raise ConfigError("outlier_rate must lie in [0, 1)")
        if self.heatmap_sigma < 0:
            raise ConfigError("heatmap_sigma must be non-negative")
        if not 0 < self.max_overlap <= 1:
            raise ConfigError("max_overlap must lie in (0, 1]")
        if self.stride < 1:
            raise ConfigError("stride must be a positive integer")
        if not self.categories:
            raise ConfigError("at least one category is required")

    def effective_kappa(self, dim: int) -> float:
        return self.kappa if self.literal_kappa else self.kappa * dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intrinsics"] = self.intrinsics.to_dict()
        d["categories"] = list(self.categories)
        return d


def scene_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Seed stream of one scene; independent of how scenes are scheduled."""
    return np.random.SeedSequence([int(seed), int(index)])


def _projected_box(K: CameraIntrinsics, R, t, size):
    X = box_corners(size) @ np.asarray(R).T + t
    if np.any(X[:, 2] <= 0.05):
        return None
    uv = np.stack([K.fx * X[:, 0] / X[:, 2] + K.cx, K.fy * X[:, 1] / X[:, 2] + K.cy], axis=1)
    return uv.min(axis=0), uv.max(axis=0)


def _overlap_fraction(a, b) -> float:
    """Intersection of two 2D AABBs over the smaller area."""
    lo = np.maximum(a[0], b[0])
    hi = np.minimum(a[1], b[1])
    inter = np.prod(np.clip(hi - lo, 0, None))
    small = min(np.prod(a[1] - a[0]), np.prod(b[1] - b[0]))
    return float(inter / small) if small > 0 else 1.0


def generate_scene(
    config: SimConfig,
    prototypes: Mapping[str, CategoryPrototype],
    rng: np.random.Generator,
) -> SceneGroundTruth:
    """Sample objects fully inside the image, rejecting heavy 2D box overlaps."""
    K = config.intrinsics
    cats = sorted(config.categories)
    for c in cats:
        if c not in prototypes:
            raise ConfigError(f"no prototype for category {c!r}")
    n = int(rng.integers(config.instances[0], config.instances[1] + 1))
    fixed = cats[int(rng.integers(len(cats)))] if config.same_category else None
    objects, scales, boxes = [], [], []
    for _ in range(n):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            cat = fixed or cats[int(rng.integers(len(cats)))]
            proto = prototypes[cat]
            R = random_rotation(rng)
            z = rng.uniform(*config.depth_range)
            u = rng.uniform(0, K.width)
            v = rng.uniform(0, K.height)
            t = z * np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
            d = rng.uniform(*config.deformation_range, size=3)
            sigma = proto.mean_scale * rng.uniform(*config.scale_range)
            shape = d * proto.mean_size
            size = sigma * shape / np.linalg.norm(shape)
            box = _projected_box(K, R, t, size)
            if box is None or np.any(box[0] < 0) or box[1][0] > K.width or box[1][1] > K.height:
                continue
            if not config.occlusion and any(_overlap_fraction(box, b) > config.max_overlap for b in boxes):
                continue
            pose = Pose9D(cat, R, t, d, size)
            objects.append(pose)
            scales.append(render_scale(pose, proto))
            boxes.append(box)
            break
        else:
            raise PlacementError(f"could not place object {len(objects) + 1} of {n}")
    return SceneGroundTruth(tuple(objects), K, tuple(scales))


@dataclass(frozen=True, eq=False)
class SimulatedObservation:
    mean_scale_map: FeatureMap
    instance_scale_map: FeatureMap
    gt: SceneGroundTruth
    # (H, W, 2) int: (object index, vertex index) per cell, -1 for background/unsupervised.
    mean_labels: np.ndarray
    instance_labels: np.ndarray
    # (H, W) bool: label-covered cells whose feature was replaced by an outlier.
    mean_replaced: np.ndarray
    instance_replaced: np.ndarray

    @property
    def true_correspondence_labels(self) -> np.ndarray:
        return self.mean_labels


def _cell_labels(scene: SceneGroundTruth, prototypes, stride: int, deformed: bool):
    """Per-cell (object, vertex) labels, foreground mask and overlap mask.

    A covered cell is labelled with the visible vertex whose projection is
    nearest to the cell centre.
    """
    render = render_scene(scene, prototypes, stride, MASK_OVERLAPS, deformed)
    h, w = render.foreground.shape
    labels = np.full((h, w, 2), BACKGROUND, np.int64)
    for i, raster in enumerate(render.rasters):
        rows, cols = np.nonzero(render.per_object[i])
        if len(rows) == 0:
            continue
        candidates = np.flatnonzero(raster.visible)
        if len(candidates) == 0:
            candidates = np.arange(len(raster.pixels))
        tree = cKDTree(raster.pixels[candidates])
        _, nearest = tree.query(np.stack([cols + 0.5, rows + 0.5], axis=1))
        labels[rows, cols, 0] = i
        labels[rows, cols, 1] = candidates[nearest]
    return labels, render.foreground, render.overlap


def sample_cell_features(
    labels: np.ndarray,
    scene: SceneGroundTruth,
    prototypes,
    config: SimConfig,
    rng: np.random.Generator,
):
    """Noisy features for a labelled cell grid; returns (features, replaced).

    Every random draw is made for every cell regardless of `outlier_rate`, so
    scenes simulated at different outlier rates share the same noise and
    differ only in which cells get replaced.

    With `literal_kappa` off the vMF concentration is kappa * D. The mean
    cosine of a vMF sample with its mean is roughly kappa / (kappa + D / 2),
    so kappa = 1/0.07 in 64 dimensions would leave features nearly
    uncorrelated with their vertex; scaling by D keeps the per-dimension
    concentration at the training value.
    """
    h, w = labels.shape[:2]
    dim = next(iter(prototypes.values())).feature_dim
    obj = labels[..., 0].ravel()
    vert = labels[..., 1].ravel()
    covered = obj >= 0
    u = rng.uniform(size=h * w)
    random_feats = uniform_unit_vectors(h * w, dim, rng)
    feats = random_feats.copy()
    idx = np.flatnonzero(covered)
    if len(idx):
        means = np.stack([
            prototypes[scene.objects[o].category].vertex_features[v] for o, v in zip(obj[idx], vert[idx])
        ])
        feats[idx] = sample_vmf_batch(means, config.effective_kappa(dim), rng)
    if config.distractors:
        bg = np.flatnonzero(~covered)
        present = {o.category for o in scene.objects}
        others = [c for c in sorted(prototypes) if c not in present] or sorted(prototypes)
        pick_c = rng.integers(len(others), size=len(bg))
        means = np.stack([
            prototypes[others[c]].vertex_features[rng.integers(prototypes[others[c]].num_vertices)]
            for c in pick_c
        ]) if len(bg) else np.zeros((0, dim))
        feats[bg] = sample_vmf_batch(means, config.effective_kappa(dim), rng)
    replaced = covered & (u < config.outlier_rate)
    feats[replaced] = random_feats[replaced]
    return feats.reshape(h, w, dim), replaced.reshape(h, w)


def _heatmap(foreground: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, foreground.shape)
    return np.clip(foreground.astype(float) + sigma * noise, 0.0, 1.0)


def synthesize_feature_maps(
    scene: SceneGroundTruth,
    prototypes: Mapping[str, CategoryPrototype],
    config: SimConfig,
    rng: np.random.Generator,
) -> SimulatedObservation:
    maps, labels, replaced = [], [], []
    for deformed, child in zip((False, True), rng.spawn(2)):
        lab, fg, _ = _cell_labels(scene, prototypes, config.stride, deformed)
        feats, rep = sample_cell_features(lab, scene, prototypes, config, child)
        heat = _heatmap(fg, config.heatmap_sigma, child)
        maps.append(FeatureMap(feats, heat, config.stride))
        labels.append(lab)
        replaced.append(rep)
    return SimulatedObservation(maps[0], maps[1], scene, labels[0], labels[1], replaced[0], replaced[1])


def simulate(
    config: SimConfig, prototypes: Mapping[str, CategoryPrototype], index: int = 0
) -> SimulatedObservation:
    """Scene `index` of the stream defined by `config.seed`."""
    scene_rng, maps_rng = (np.random.default_rng(s) for s in scene_seed(config.seed, index).spawn(2))
    scene = generate_scene(config, prototypes, scene_rng)
    return synthesize_feature_maps(scene, prototypes, config, maps_rng)


# --------------------------------------------------------------------- container


def save_observation(path, obs: SimulatedObservation) -> None:
    """Write an observation as an .npz container.

    Keys: ``format_version``; ``header`` = (height, width, stride, D) in cells;
    ``mean_features``/``instance_features`` float32 (H, W, D);
    ``mean_heatmap``/``instance_heatmap`` float32 (H, W);
    ``mean_labels``/``instance_labels`` int32 (H, W, 2);
    ``mean_replaced``/``instance_replaced`` bool (H, W);
    ``gt`` = JSON text with intrinsics, render scales and the Pose9D records.
    """
    m, f = obs.mean_scale_map, obs.instance_scale_map
    gt = {
        "intrinsics": obs.gt.intrinsics.to_dict(),
        "render_scales": list(obs.gt.render_scales),
        "objects": [o.to_dict() for o in obs.gt.objects],
    }
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh,
            format_version=np.int64(OBSERVATION_FORMAT_VERSION),
            header=np.array([m.height, m.width, m.stride, m.dim], np.int64),
            mean_features=m.features.astype(np.float32),
            instance_features=f.features.astype(np.float32),
            mean_heatmap=m.heatmap.astype(np.float32),
            instance_heatmap=f.heatmap.astype(np.float32),
            mean_labels=obs.mean_labels.astype(np.int32),
            instance_labels=obs.instance_labels.astype(np.int32),
            mean_replaced=obs.mean_replaced,
            instance_replaced=obs.instance_replaced,
            gt=np.array(json.dumps(gt)),
        )


def _unit32(x: np.ndarray) -> np.ndarray:
    x = x.astype(float)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def load_observation(path) -> SimulatedObservation:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != OBSERVATION_FORMAT_VERSION:
            raise ValueError(f"unsupported observation format version {version}")
        h, w, stride, dim = (int(v) for v in z["header"])
        gt_json = json.loads(str(z["gt"]))
        K = CameraIntrinsics(**gt_json["intrinsics"])
        gt = SceneGroundTruth(
            tuple(Pose9D.from_dict(o) for o in gt_json["objects"]), K, tuple(gt_json["render_scales"])
        )
        maps = []
        for p in ("mean", "instance"):
            feats = _unit32(z[f"{p}_features"])
            heat = np.clip(z[f"{p}_heatmap"].astype(float), 0.0, 1.0)
            if feats.shape != (h, w, dim):
                raise ValueError("feature grid does not match header")
            maps.append(FeatureMap(feats, heat, stride))
        return SimulatedObservation(
            maps[0], maps[1], gt,
            z["mean_labels"].astype(np.int64), z["instance_labels"].astype(np.int64),
            z["mean_replaced"].astype(bool), z["instance_replaced"].astype(bool),
        )


def inlier_assignment(hypotheses, correspondences, labels: np.ndarray, gt_for_hypothesis) -> tuple[int, int]:
    """(correct, total) inlier correspondences over all hypotheses.

    An inlier is correct when the simulator labelled its cell with the ground
    truth object the hypothesis was matched to; `gt_for_hypothesis[i]` is that
    object's index or None for an unmatched hypothesis.
    """
    correct = total = 0
    for h, g in zip(hypotheses, gt_for_hypothesis):
        cells = correspondences.cells[h.inliers]
        owner = labels[cells[:, 1], cells[:, 0], 0]
        total += len(owner)
        if g is not None:
            correct += int(np.sum(owner == g))
    return correct, total
