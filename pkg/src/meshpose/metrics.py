"""Evaluation: 3D IoU, scale alignment, symmetric rotation error, hit tables and reports."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateBoxWarning,
    InvalidRotationError,
    InvalidScaleError,
    InvalidSizeError,
    ShapeError,
)
from .geometry import Pose9D, SceneGroundTruth, is_rotation, matrix_to_quaternion, rotation_angle

Y_AXIS = (0.0, 1.0, 0.0)
# NOCS convention: bottle, bowl and can are rotationally symmetric about their vertical axis.
DEFAULT_SYMMETRY: dict[str, tuple | None] = {
    "bottle": Y_AXIS,
    "bowl": Y_AXIS,
    "can": Y_AXIS,
    "camera": None,
    "laptop": None,
    "mug": None,
}

SCALE_AGNOSTIC_COLUMNS = (
    "NIoU25", "NIoU50", "NIoU75",
    "5°0.2d", "5°0.5d", "10°0.2d", "10°0.5d",
    "0.2d", "0.5d", "5°", "10°",
)
ABSOLUTE_COLUMNS = ("IoU50", "IoU75", "5°5cm", "5°10cm", "10°5cm", "10°10cm")
COLUMNS = SCALE_AGNOSTIC_COLUMNS + ABSOLUTE_COLUMNS


@dataclass(frozen=True, eq=False)
class OrientedBox:
    center: np.ndarray
    rotation: np.ndarray
    size: np.ndarray  # full extents

    def __post_init__(self):
        size = np.asarray(self.size, float)
        if size.shape != (3,) or np.any(size < 0) or not np.all(np.isfinite(size)):
            raise InvalidSizeError(f"box size must be 3 non-negative extents, got {size}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, float))

    @classmethod
    def from_pose(cls, pose: Pose9D) -> "OrientedBox":
        return cls(pose.translation, pose.rotation, pose.size)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return (signs * self.size / 2) @ self.rotation.T + self.center

    def faces(self) -> list[np.ndarray]:
        """Six quads, vertices ordered counter-clockwise seen from outside."""
        c = self.corners()
        # corner index = 4*ix + 2*iy + iz
        quads = [
            (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
            (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
            (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
        ]
        return [c[list(q)] for q in quads]

    def halfspaces(self) -> list[tuple[np.ndarray, float]]:
        """(n, h) pairs with the box equal to the set n·x <= h for all pairs."""
        out = []
        for k in range(3):
            n = self.rotation[:, k]
            c = float(n @ self.center)
            out.append((n, c + self.size[k] / 2))
            out.append((-n, -c + self.size[k] / 2))
        return out


def _clip_polygon(poly: np.ndarray, s: np.ndarray):
    """Sutherland-Hodgman: keep the part of a planar polygon with signed distance s <= 0."""
    out, new = [], []
    m = len(poly)
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        sa, sb = s[i], s[(i + 1) % m]
        if sa <= 0:
            out.append(a)
        if sa == 0:
            new.append(a)
        elif (sa < 0 < sb) or (sb < 0 < sa):
            p = a + (sa / (sa - sb)) * (b - a)
            out.append(p)
            new.append(p)
    return (np.array(out) if out else np.zeros((0, 3))), new


def _cap_polygon(points: list, n: np.ndarray, tol: float) -> np.ndarray:
    """Order coplanar points counter-clockwise about `n` (outward normal)."""
    P = np.array(points)
    keep = [0]
    for i in range(1, len(P)):
        if np.min(np.linalg.norm(P[keep] - P[i], axis=1)) > tol:
            keep.append(i)
    P = P[keep]
    if len(P) < 3:
        return np.zeros((0, 3))
    c = P.mean(axis=0)
    u = P[np.argmax(np.linalg.norm(P - c, axis=1))] - c
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    ang = np.arctan2((P - c) @ v, (P - c) @ u)
    return P[np.argsort(ang)]


def clip_polytope(faces: list[np.ndarray], n: np.ndarray, h: float, tol: float = 0.0) -> list[np.ndarray]:
    """Clip a closed convex polytope (list of face polygons) by the half-space n·x <= h.

    Signed distances within `tol` of the plane count as on it, so faces
    lying in the clipping plane are kept once rather than duplicated.
    """
    if not faces:
        return []
    n = n / np.linalg.norm(n)
    dist = []
    for f in faces:
        s = f @ n - h
        s[np.abs(s) <= tol] = 0.0
        dist.append(s)
    s_all = np.concatenate(dist)
    if np.all(s_all <= 0):
        return faces
    if np.all(s_all >= 0):
        return []
    out, cut = [], []
    for f, s in zip(faces, dist):
        g, new = _clip_polygon(f, s)
        cut.extend(new)
        if len(g) >= 3:
            out.append(g)
    if out and len(cut) >= 3:
        cap = _cap_polygon(cut, n, max(tol, 1e-300))
        if len(cap) >= 3:
            out.append(cap)
    return out


def polytope_volume(faces: list[np.ndarray]) -> float:
    """Volume of a closed polytope from outward-oriented faces (divergence theorem)."""
    if not faces:
        return 0.0
    ref = np.mean(np.vstack(faces), axis=0)
    vol = 0.0
    for f in faces:
        a = f[0] - ref
        for i in range(1, len(f) - 1):
            vol += np.dot(a, np.cross(f[i] - ref, f[i + 1] - ref))
    return abs(vol) / 6.0


def intersection_volume(a: OrientedBox, b: OrientedBox) -> float:
    faces = a.faces()
    tol = 1e-9 * max(float(np.max(a.size)), float(np.max(b.size)), 1e-300)
    for n, h in b.halfspaces():
        faces = clip_polytope(faces, n, h, tol)
        if not faces:
            return 0.0
    return polytope_volume(faces)


def iou3d(a: OrientedBox, b: OrientedBox) -> float:
    """Exact IoU of two oriented boxes; zero (with a warning) if either is flat."""
    va, vb = a.volume, b.volume
    if va <= 0 or vb <= 0:
        warnings.warn("zero-volume box in iou3d", DegenerateBoxWarning, stacklevel=2)
        return 0.0
    inter = min(intersection_volume(a, b), va, vb)
    return float(np.clip(inter / (va + vb - inter), 0.0, 1.0))


def scale_align(pred: Pose9D, gt: Pose9D) -> Pose9D:
    """Rescale the prediction's size and translation so its scale equals the ground truth's."""
    if not pred.scale > 0:
        raise InvalidScaleError("prediction scale must be positive")
    alpha = gt.scale / pred.scale
    return replace(pred, translation=pred.translation * alpha, size=pred.size * alpha)


def rotation_error(R_pred, R_gt, axis=None) -> float:
    """Angular error in degrees; with a symmetry axis, the angle between the rotated axes."""
    R_pred = np.asarray(R_pred, float)
    R_gt = np.asarray(R_gt, float)
    if not (is_rotation(R_pred) and is_rotation(R_gt)):
        raise InvalidRotationError("rotation_error expects rotation matrices")
    if axis is None:
        return math.degrees(rotation_angle(R_pred.T @ R_gt))
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    p, g = R_pred @ a, R_gt @ a
    return math.degrees(math.atan2(np.linalg.norm(np.cross(p, g)), float(p @ g)))


def translation_error_normalized(t_pred_aligned, t_gt, d_gt: float) -> float:
    if not d_gt > 0:
        raise InvalidSizeError("d_gt must be positive")
    return float(np.linalg.norm(np.asarray(t_pred_aligned) - np.asarray(t_gt)) / d_gt)


def niou(pred: Pose9D, gt: Pose9D) -> float:
    """IoU of the scale-aligned prediction box with the GT box, both in units of d_gt."""
    al = scale_align(pred, gt)
    d = gt.scale
    a = OrientedBox(al.translation / d, al.rotation, al.size / d)
    b = OrientedBox(gt.translation / d, gt.rotation, gt.size / d)
    return iou3d(a, b)


@dataclass(frozen=True)
class MetricThresholds:
    niou: tuple = (0.25, 0.50, 0.75)
    iou: tuple = (0.50, 0.75)
    degrees: tuple = (5.0, 10.0)
    normalized: tuple = (0.2, 0.5)
    meters: tuple = (0.05, 0.10)


@dataclass(frozen=True)
class MatchRecord:
    category: str
    pred_index: int
    gt_index: int
    niou: float
    rotation_deg: float
    translation_norm: float
    iou: float
    translation_m: float

    def hits(self, th: MetricThresholds = MetricThresholds()) -> dict[str, bool]:
        r, tn, tm = self.rotation_deg, self.translation_norm, self.translation_m
        out = {}
        for q, name in zip(th.niou, SCALE_AGNOSTIC_COLUMNS[:3]):
            out[name] = self.niou >= q
        deg5, deg10 = th.degrees
        n2, n5 = th.normalized
        out["5°0.2d"] = r <= deg5 and tn <= n2
        out["5°0.5d"] = r <= deg5 and tn <= n5
        out["10°0.2d"] = r <= deg10 and tn <= n2
        out["10°0.5d"] = r <= deg10 and tn <= n5
        out["0.2d"] = tn <= n2
        out["0.5d"] = tn <= n5
        out["5°"] = r <= deg5
        out["10°"] = r <= deg10
        out["IoU50"] = self.iou >= th.iou[0]
        out["IoU75"] = self.iou >= th.iou[1]
        cm5, cm10 = th.meters
        out["5°5cm"] = r <= deg5 and tm <= cm5
        out["5°10cm"] = r <= deg5 and tm <= cm10
        out["10°5cm"] = r <= deg10 and tm <= cm5
        out["10°10cm"] = r <= deg10 and tm <= cm10
        return out


@dataclass
class CategoryHits:
    gt_count: int = 0
    false_positives: int = 0
    matched: int = 0
    hits: dict = field(default_factory=lambda: {c: 0 for c in COLUMNS})

    def add(self, other: "CategoryHits") -> None:
        self.gt_count += other.gt_count
        self.false_positives += other.false_positives
        self.matched += other.matched
        for c in COLUMNS:
            self.hits[c] += other.hits[c]


@dataclass
class SceneHits:
    per_category: dict  # category -> CategoryHits
    matches: list  # MatchRecord


def _canonical_order(preds: Sequence[Pose9D]) -> list[int]:
    def key(i):
        p = preds[i]
        return (p.category, *np.round(p.translation, 12), *np.round(matrix_to_quaternion(p.rotation), 12),
                *np.round(p.size, 12))
    return sorted(range(len(preds)), key=key)


def evaluate_scene(
    predictions: Sequence[Pose9D],
    gt: SceneGroundTruth,
    symmetry: Mapping[str, tuple | None] = DEFAULT_SYMMETRY,
    thresholds: MetricThresholds = MetricThresholds(),
) -> SceneHits:
    """Greedy one-to-one matching per category by descending NIoU, then threshold hits.

    Every same-category pair is a candidate, so a detection with no overlap
    still claims a ground-truth object (and then fails every threshold) rather
    than counting as a false positive. Ties go to the lower normalized
    translation error, then to the lower index in a canonical (sorted) order
    of predictions, so the result does not depend on input order.
    """
    order = _canonical_order(predictions)
    preds = [predictions[i] for i in order]
    gts = list(gt.objects)
    out: dict[str, CategoryHits] = {}
    matches = []
    cats = sorted({p.category for p in preds} | {g.category for g in gts})
    for c in cats:
        pi = [i for i, p in enumerate(preds) if p.category == c]
        gi = [j for j, g in enumerate(gts) if g.category == c]
        table = CategoryHits(gt_count=len(gi))
        cand = []
        for i in pi:
            for j in gi:
                v = niou(preds[i], gts[j])
                al = scale_align(preds[i], gts[j])
                te = translation_error_normalized(al.translation, gts[j].translation, gts[j].scale)
                cand.append((-v, te, i, j))
        cand.sort()
        used_p, used_g = set(), set()
        for negv, te, i, j in cand:
            if i in used_p or j in used_g:
                continue
            used_p.add(i)
            used_g.add(j)
            p, g = preds[i], gts[j]
            rec = MatchRecord(
                category=c,
                pred_index=order[i],
                gt_index=j,
                niou=-negv,
                rotation_deg=rotation_error(p.rotation, g.rotation, symmetry.get(c)),
                translation_norm=te,
                iou=iou3d(OrientedBox.from_pose(p), OrientedBox.from_pose(g)),
                translation_m=float(np.linalg.norm(p.translation - g.translation)),
            )
            matches.append(rec)
            table.matched += 1
            for name, hit in rec.hits(thresholds).items():
                table.hits[name] += int(hit)
        table.false_positives = len(pi) - len(used_p)
        out[c] = table
    return SceneHits(out, matches)


@dataclass
class MetricsReport:
    per_category: dict  # category -> {column: percent}
    mean: dict  # column -> percent
    recall: dict  # category -> percent of GT matched, plus "mean"
    counts: dict  # category -> {"gt", "false_positives", "matched"}

    def to_dict(self) -> dict:
        return {
            "columns": list(COLUMNS),
            "per_category": self.per_category,
            "mean": self.mean,
            "recall": self.recall,
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", *COLUMNS])
        for c in sorted(self.per_category):
            w.writerow([c, *(f"{self.per_category[c][k]:.4f}" for k in COLUMNS)])
        w.writerow(["mean", *(f"{self.mean[k]:.4f}" for k in COLUMNS)])
        return buf.getvalue()


def aggregate_map(tables: Iterable[SceneHits]) -> MetricsReport:
    """Pool hit tables over scenes; rate = hits / (GT + false positives), in percent."""
    total: dict[str, CategoryHits] = {}
    for t in tables:
        for c, h in t.per_category.items():
            total.setdefault(c, CategoryHits()).add(h)
    per_cat, recall, counts = {}, {}, {}
    for c in sorted(total):
        h = total[c]
        denom = max(h.gt_count, h.gt_count + h.false_positives)
        counts[c] = {"gt": h.gt_count, "false_positives": h.false_positives, "matched": h.matched}
        if denom == 0:
            continue
        per_cat[c] = {k: 100.0 * h.hits[k] / denom for k in COLUMNS}
        recall[c] = 100.0 * h.matched / h.gt_count if h.gt_count else 0.0
    if per_cat:
        mean = {k: float(np.mean([per_cat[c][k] for c in per_cat])) for k in COLUMNS}
        recall["mean"] = float(np.mean([recall[c] for c in per_cat]))
    else:
        mean = {k: 0.0 for k in COLUMNS}
        recall["mean"] = 0.0
    return MetricsReport(per_cat, mean, recall, counts)


def monotonicity_violations(report: MetricsReport) -> list[str]:
    """Pairs (looser, tighter) where the looser threshold scored lower."""
    pairs = [
        ("NIoU25", "NIoU50"), ("NIoU50", "NIoU75"), ("IoU50", "IoU75"),
        ("10°", "5°"), ("0.5d", "0.2d"),
        ("5°0.5d", "5°0.2d"), ("10°0.2d", "5°0.2d"), ("10°0.5d", "10°0.2d"), ("10°0.5d", "5°0.5d"),
        ("5°", "5°0.2d"), ("0.2d", "5°0.2d"), ("10°", "10°0.5d"), ("0.5d", "10°0.5d"),
        ("5°10cm", "5°5cm"), ("10°5cm", "5°5cm"), ("10°10cm", "10°5cm"), ("10°10cm", "5°10cm"),
    ]
    bad = []
    rows = dict(report.per_category)
    rows["mean"] = report.mean
    for name, row in rows.items():
        for loose, tight in pairs:
            if row[loose] < row[tight] - 1e-12:
                bad.append(f"{name}: {loose} < {tight}")
    return bad


def poses_from_jsonl(text: str) -> list[Pose9D]:
    out = []
    for line in text.splitlines():
        if line.strip():
            out.append(Pose9D.from_dict(json.loads(line)))
    return out


def validate_report_dict(d: dict) -> None:
    """Schema check for a serialized MetricsReport."""
    if list(d.get("columns", [])) != list(COLUMNS):
        raise ShapeError("report columns do not match the metric set")
    for key in ("per_category", "mean", "recall", "counts"):
        if key not in d:
            raise ShapeError(f"report missing {key!r}")
    for row in [d["mean"], *d["per_category"].values()]:
        for k in COLUMNS:
            v = row[k]
            if not (0.0 <= v <= 100.0):
                raise ShapeError(f"metric {k} out of range: {v}")
