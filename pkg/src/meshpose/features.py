"""vMF feature likelihood, contrastive objective, mask losses and dense matching."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import (
    InconsistentAnnotationError,
    InvalidConcentrationError,
    MissingPrototypeError,
    NormalizationError,
    ShapeError,
    UndefinedLossError,
)
from .geometry import CategoryPrototype

DEFAULT_KAPPA = 1.0 / 0.07
DEFAULT_T1 = 0.5
DEFAULT_T2 = 0.7
DICE_EPS = 1e-6
_UNIT_TOL = 1e-6


def _unit_rows(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


# --------------------------------------------------------------------------- types


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Strided grid of unit feature vectors and a foreground heatmap.

    ``features[row, col]`` is the feature of the cell whose center is at image
    coordinate ``(stride * (col + 0.5), stride * (row + 0.5))``.
    """

    features: np.ndarray  # (H, W, D)
    heatmap: np.ndarray  # (H, W) in [0, 1]
    stride: int

    def __post_init__(self):
        if self.features.shape[:2] != self.heatmap.shape:
            raise ShapeError("feature grid and heatmap shapes differ")
        norms = np.linalg.norm(self.features, axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > _UNIT_TOL:
            raise NormalizationError("feature map entries must be unit vectors")
        if self.heatmap.size and (self.heatmap.min() < 0 or self.heatmap.max() > 1):
            raise ValueError("heatmap values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.heatmap.shape[0]

    @property
    def width(self) -> int:
        return self.heatmap.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


class VertexBank:
    """All categories' vertex features stacked in sorted category order."""

    def __init__(self, prototypes: Mapping[str, CategoryPrototype]):
        if not prototypes:
            raise MissingPrototypeError("empty prototype set")
        self.categories = sorted(prototypes)
        self.offsets = {}
        blocks, cat_idx, local = [], [], []
        offset = 0
        for ci, c in enumerate(self.categories):
            f = prototypes[c].vertex_features
            self.offsets[c] = offset
            blocks.append(f)
            cat_idx.append(np.full(len(f), ci))
            local.append(np.arange(len(f)))
            offset += len(f)
        self.features = np.concatenate(blocks).astype(float)
        self.category_index = np.concatenate(cat_idx)
        self.vertex_index = np.concatenate(local)

    def __len__(self) -> int:
        return len(self.features)

    def global_ids(self, category: str) -> np.ndarray:
        n = int(np.sum(self.category_index == self.categories.index(category)))
        return self.offsets[category] + np.arange(n)

    def with_features(self, features: np.ndarray) -> "VertexBank":
        clone = object.__new__(VertexBank)
        clone.__dict__.update(self.__dict__)
        clone.features = np.asarray(features, float)
        return clone


@dataclass(frozen=True)
class Correspondence:
    pixel: tuple[float, float]
    category: str
    vertex_index: int
    similarity: float


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Array form of a correspondence list, sorted by cell index."""

    pixels: np.ndarray  # (N, 2) image coordinates
    cells: np.ndarray  # (N, 2) (col, row)
    categories: np.ndarray  # (N,) str
    vertices: np.ndarray  # (N,) vertex index within category
    similarity: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.vertices)

    def subset(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.pixels[mask], self.cells[mask], self.categories[mask],
            self.vertices[mask], self.similarity[mask],
        )

    def for_category(self, category: str) -> "CorrespondenceSet":
        return self.subset(self.categories == category)

    def to_list(self) -> list[Correspondence]:
        return [
            Correspondence((float(p[0]), float(p[1])), str(c), int(v), float(s))
            for p, c, v, s in zip(self.pixels, self.categories, self.vertices, self.similarity)
        ]

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2), np.int64), np.array([], dtype=object),
                   np.zeros(0, np.int64), np.zeros(0))


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    per_object: tuple[float, ...]
    mask_loss: float


# ----------------------------------------------------------------------------- vMF


def vmf_log_likelihood(f, theta, kappa: float) -> float:
    """Unnormalized vMF log density kappa * f.theta (log C(kappa) omitted)."""
    f = np.asarray(f, float)
    theta = np.asarray(theta, float)
    for v in (f, theta):
        if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
            raise NormalizationError("vMF arguments must be unit vectors")
    return float(kappa * f @ theta)


def _wood_weights(kappa: float, dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampler for the mean-direction component w = f.mu (Wood, 1994)."""
    m = dim - 1
    b = m / (2.0 * kappa + np.sqrt(4.0 * kappa**2 + m**2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0**2)
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        z = rng.beta(m / 2.0, m / 2.0, size=todo.size)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=todo.size)
        ok = kappa * w + m * np.log(1.0 - x0 * w) - c >= np.log(u)
        out[todo[ok]] = w[ok]
        todo = todo[~ok]
    return out


def sample_vmf_batch(means, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """One vMF sample per row of `means` (N, D), all with concentration `kappa`."""
    if kappa < 0:
        raise InvalidConcentrationError(f"kappa must be non-negative, got {kappa}")
    means = np.atleast_2d(np.asarray(means, float))
    n, dim = means.shape
    if n == 0:
        return means.copy()
    if np.max(np.abs(np.linalg.norm(means, axis=1) - 1.0)) > _UNIT_TOL:
        raise NormalizationError("vMF mean directions must be unit vectors")
    w = _wood_weights(kappa, dim, n, rng)
    v = rng.standard_normal((n, dim))
    v -= np.sum(v * means, axis=1, keepdims=True) * means
    v = _unit_rows(v)
    x = w[:, None] * means + np.sqrt(np.clip(1.0 - w**2, 0.0, None))[:, None] * v
    return _unit_rows(x)


def sample_vmf(mean, kappa: float, rng: np.random.Generator) -> np.ndarray:
    return sample_vmf_batch(np.asarray(mean, float)[None], kappa, rng)[0]


def uniform_unit_vectors(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return _unit_rows(rng.standard_normal((n, dim)))


# ----------------------------------------------------------------- contrastive loss


def _contrastive_terms(annotations, bank: np.ndarray, kappa: float, negative_mask):
    vis = np.asarray(annotations.visible, bool)
    F = np.asarray(annotations.pixel_features, float)[vis]
    ids = np.asarray(annotations.vertex_ids)[vis]
    rows = np.arange(len(ids))
    Z = kappa * F @ bank.T
    if negative_mask is None:
        Zm = Z
    else:
        allowed = np.broadcast_to(np.asarray(negative_mask, bool), Z.shape).copy()
        allowed[rows, ids] = True
        Zm = np.where(allowed, Z, -np.inf)
    lse = logsumexp(Zm, axis=1)
    return vis, F, ids, rows, Zm, lse


def contrastive_loss(
    annotations, bank: np.ndarray, kappa: float = DEFAULT_KAPPA, negative_mask=None
) -> float:
    """Negative vMF log-likelihood ratio of each visible vertex against all others.

    `bank` (M, D) holds every vertex feature of every category; each
    annotation's positive is ``bank[vertex_id]`` and its negatives are all
    other rows (restricted to `negative_mask` if given). The positive term is
    part of the normalizer, so the loss is non-negative.
    """
    if not np.any(annotations.visible):
        raise UndefinedLossError("no visible vertex in the annotation set")
    _, _, ids, rows, Zm, lse = _contrastive_terms(annotations, np.asarray(bank, float), kappa, negative_mask)
    return float(np.sum(lse - Zm[rows, ids]))


def contrastive_loss_grad(
    annotations, bank: np.ndarray, kappa: float = DEFAULT_KAPPA, negative_mask=None
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of `contrastive_loss`.

    Returns ``(d/d pixel_features (V, D), d/d bank (M, D))``. Rows of invisible
    annotations are zero.
    """
    if not np.any(annotations.visible):
        raise UndefinedLossError("no visible vertex in the annotation set")
    bank = np.asarray(bank, float)
    vis, F, ids, rows, Zm, lse = _contrastive_terms(annotations, bank, kappa, negative_mask)
    G = np.exp(Zm - lse[:, None])  # softmax; exactly 0 outside the allowed set
    G[rows, ids] -= 1.0
    grad_f = np.zeros(np.shape(annotations.pixel_features))
    grad_f[vis] = kappa * G @ bank
    grad_bank = kappa * G.T @ F
    return grad_f, grad_bank


def _set_loss_and_grad(ann, bank, kappa, negative_mask, with_grad: bool):
    # Same quantities as contrastive_loss / contrastive_loss_grad, sharing one pass.
    if not np.any(ann.visible):
        return 0.0, (np.zeros_like(bank) if with_grad else None)
    _, F, ids, rows, Zm, lse = _contrastive_terms(ann, bank, kappa, negative_mask)
    loss = float(np.sum(lse - Zm[rows, ids]))
    if not with_grad:
        return loss, None
    G = np.exp(Zm - lse[:, None])
    G[rows, ids] -= 1.0
    return loss, kappa * G.T @ F


def training_loss(
    mean_sets: Sequence,
    instance_sets: Sequence,
    bank: np.ndarray,
    kappa: float = DEFAULT_KAPPA,
    mask_terms: Sequence[tuple] | None = None,
    with_grad: bool = False,
):
    """Average of the mean-shape and deformed-shape losses over all N objects.

    An object whose annotation set has no visible vertex contributes 0 for
    that map. `mask_terms` is an optional list of (pred, target) heatmap pairs
    whose dice losses are averaged into ``mask_loss``. With ``with_grad`` the
    gradient of ``total`` with respect to `bank` is returned as well.
    """
    if len(mean_sets) != len(instance_sets):
        raise InconsistentAnnotationError(
            f"{len(mean_sets)} mean-shape vs {len(instance_sets)} instance annotation sets"
        )
    n = len(mean_sets)
    if n == 0:
        raise InconsistentAnnotationError("no objects to supervise")
    bank = np.asarray(bank, float)
    per_object = []
    grad = np.zeros_like(bank) if with_grad else None
    for a, b in zip(mean_sets, instance_sets):
        la, ga = _set_loss_and_grad(a, bank, kappa, None, with_grad)
        lb, gb = _set_loss_and_grad(b, bank, kappa, None, with_grad)
        per_object.append((la + lb) / 2.0)
        if with_grad:
            grad += (ga + gb) / (2.0 * n)
    m = 0.0
    if mask_terms:
        m = float(np.mean([dice_loss(p, g) for p, g in mask_terms]))
    out = LossBreakdown(float(np.mean(per_object)), tuple(per_object), m)
    return (out, grad) if with_grad else out


# ------------------------------------------------------------------- segmentation


def dice_loss(pred, target, eps: float = DICE_EPS) -> float:
    p = np.asarray(pred, float)
    g = np.asarray(target, float)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return float(1.0 - 2.0 * np.sum(p * g) / (np.sum(p) + np.sum(g) + eps))


def mask_loss(H, H_gt, H_mean, H_mean_gt, eps: float = DICE_EPS) -> float:
    return (dice_loss(H, H_gt, eps) + dice_loss(H_mean, H_mean_gt, eps)) / 2.0


def minmax_normalize(x) -> np.ndarray:
    x = np.asarray(x, float)
    if x.size == 0:
        raise ValueError("empty grid")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


# ------------------------------------------------------------------------ matching


def match_correspondences(
    fmap: FeatureMap,
    prototypes: Mapping[str, CategoryPrototype] | VertexBank,
    t1: float = DEFAULT_T1,
    t2: float = DEFAULT_T2,
    chunk: int = 4096,
) -> CorrespondenceSet:
    """Best-matching vertex over all categories for every foreground cell.

    Cells with heatmap below `t1` or best similarity below `t2` yield
    nothing. Ties go to the smallest (category, vertex) key. Output is
    ordered by row-major cell index.
    """
    if not 0.0 <= t1 <= 1.0 or not -1.0 <= t2 <= 1.0:
        raise ValueError("thresholds out of range")
    bank = prototypes if isinstance(prototypes, VertexBank) else VertexBank(prototypes)
    rows, cols = np.nonzero(fmap.heatmap >= t1)
    feats = fmap.features[rows, cols]
    best = np.empty(len(rows), np.int64)
    sim = np.empty(len(rows))
    B = bank.features.T
    for s in range(0, len(rows), chunk):
        S = feats[s : s + chunk].astype(float) @ B
        best[s : s + chunk] = np.argmax(S, axis=1)
        sim[s : s + chunk] = S[np.arange(len(S)), best[s : s + chunk]]
    keep = sim >= t2
    rows, cols, best, sim = rows[keep], cols[keep], best[keep], np.clip(sim[keep], -1.0, 1.0)
    cats = np.array(bank.categories, dtype=object)[bank.category_index[best]]
    s = fmap.stride
    pixels = np.stack([s * (cols + 0.5), s * (rows + 0.5)], axis=1).astype(float)
    return CorrespondenceSet(
        pixels.reshape(-1, 2), np.stack([cols, rows], axis=1).reshape(-1, 2),
        cats, bank.vertex_index[best], sim,
    )


CSV_FIELDS = ("pixel_x", "pixel_y", "category", "vertex", "similarity")


def write_correspondences_csv(path, corr: CorrespondenceSet, stride: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for p, c, v, s in zip(corr.pixels, corr.categories, corr.vertices, corr.similarity):
            w.writerow((repr(float(p[0])), repr(float(p[1])), c, int(v), repr(float(s))))


def read_correspondences_csv(path, stride: int = 1) -> CorrespondenceSet:
    """Inverse of `write_correspondences_csv`; cells are recovered from pixels."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return CorrespondenceSet.empty()
    pixels = np.array([[float(r["pixel_x"]), float(r["pixel_y"])] for r in rows])
    cells = np.floor(pixels / stride).astype(np.int64)
    return CorrespondenceSet(
        pixels, cells,
        np.array([r["category"] for r in rows], dtype=object),
        np.array([int(r["vertex"]) for r in rows], np.int64),
        np.array([float(r["similarity"]) for r in rows]),
    )
