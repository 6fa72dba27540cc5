"""Fitting vertex features to fixed pixel features with the contrastive gradient.

The pixel features stand in for a frozen extractor's output, so only the
vertex bank is optimized: projected gradient descent on the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .features import DEFAULT_KAPPA, VertexBank, training_loss, uniform_unit_vectors
from .geometry import CategoryPrototype
from .raster import AnnotationSet, scene_annotation_sets


@dataclass(frozen=True, eq=False)
class TrainingScene:
    mean_sets: tuple[AnnotationSet, ...]
    instance_sets: tuple[AnnotationSet, ...]


@dataclass(eq=False)
class TrainingHistory:
    losses: list = field(default_factory=list)  # total loss before each step, then after the last

    @property
    def reduction(self) -> float:
        return 1.0 - self.losses[-1] / self.losses[0]


def observation_scenes(observations, prototypes: Mapping[str, CategoryPrototype], bank: VertexBank):
    """Annotation sets of simulated observations against both of their maps."""
    out = []
    for obs in observations:
        m = scene_annotation_sets(obs.gt, prototypes, obs.mean_scale_map, bank, deformed=False)
        i = scene_annotation_sets(obs.gt, prototypes, obs.instance_scale_map, bank, deformed=True)
        out.append(TrainingScene(tuple(m), tuple(i)))
    return out


def total_loss(scenes: Sequence[TrainingScene], features: np.ndarray, kappa: float = DEFAULT_KAPPA, with_grad=False):
    """Mean over scenes of the per-scene training loss (and its gradient in `features`)."""
    losses, grad = [], np.zeros_like(features) if with_grad else None
    for s in scenes:
        r = training_loss(s.mean_sets, s.instance_sets, features, kappa, with_grad=with_grad)
        if with_grad:
            r, g = r
            grad += g / len(scenes)
        losses.append(r.total)
    total = float(np.mean(losses))
    return (total, grad) if with_grad else total


def fit_vertex_features(
    scenes: Sequence[TrainingScene],
    initial: np.ndarray,
    steps: int = 500,
    learning_rate: float = 0.1,
    kappa: float = DEFAULT_KAPPA,
) -> tuple[np.ndarray, TrainingHistory]:
    """Gradient steps on the bank, each followed by renormalizing every row."""
    theta = np.array(initial, float)
    hist = TrainingHistory()
    for _ in range(steps):
        loss, g = total_loss(scenes, theta, kappa, with_grad=True)
        hist.losses.append(loss)
        theta -= learning_rate * g
        theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    hist.losses.append(total_loss(scenes, theta, kappa))
    return theta, hist


def random_bank(bank: VertexBank, rng: np.random.Generator) -> np.ndarray:
    return uniform_unit_vectors(len(bank), bank.features.shape[1], rng)


def matching_accuracy(observations, bank: VertexBank, features: np.ndarray) -> float:
    """Fraction of labelled, uncorrupted mean-map cells whose best-scoring vertex is the true one."""
    hits = total = 0
    for obs in observations:
        lab = obs.mean_labels
        ok = (lab[..., 0] >= 0) & ~obs.mean_replaced
        rows, cols = np.nonzero(ok)
        cats = [obs.gt.objects[o].category for o in lab[rows, cols, 0]]
        truth = np.array([bank.offsets[c] for c in cats], np.int64) + lab[rows, cols, 1]
        f = obs.mean_scale_map.features[rows, cols]
        best = np.argmax(f @ features.T, axis=1)
        hits += int(np.sum(best == truth))
        total += len(truth)
    return hits / total if total else 0.0
