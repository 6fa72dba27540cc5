import dataclasses

import numpy as np
import pytest

from meshpose.errors import ConfigError, PlacementError
from meshpose.features import VertexBank
from meshpose.geometry import random_rotation
from meshpose.sim import (
    SimConfig,
    generate_scene,
    inlier_assignment,
    load_observation,
    scene_seed,
    simulate,
)


def _labelled(lab):
    return lab[..., 0] >= 0


def test_generate_scene_is_deterministic(prototypes):
    cfg = SimConfig(seed=3)
    a = generate_scene(cfg, prototypes, np.random.default_rng(9))
    b = generate_scene(cfg, prototypes, np.random.default_rng(9))
    assert len(a.objects) == len(b.objects)
    for p, q in zip(a.objects, b.objects):
        assert p.category == q.category
        for name in ("rotation", "translation", "deformation", "size"):
            assert np.array_equal(getattr(p, name), getattr(q, name))


def test_rotations_are_haar_uniform():
    rng = np.random.default_rng(0)
    ez = np.array([0.0, 0.0, 1.0])
    mean = np.mean([random_rotation(rng) @ ez for _ in range(100_000)], axis=0)
    assert np.linalg.norm(mean) < 0.02


def test_sampled_ranges(prototypes):
    cfg = SimConfig(deformation_range=(0.8, 1.1), depth_range=(0.7, 1.4))
    rng = np.random.default_rng(1)
    for _ in range(40):
        scene = generate_scene(cfg, prototypes, rng)
        assert 1 <= len(scene.objects) <= 4
        for o in scene.objects:
            assert np.all((o.deformation >= 0.8) & (o.deformation <= 1.1))
            assert 0.7 <= o.translation[2] <= 1.4
            assert o.category in cfg.categories


def test_placement_error(prototypes):
    cfg = SimConfig(instances=(6, 6), depth_range=(0.35, 0.4), max_overlap=0.01, categories=("laptop",))
    with pytest.raises(PlacementError):
        generate_scene(cfg, prototypes, np.random.default_rng(0))


@pytest.mark.parametrize("kw", [dict(instances=(3, 1)), dict(depth_range=(0, 1)), dict(kappa=-1.0),
                                dict(outlier_rate=1.0), dict(stride=0), dict(categories=())])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


def test_noiseless_cells_match_true_vertex(prototypes, bank):
    cfg = SimConfig(kappa=1e6, literal_kappa=True, seed=2)
    for index in range(3):
        obs = simulate(cfg, prototypes, index)
        for fmap, lab in ((obs.mean_scale_map, obs.mean_labels), (obs.instance_scale_map, obs.instance_labels)):
            rows, cols = np.nonzero(_labelled(lab))
            assert len(rows) > 0
            truth = np.array([bank.offsets[obs.gt.objects[o].category] for o in lab[rows, cols, 0]]) + lab[rows, cols, 1]
            best = np.argmax(fmap.features[rows, cols] @ bank.features.T, axis=1)
            assert np.array_equal(best, truth)


def test_outlier_fraction(prototypes):
    cfg = SimConfig(outlier_rate=0.3, seed=4)
    replaced = covered = 0
    index = 0
    while covered < 10_000:
        obs = simulate(cfg, prototypes, index)
        lab = _labelled(obs.mean_labels)
        covered += int(lab.sum())
        replaced += int(obs.mean_replaced[lab].sum())
        assert not obs.mean_replaced[~lab].any()
        index += 1
    assert abs(replaced / covered - 0.3) < 0.02


def test_identity_deformation_gives_identical_labels(prototypes):
    cfg = SimConfig(deformation_range=(1.0, 1.0), seed=5)
    for index in range(3):
        obs = simulate(cfg, prototypes, index)
        assert np.array_equal(obs.mean_labels, obs.instance_labels)


def test_maps_share_grid_and_heatmap_range(prototypes):
    obs = simulate(SimConfig(heatmap_sigma=0.2, seed=6), prototypes, 0)
    m, f = obs.mean_scale_map, obs.instance_scale_map
    assert m.features.shape == f.features.shape
    assert m.stride == f.stride == 4
    assert (m.height, m.width) == (120, 160)
    assert 0.0 <= m.heatmap.min() and m.heatmap.max() <= 1.0


def test_simulate_is_deterministic_and_indexed(prototypes):
    cfg = SimConfig(outlier_rate=0.2, heatmap_sigma=0.1, seed=7)
    a, b = simulate(cfg, prototypes, 3), simulate(cfg, prototypes, 3)
    assert np.array_equal(a.mean_scale_map.features, b.mean_scale_map.features)
    assert np.array_equal(a.instance_scale_map.heatmap, b.instance_scale_map.heatmap)
    c = simulate(cfg, prototypes, 4)
    assert not np.array_equal(a.mean_scale_map.features, c.mean_scale_map.features)
    assert scene_seed(7, 3).entropy == scene_seed(7, 3).entropy


def test_observation_round_trip(tmp_path, prototypes):
    obs = simulate(SimConfig(outlier_rate=0.1, heatmap_sigma=0.1, seed=8), prototypes, 0)
    path = tmp_path / "scene.npz"
    from meshpose.sim import save_observation

    save_observation(path, obs)
    back = load_observation(path)
    for name in ("mean_scale_map", "instance_scale_map"):
        a, b = getattr(obs, name), getattr(back, name)
        np.testing.assert_allclose(b.features, a.features, atol=1e-6)
        np.testing.assert_allclose(b.heatmap, a.heatmap, atol=1e-7)
        assert b.stride == a.stride
    assert np.array_equal(back.mean_labels, obs.mean_labels)
    assert np.array_equal(back.instance_replaced, obs.instance_replaced)
    assert len(back.gt.objects) == len(obs.gt.objects)
    for p, q in zip(obs.gt.objects, back.gt.objects):
        np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-12)
        np.testing.assert_array_equal(q.size, p.size)
    assert back.gt.render_scales == obs.gt.render_scales


def test_inlier_assignment_counts():
    labels = -np.ones((4, 4, 2), np.int64)
    labels[0, :, 0] = 0
    labels[1, :, 0] = 1

    class H:
        def __init__(self, inliers):
            self.inliers = np.asarray(inliers)

    class C:
        cells = np.array([[0, 0], [1, 0], [2, 1], [3, 1]])  # (col, row)

    correct, total = inlier_assignment([H([0, 1, 2]), H([3])], C(), labels, [0, None])
    assert (correct, total) == (2, 4)


def test_structured_distractors_stay_background(prototypes):
    obs = simulate(SimConfig(distractors=True, seed=9), prototypes, 0)
    bg = ~_labelled(obs.mean_labels)
    f = obs.mean_scale_map.features[bg]
    best = np.max(f @ VertexBank(prototypes).features.T, axis=1)
    # Distractor features sit near some vertex, unlike uniform background.
    assert np.median(best) > 0.5
    assert dataclasses.replace(SimConfig(), distractors=False).distractors is False
