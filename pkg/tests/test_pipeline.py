import dataclasses

import numpy as np

from meshpose.geometry import Pose9D, SceneGroundTruth, render_scale, rotation_about, rotation_angle
from meshpose.pipeline import PipelineParams, detect_and_refine, run_pipeline
from meshpose.sim import SimConfig, simulate, synthesize_feature_maps


def _scene(prototypes, placements, K):
    """Ground truth for hand-placed objects at the prototype's mean scale."""
    objects, scales = [], []
    for cat, R, t, d in placements:
        proto = prototypes[cat]
        shape = np.asarray(d) * proto.mean_size
        pose = Pose9D(cat, R, np.asarray(t, float), np.asarray(d, float),
                      proto.mean_scale * shape / np.linalg.norm(shape))
        objects.append(pose)
        scales.append(render_scale(pose, proto))
    return SceneGroundTruth(tuple(objects), K, tuple(scales))


def test_no_ground_truth_leakage(prototypes, bank):
    obs = simulate(SimConfig(outlier_rate=0.3, seed=11), prototypes, 0)
    blind = dataclasses.replace(
        obs,
        gt=SceneGroundTruth((), obs.gt.intrinsics),
        mean_labels=np.full_like(obs.mean_labels, -1),
        instance_labels=np.full_like(obs.instance_labels, -1),
        mean_replaced=np.zeros_like(obs.mean_replaced),
        instance_replaced=np.zeros_like(obs.instance_replaced),
    )
    a = run_pipeline(obs, prototypes, bank=bank)
    b = run_pipeline(blind, prototypes, bank=bank)
    assert len(a) == len(b) > 0
    for p, q in zip(a, b):
        assert p.to_dict() == q.to_dict()


def test_pipeline_is_deterministic(prototypes, bank):
    obs = simulate(SimConfig(outlier_rate=0.2, seed=12), prototypes, 1)
    params = PipelineParams(seed=3)
    a = [p.to_dict() for p in run_pipeline(obs, prototypes, params, bank)]
    b = [p.to_dict() for p in run_pipeline(obs, prototypes, params, bank)]
    assert a == b


def test_single_noiseless_object(prototypes, bank, K):
    R = rotation_about((1, 0, 0), 0.5) @ rotation_about((0, 1, 0), 0.8)
    scene = _scene(prototypes, [("laptop", R, (0.02, -0.01, 0.9), (1.1, 0.9, 1.0))], K)
    cfg = SimConfig(kappa=1e6, literal_kappa=True)
    obs = synthesize_feature_maps(scene, prototypes, cfg, np.random.default_rng(0))
    poses = run_pipeline(obs, prototypes, bank=bank)
    assert len(poses) == 1
    p, g = poses[0], scene.objects[0]
    assert p.category == "laptop" and p.refined
    assert np.degrees(rotation_angle(p.rotation.T @ g.rotation)) < 5.0


def test_two_overlapping_instances_of_one_category(prototypes, bank, K):
    scene = _scene(prototypes, [
        ("mug", rotation_about((1, 0, 0), 0.4), (-0.04, 0.0, 0.8), (1.0, 1.0, 1.0)),
        ("mug", rotation_about((0, 1, 0), 1.9), (0.05, 0.01, 0.95), (0.9, 1.1, 1.0)),
    ], K)
    obs = synthesize_feature_maps(scene, prototypes, SimConfig(), np.random.default_rng(1))
    poses = run_pipeline(obs, prototypes, bank=bank)
    assert len(poses) == 2
    assert all(p.category == "mug" for p in poses)
    # Each ground-truth instance is claimed by the nearest detection.
    for g in scene.objects:
        assert min(np.linalg.norm(p.translation - g.translation) for p in poses) < 0.05


def test_unrefined_mode_returns_hypothesis_poses(prototypes, bank):
    obs = simulate(SimConfig(seed=13), prototypes, 0)
    res = detect_and_refine(obs.mean_scale_map, obs.instance_scale_map, obs.gt.intrinsics, prototypes,
                            PipelineParams(refine=False), bank)
    assert len(res.poses) == len(res.hypotheses)
    for p, h in zip(res.poses, res.hypotheses):
        assert not p.refined
        np.testing.assert_allclose(p.rotation, h.rotation, atol=1e-12)
        np.testing.assert_array_equal(p.deformation, np.ones(3))
