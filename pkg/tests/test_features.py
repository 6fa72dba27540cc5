import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from meshpose.errors import (
    InconsistentAnnotationError,
    InvalidConcentrationError,
    MissingPrototypeError,
    NormalizationError,
    ShapeError,
    UndefinedLossError,
)
from meshpose.features import (
    DEFAULT_KAPPA,
    FeatureMap,
    VertexBank,
    contrastive_loss,
    contrastive_loss_grad,
    dice_loss,
    mask_loss,
    match_correspondences,
    minmax_normalize,
    read_correspondences_csv,
    sample_vmf,
    sample_vmf_batch,
    training_loss,
    uniform_unit_vectors,
    vmf_log_likelihood,
    write_correspondences_csv,
)
from meshpose.geometry import build_prototype
from meshpose.oracles import central_difference, relative_error
from meshpose.raster import AnnotationSet


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _ann(ids, bank, pixel_features, visible=None):
    ids = np.asarray(ids)
    vis = np.ones(len(ids), bool) if visible is None else np.asarray(visible, bool)
    return AnnotationSet(ids, bank[ids], np.asarray(pixel_features, float), vis)


def _orthonormal(n, dim, seed=0):
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(dim, n)))
    return q.T


# ----------------------------------------------------------------------- vMF


def test_vmf_log_likelihood_examples():
    e = np.eye(3)
    assert vmf_log_likelihood(e[0], e[0], 1 / 0.07) == pytest.approx(14.285714285714286, rel=1e-12)
    assert vmf_log_likelihood(e[0], e[1], 7.0) == 0.0
    assert vmf_log_likelihood(-e[0], e[0], 2.0) == -2.0
    with pytest.raises(NormalizationError):
        vmf_log_likelihood([1.0, 1.0, 0.0], e[0], 1.0)


def _mean_resultant_quad(kappa, dim):
    # E[t] under density proportional to exp(kappa t) (1 - t^2)^((dim - 3) / 2) on [-1, 1].
    w = lambda t: math.exp(kappa * (t - 1.0)) * (1.0 - t * t) ** ((dim - 3) / 2.0)
    num = integrate.quad(lambda t: t * w(t), -1, 1, limit=200)[0]
    den = integrate.quad(w, -1, 1, limit=200)[0]
    return num / den


def test_vmf_moment_oracles_agree():
    # Two independent routes to A_D(kappa): quadrature and the Bessel ratio.
    for kappa, dim in ((14.29, 64), (3.0, 8), (40.0, 16)):
        bessel = special.ive(dim / 2.0, kappa) / special.ive(dim / 2.0 - 1.0, kappa)
        assert _mean_resultant_quad(kappa, dim) == pytest.approx(bessel, rel=1e-6)


def test_vmf_sample_mean_resultant_length():
    dim, kappa, n = 64, 14.29, 100_000
    rng = np.random.default_rng(0)
    mu = _unit(rng.normal(size=dim))
    x = sample_vmf_batch(np.tile(mu, (n, 1)), kappa, rng)
    assert abs(np.linalg.norm(x.mean(axis=0)) - _mean_resultant_quad(kappa, dim)) < 0.01
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)


def test_vmf_zero_concentration_is_uniform():
    rng = np.random.default_rng(1)
    mu = np.eye(16)[0]
    x = sample_vmf_batch(np.tile(mu, (100_000, 1)), 0.0, rng)
    assert np.linalg.norm(x.mean(axis=0)) < 0.02


def test_vmf_mean_alignment_increases_with_kappa():
    dim = 64
    mu = np.eye(dim)[3]
    for seed in range(3):
        rng = np.random.default_rng(seed)
        means = [float(np.mean(sample_vmf_batch(np.tile(mu, (10_000, 1)), k, rng) @ mu)) for k in (0, 1, 5, 15)]
        assert all(a < b for a, b in zip(means, means[1:]))


def test_vmf_sampling_contract():
    mu = np.eye(5)[0]
    a = sample_vmf(mu, 3.0, np.random.default_rng(7))
    b = sample_vmf(mu, 3.0, np.random.default_rng(7))
    assert np.array_equal(a, b)
    with pytest.raises(InvalidConcentrationError):
        sample_vmf(mu, -1.0, np.random.default_rng(0))
    with pytest.raises(NormalizationError):
        sample_vmf(2 * mu, 1.0, np.random.default_rng(0))


# -------------------------------------------------------------- contrastive


def test_contrastive_closed_form_orthogonal_negatives():
    M, kappa = 100, 1 / 0.07
    bank = _orthonormal(M + 1, 128)
    loss = contrastive_loss(_ann([0], bank, bank[:1]), bank, kappa)
    closed = -math.log(math.exp(kappa) / (math.exp(kappa) + M))
    assert loss == pytest.approx(closed, rel=1e-10)
    assert loss == pytest.approx(math.log1p(M * math.exp(-kappa)), rel=1e-10)
    assert loss == pytest.approx(6.24855e-5, rel=1e-5)


def test_perfect_match_without_negatives_is_zero():
    bank = np.eye(4)[:1]
    ann = _ann([0], bank, bank)
    assert contrastive_loss(ann, bank) == 0.0
    gf, gb = contrastive_loss_grad(ann, bank)
    assert not gf.any() and not gb.any()


def test_loss_decreases_as_positive_similarity_increases():
    rng = np.random.default_rng(2)
    bank = _unit(rng.normal(size=(20, 6)))
    target, other = bank[4], _unit(rng.normal(size=6))
    losses = []
    for a in np.linspace(0.0, 1.0, 11):
        f = _unit((1 - a) * other + a * target)
        losses.append(contrastive_loss(_ann([4], bank, f[None]), bank, 5.0))
    assert all(x > y for x, y in zip(losses, losses[1:]))


def test_invisible_annotations_are_undefined():
    bank = np.eye(3)
    with pytest.raises(UndefinedLossError):
        contrastive_loss(_ann([0, 1], bank, bank[:2], [False, False]), bank)
    with pytest.raises(UndefinedLossError):
        contrastive_loss_grad(_ann([0], bank, bank[:1], [False]), bank)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 30.0))
def test_loss_is_non_negative(seed, kappa):
    rng = np.random.default_rng(seed)
    bank = _unit(rng.normal(size=(12, 5)))
    ids = rng.choice(12, 5, replace=False)
    ann = _ann(ids, bank, _unit(rng.normal(size=(5, 5))), rng.random(5) < 0.7)
    if not ann.visible.any():
        return
    assert contrastive_loss(ann, bank, kappa) >= 0.0


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    bank = _unit(rng.normal(size=(30, 8)))
    ids = rng.choice(30, 10, replace=False)
    ann = _ann(ids, bank, _unit(rng.normal(size=(10, 8))), rng.random(10) < 0.8)
    kappa = DEFAULT_KAPPA / 4
    gf, gb = contrastive_loss_grad(ann, bank, kappa)
    nb = central_difference(lambda B: contrastive_loss(ann, B, kappa), bank, 1e-5)
    nf = central_difference(
        lambda F: contrastive_loss(AnnotationSet(ann.vertex_ids, ann.vertex_features, F, ann.visible), bank, kappa),
        ann.pixel_features, 1e-5,
    )
    assert relative_error(gb, nb) < 1e-5
    assert relative_error(gf, nf) < 1e-5
    assert not gf[~ann.visible].any()


def test_gradient_of_unused_vertex_is_exactly_zero():
    rng = np.random.default_rng(4)
    bank = _unit(rng.normal(size=(10, 4)))
    ann = _ann([0, 1, 2], bank, _unit(rng.normal(size=(3, 4))), [True, True, False])
    mask = np.ones(10, bool)
    mask[[2, 7]] = False  # vertex 2 is invisible, vertex 7 never a positive
    _, gb = contrastive_loss_grad(ann, bank, 3.0, mask)
    assert np.all(gb[2] == 0.0) and np.all(gb[7] == 0.0)
    assert np.any(gb[0] != 0.0)


# ------------------------------------------------------------ training loss


def test_training_loss_averaging():
    rng = np.random.default_rng(5)
    bank = _unit(rng.normal(size=(15, 6)))

    def some_set(seed):
        r = np.random.default_rng(seed)
        return _ann(r.choice(15, 4, replace=False), bank, _unit(r.normal(size=(4, 6))))

    a = some_set(1)
    one = training_loss([a], [a], bank, 4.0)
    assert one.total == pytest.approx(contrastive_loss(a, bank, 4.0), rel=1e-12)

    sets = [some_set(s) for s in range(2, 6)]
    a1, b1, a2, b2 = (contrastive_loss(s, bank, 4.0) for s in sets)
    two = training_loss(sets[:2], sets[2:], bank, 4.0)
    assert two.total == pytest.approx((a1 + a2 + b1 + b2) / 4, rel=1e-12)
    assert two.total == pytest.approx(np.mean(two.per_object), abs=1e-12)

    with pytest.raises(InconsistentAnnotationError):
        training_loss(sets[:2], sets[:1], bank)


def test_training_loss_gradient():
    rng = np.random.default_rng(6)
    bank = _unit(rng.normal(size=(12, 5)))
    sets = [_ann(rng.choice(12, 4, replace=False), bank, _unit(rng.normal(size=(4, 5)))) for _ in range(4)]
    _, g = training_loss(sets[:2], sets[2:], bank, 3.0, with_grad=True)
    num = central_difference(lambda B: training_loss(sets[:2], sets[2:], B, 3.0).total, bank, 1e-5)
    assert relative_error(g, num) < 1e-5


def test_training_loss_mask_term():
    p, g = np.ones((4, 4)), np.ones((4, 4))
    lb = training_loss([_ann([0], np.eye(2), np.eye(2)[:1])] * 1, [_ann([0], np.eye(2), np.eye(2)[:1])], np.eye(2),
                       mask_terms=[(p, g), (0.5 * g, g)])
    assert lb.mask_loss == pytest.approx((dice_loss(p, g) + 1 / 3) / 2, rel=1e-6)


# ------------------------------------------------------------ segmentation


def test_dice_examples():
    g = np.zeros((8, 8))
    g[2:6, 2:6] = 1
    assert dice_loss(g, g) < 1e-6
    assert dice_loss(g, 1 - g) == pytest.approx(1.0, abs=1e-6)
    assert dice_loss(0.5 * g, g) == pytest.approx(1 / 3, abs=1e-6)
    assert mask_loss(g, g, 0.5 * g, g) == pytest.approx(1 / 6, abs=1e-6)
    with pytest.raises(ShapeError):
        dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_minmax_examples():
    np.testing.assert_allclose(minmax_normalize([0, 5, 10]), [0, 0.5, 1])
    assert not minmax_normalize(np.full((3, 3), 2.5)).any()
    with pytest.raises(ValueError):
        minmax_normalize([])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50))
def test_minmax_range(values):
    out = minmax_normalize(values)
    if max(values) > min(values):
        assert out.min() == 0.0 and out.max() == 1.0
    else:
        assert not out.any()


# ---------------------------------------------------------------- matching


def _small_protos(dim=8, seed=0):
    return {
        c: build_prototype(c, size, 30.0, dim, seed=seed + i)
        for i, (c, size) in enumerate({"bowl": (1, 0.5, 1), "can": (0.5, 1, 0.5), "mug": (1, 1, 0.8)}.items())
    }


def test_exact_feature_matches_vertex():
    protos = _small_protos()
    f = protos["mug"].vertex_features[17]
    fmap = FeatureMap(f[None, None, :], np.ones((1, 1)), 4)
    corr = match_correspondences(fmap, protos, 0.5, 0.7)
    assert len(corr) == 1
    c = corr.to_list()[0]
    assert (c.category, c.vertex_index) == ("mug", 17)
    assert c.similarity == pytest.approx(1.0, abs=1e-12)
    assert c.pixel == (2.0, 2.0)

    low = FeatureMap(f[None, None, :], np.full((1, 1), 0.4), 4)
    assert len(match_correspondences(low, protos, 0.5, 0.7)) == 0


def _brute_force(fmap, protos, t1, t2):
    out = []
    for r in range(fmap.height):
        for c in range(fmap.width):
            if fmap.heatmap[r, c] < t1:
                continue
            best = None
            for cat in sorted(protos):
                for k, theta in enumerate(protos[cat].vertex_features):
                    s = float(fmap.features[r, c] @ theta)
                    if best is None or s > best[0]:
                        best = (s, cat, k)
            if best[0] >= t2:
                out.append((fmap.stride * (c + 0.5), fmap.stride * (r + 0.5), best[1], best[2], best[0]))
    return out


def test_matching_equals_brute_force():
    protos = _small_protos()
    rng = np.random.default_rng(8)
    bank = VertexBank(protos)
    # Half the cells sit near a vertex so the t2 filter keeps some of them.
    feats = uniform_unit_vectors(64, 8, rng)
    near = rng.choice(len(bank), 32)
    feats[:32] = _unit(bank.features[near] + 0.2 * rng.normal(size=(32, 8)))
    fmap = FeatureMap(feats.reshape(8, 8, 8), rng.random((8, 8)), 4)
    got = match_correspondences(fmap, protos, 0.3, 0.7)
    want = _brute_force(fmap, protos, 0.3, 0.7)
    assert len(got) == len(want) > 5
    for c, w in zip(got.to_list(), want):
        assert (c.pixel, c.category, c.vertex_index) == (w[:2], w[2], w[3])
        assert c.similarity == pytest.approx(w[4], abs=1e-12)


def test_matching_is_category_order_independent():
    protos = _small_protos()
    rng = np.random.default_rng(9)
    fmap = FeatureMap(uniform_unit_vectors(36, 8, rng).reshape(6, 6, 8), np.ones((6, 6)), 4)
    a = match_correspondences(fmap, protos, 0.5, -1.0)
    b = match_correspondences(fmap, dict(reversed(list(protos.items()))), 0.5, -1.0)
    assert a.to_list() == b.to_list()


def test_matching_errors():
    fmap = FeatureMap(np.ones((1, 1, 1)), np.ones((1, 1)), 4)
    with pytest.raises(MissingPrototypeError):
        match_correspondences(fmap, {})
    with pytest.raises(ValueError):
        match_correspondences(fmap, _small_protos(1), t1=1.5)


def test_feature_map_invariants():
    with pytest.raises(NormalizationError):
        FeatureMap(np.full((2, 2, 3), 0.5), np.ones((2, 2)), 4)
    with pytest.raises(ValueError):
        FeatureMap(np.ones((2, 2, 1)), np.full((2, 2), 1.5), 4)
    with pytest.raises(ShapeError):
        FeatureMap(np.ones((2, 2, 1)), np.ones((3, 2)), 4)


def test_correspondence_csv_round_trip(tmp_path):
    protos = _small_protos()
    rng = np.random.default_rng(10)
    fmap = FeatureMap(uniform_unit_vectors(100, 8, rng).reshape(10, 10, 8), np.ones((10, 10)), 4)
    corr = match_correspondences(fmap, protos, 0.5, -1.0)
    path = tmp_path / "corr.csv"
    write_correspondences_csv(path, corr)
    back = read_correspondences_csv(path, stride=4)
    assert back.to_list() == corr.to_list()
    assert np.array_equal(back.cells, corr.cells)
