import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapreg.datagen import SceneConfig, make_dataset
from mapreg.errors import DegenerateCloud, EmptyGroup, ShapeMismatch, ValidationError
from mapreg.geometry import Similarity2D, apply_similarity
from mapreg.losses import (
    LossWeights,
    Supervision,
    loss_crossmap,
    loss_euclidean,
    loss_selfsimilarity,
    loss_total,
)
from mapreg.trainer import collate, prepare
from oracles import central_fd, fd_rel_error, grid_residual


def flat_sup(gt, group=None, group_gt=None):
    gt = np.asarray(gt, float)
    n = len(gt)
    if group is None:
        group = np.arange(n)
        group_gt = gt
    group_gt = np.asarray(group_gt, float)
    return Supervision(gt_xy=gt, group=np.asarray(group), group_gt=group_gt,
                       group_offsets=np.array([0, len(group_gt)]), node_offsets=np.array([0, n]))


def sample(seed=0, **kw):
    cfg = dict(n_objects=5, n_maps=3, phi=0.8)
    cfg.update(kw)
    return prepare(make_dataset(SceneConfig(**cfg), 1, base_seed=seed)[0])


def gt_pred(s):
    return s.sup.gt_xy.copy()


class TestEuclidean:
    def test_zero_at_gt(self, rng):
        gt = rng.normal(size=(5, 2))
        assert loss_euclidean(gt, flat_sup(gt)) == 0.0

    def test_hand_value(self):
        gt = np.zeros((5, 2))
        pred = gt.copy()
        pred[2] = [3, 4]
        assert loss_euclidean(pred, flat_sup(gt)) == 5.0

    def test_homogeneous_degree_two(self, rng):
        gt = rng.normal(size=(6, 2))
        d = rng.normal(size=(6, 2))
        sup = flat_sup(gt)
        assert np.isclose(loss_euclidean(gt + 2 * d, sup), 4 * loss_euclidean(gt + d, sup), rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            loss_euclidean(np.zeros((3, 2)), flat_sup(np.zeros((4, 2))))


class TestCrossmap:
    def test_zero_at_gt(self):
        s = sample()
        assert loss_crossmap(gt_pred(s), s.sup) < 1e-28

    def test_hand_value(self):
        sup = flat_sup([[1, 0], [1, 0]], group=[0, 0], group_gt=[[1, 0]])
        assert loss_crossmap([[0, 0], [2, 0]], sup) == 1.0

    def test_bias_term(self):
        sup = flat_sup([[1, 0], [1, 0]], group=[0, 0], group_gt=[[1, 0]])
        assert loss_crossmap([[4, 4], [4, 4]], sup) == 25.0

    def test_translation_invariance(self, rng):
        s = sample(seed=3)
        pred = gt_pred(s) + rng.normal(size=s.sup.gt_xy.shape)
        t = rng.normal(size=2) * 10
        shifted = Supervision(s.sup.gt_xy + t, s.sup.group, s.sup.group_gt + t,
                              s.sup.group_offsets, s.sup.node_offsets)
        assert abs(loss_crossmap(pred + t, shifted) - loss_crossmap(pred, s.sup)) < 1e-10

    def test_empty_group(self):
        sup = flat_sup([[0, 0], [1, 1]], group=[0, 0], group_gt=[[0, 0], [5, 5]])
        with pytest.raises(EmptyGroup):
            loss_crossmap(np.zeros((2, 2)), sup)

    def test_cameras_can_be_excluded(self):
        scene = make_dataset(SceneConfig(), 1)[0]
        with_cam = prepare(scene)
        without = prepare(scene, cameras_in_crossmap=False)
        assert with_cam.sup.n_groups == without.sup.n_groups + len(scene.maps)
        assert np.all(without.sup.group[with_cam.graph.kind == 1] == -1)


class TestSelfSimilarity:
    def test_zero_for_similarity_image(self, rng):
        s = sample(seed=1)
        t = Similarity2D(1.1, 3.0, (4.0, -2.0))
        pred = apply_similarity(t, gt_pred(s))
        assert loss_selfsimilarity(pred, s.graph) < 1e-10

    def test_local_coords_perturbed_grid_oracle(self, rng):
        s = sample(seed=2)
        g = s.graph
        pred = g.xy.copy()
        pred[g.map_offsets[1] + 1] += [0.7, -0.4]
        val = loss_selfsimilarity(pred, g)
        lo, hi = g.map_offsets[1], g.map_offsets[2]
        oracle = grid_residual(g.xy[lo:hi], pred[lo:hi])
        assert val > 0
        assert abs(val - oracle) < 1e-6

    def test_sum_over_maps_grid_oracle(self, rng):
        s = sample(seed=5)
        g = s.graph
        pred = gt_pred(s) + rng.normal(0, 0.5, g.xy.shape)
        oracle = sum(grid_residual(g.xy[lo:hi], pred[lo:hi])
                     for lo, hi in zip(g.map_offsets[:-1], g.map_offsets[1:]))
        assert abs(loss_selfsimilarity(pred, g) - oracle) < 1e-6

    def test_degenerate_prediction(self):
        s = sample()
        with pytest.raises(DegenerateCloud):
            loss_selfsimilarity(np.ones_like(s.graph.xy), s.graph)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), theta=st.floats(-np.pi, np.pi), scale=st.floats(0.2, 5),
       tx=st.floats(-50, 50), ty=st.floats(-50, 50))
def test_selfsim_gauge_invariance(seed, theta, scale, tx, ty):
    s = sample(seed=seed % 50)
    pred = gt_pred(s) + np.random.default_rng(seed).normal(0, 1.0, s.graph.xy.shape)
    moved = apply_similarity(Similarity2D(theta, scale, (tx, ty)), pred)
    assert abs(loss_selfsimilarity(moved, s.graph) - loss_selfsimilarity(pred, s.graph)) < 1e-10


class TestTotal:
    def test_masking(self, rng):
        s = sample()
        pred = gt_pred(s) + rng.normal(size=s.graph.xy.shape)
        total, comps = loss_total(pred, s.sup, s.graph, LossWeights(1, 0, 0))
        assert total == loss_euclidean(pred, s.sup)
        assert set(comps) == {"euclidean", "crossmap", "selfsim"}

    def test_zero_at_gt(self):
        s = sample()
        total, _ = loss_total(gt_pred(s), s.sup, s.graph, LossWeights(0.3, 2, 5))
        assert total < 1e-10

    def test_component_sum(self, rng):
        s = sample(seed=7)
        pred = gt_pred(s) + rng.normal(size=s.graph.xy.shape)
        total, _ = loss_total(pred, s.sup, s.graph)
        parts = loss_euclidean(pred, s.sup) + loss_crossmap(pred, s.sup) + loss_selfsimilarity(pred, s.graph)
        assert abs(total - parts) < 1e-12

    def test_nonnegative(self, rng):
        for seed in range(10):
            s = sample(seed=seed)
            pred = rng.normal(size=s.graph.xy.shape) * 5
            _, comps = loss_total(pred, s.sup, s.graph)
            assert min(comps.values()) >= 0

    def test_bad_weights(self):
        with pytest.raises(ValidationError):
            LossWeights(0, 0, 0)
        with pytest.raises(ValidationError):
            LossWeights(-1, 1, 1)

    @pytest.mark.parametrize("weights", [(1, 1, 1), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0.5, 2, 0.1)])
    def test_gradient_fd(self, rng, weights):
        s = sample(seed=11)
        w = LossWeights(*weights)
        pred = gt_pred(s) + rng.normal(size=s.graph.xy.shape)
        f0, _, g = loss_total(pred, s.sup, s.graph, w, with_grad=True)
        num = central_fd(lambda p: loss_total(p, s.sup, s.graph, w)[0], pred)
        assert np.max(fd_rel_error(g, num, f0)) < 1e-4

    def test_batch_is_mean_of_scenes(self, rng):
        samples = [sample(seed=k) for k in range(4)]
        graph, sup = collate(samples)
        pred = sup.gt_xy + rng.normal(size=sup.gt_xy.shape)
        batch, _, g_batch = loss_total(pred, sup, graph, with_grad=True)
        each, grads = [], []
        for s, lo, hi in zip(samples, graph.node_offsets[:-1], graph.node_offsets[1:]):
            v, _, g = loss_total(pred[lo:hi], s.sup, s.graph, with_grad=True)
            each.append(v)
            grads.append(g / len(samples))
        assert abs(batch - np.mean(each)) < 1e-12
        np.testing.assert_allclose(g_batch, np.concatenate(grads), atol=1e-14)
