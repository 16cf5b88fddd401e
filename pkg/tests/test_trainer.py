from dataclasses import replace

import numpy as np
import pytest

from mapreg import nn
from mapreg.datagen import SceneConfig, make_dataset
from mapreg.errors import DisconnectedGraph, ShapeMismatch, ValidationError
from mapreg.losses import LossWeights
from mapreg.trainer import (
    REAL_WEIGHT_DECAY,
    SYNTHETIC_WEIGHT_DECAY,
    TrainConfig,
    adagrad_step,
    evaluate_loss,
    loss_and_grad,
    prepare,
    train,
)


def samples(n, seed=0, **kw):
    cfg = dict(n_objects=4, n_maps=3)
    cfg.update(kw)
    return [prepare(s) for s in make_dataset(SceneConfig(**cfg), n, base_seed=seed)]


class TestAdagrad:
    def test_zero_gradient_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        adagrad_step(p, {"w": np.zeros(2)}, {}, lr=0.1)
        assert np.array_equal(p["w"], [1.0, -2.0])

    def test_first_step_hand_value(self):
        p = {"w": np.array([1.0])}
        state = {}
        adagrad_step(p, {"w": np.array([1.0])}, state, lr=0.1)
        assert state["w"][0] == 1.0
        assert abs(p["w"][0] - (1.0 - 0.1 / (1 + 1e-10))) < 1e-15
        assert abs(p["w"][0] - 0.9) < 1e-10

    def test_step_sizes_shrink(self):
        p = {"w": np.array([0.0])}
        state = {}
        adagrad_step(p, {"w": np.array([1.0])}, state, lr=0.1)
        d1 = -p["w"][0]
        adagrad_step(p, {"w": np.array([1.0])}, state, lr=0.1)
        d2 = -p["w"][0] - d1
        assert 0 < d2 < d1
        assert abs(d2 - 0.1 / np.sqrt(2)) < 1e-9

    def test_decoupled_weight_decay(self):
        p = {"w": np.array([2.0])}
        state = {}
        adagrad_step(p, {"w": np.array([0.0])}, state, lr=0.1, weight_decay=0.5)
        assert abs(p["w"][0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-15
        assert state["w"][0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adagrad_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, lr=0.1)


def test_default_weight_decays():
    assert SYNTHETIC_WEIGHT_DECAY == 0.046
    assert REAL_WEIGHT_DECAY == 0.007
    assert TrainConfig().weight_decay == 0.046


@pytest.mark.parametrize("bad", [dict(max_epochs=0), dict(lr=0.0), dict(weight_decay=-1),
                                 dict(batch_size=0), dict(arch="supergat")])
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        replace(TrainConfig(), **bad).validate()


def test_single_step_changes_parameters():
    s = samples(1)
    m = nn.init_model("gcn", 5, width=8, seed=0)
    before = {k: v.copy() for k, v in m.params.items()}
    total, _, grads = loss_and_grad(m, s[0].graph, s[0].sup, LossWeights())
    assert total > 0
    adagrad_step(m.params, grads, {}, lr=0.01)
    assert any(not np.array_equal(before[k], m.params[k]) for k in before)


@pytest.mark.parametrize("arch", nn.ARCHITECTURES)
def test_training_is_bit_deterministic(arch):
    tr, va = samples(12, seed=0), samples(4, seed=1)
    cfg = TrainConfig(max_epochs=3, batch_size=4, arch=arch, width=8, seed=5)
    m = nn.init_model(arch, 5, width=8, seed=5)
    a_model, a = train(m, tr, va, cfg)
    b_model, b = train(m, tr, va, cfg)
    assert a.history == b.history
    assert all(np.array_equal(a_model.params[k], b_model.params[k]) for k in m.params)


def test_train_does_not_mutate_input_model():
    m = nn.init_model("gcn", 5, width=8)
    before = {k: v.copy() for k, v in m.params.items()}
    train(m, samples(4), samples(2, seed=1), TrainConfig(max_epochs=2, width=8))
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_early_stopping_returns_best_checkpoint():
    tr, va = samples(8), samples(4, seed=1)
    # a large learning rate makes validation loss bounce, so patience triggers
    cfg = TrainConfig(max_epochs=60, patience=3, lr=0.5, batch_size=2, width=8, seed=1)
    best, rep = train(nn.init_model("gcn", 5, width=8, seed=1), tr, va, cfg)
    vals = [h["val_total"] for h in rep.history]
    assert rep.best_val <= min(vals)
    assert rep.stop_reason.startswith("no validation improvement")
    assert len(vals) - rep.best_epoch == 3 or rep.best_epoch == 0
    assert abs(evaluate_loss(best, va, cfg.loss_weights)["total"] - rep.best_val) < 1e-12


def test_csv_log(tmp_path):
    _, rep = train(nn.init_model("gcn", 5, width=8), samples(3), samples(2, seed=1),
                   TrainConfig(max_epochs=2, width=8))
    rep.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,L_e,L_mu,L_sigma,total,val_total"
    assert len(lines) == 3


def test_rejects_bad_inputs():
    m = nn.init_model("gcn", 5, width=8)
    with pytest.raises(ValidationError):
        train(m, [], samples(1), TrainConfig(width=8))
    with pytest.raises(ValidationError):
        train(m, samples(1), samples(1), TrainConfig(arch="gat", width=8))


def test_disconnected_scene_propagates():
    from mapreg.datagen import LocalMap, Scene
    maps = [LocalMap(0, [0, 1, 2], np.eye(3, 2), gt_object_id=[0, 1, 2], camera_xy_gt=[0, 0], heading_gt=0.0),
            LocalMap(1, [3, 4, 3], np.eye(3, 2), gt_object_id=[3, 4, 5], camera_xy_gt=[1, 0], heading_gt=0.0)]
    scene = Scene("x", 5, maps, np.arange(6), np.array([0, 1, 2, 3, 4, 3]), np.zeros((6, 2)))
    with pytest.raises(DisconnectedGraph):
        prepare(scene)


@pytest.mark.xfail(strict=True, reason="a permutation-equivariant network cannot single out the "
                   "reference map on a symmetric clique graph, so the loss floor stays far above 1e-2")
def test_single_scene_overfit():
    scene = make_dataset(SceneConfig(phi=1.0, delta_xy=0.0), 1, base_seed=0)[0]
    s = prepare(scene, matching="gt_matches")
    cfg = TrainConfig(max_epochs=1000, patience=1000, batch_size=1, weight_decay=0.0, lr=0.01)
    _, rep = train(nn.init_model("gcn", 5, seed=0), [s], [s], cfg)
    assert min(h["total"] for h in rep.history) < 1e-2
