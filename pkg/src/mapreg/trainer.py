"""Supervised training: Adagrad with decoupled weight decay and early stopping."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .datagen import Scene
from .errors import DivergedLoss, ShapeMismatch, ValidationError
from .graph import SceneGraph, build_graph
from .losses import LossWeights, Supervision, build_supervision, loss_total

log = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-10
SYNTHETIC_WEIGHT_DECAY = 0.046
REAL_WEIGHT_DECAY = 0.007


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    patience: int = 50
    lr: float = 0.01
    weight_decay: float = SYNTHETIC_WEIGHT_DECAY
    batch_size: int = 32
    seed: int = 0
    arch: str = "gcn"
    width: int = 64
    loss_weights: LossWeights = field(default_factory=LossWeights)
    max_seconds: float | None = None

    def validate(self):
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.patience < 1:
            raise ValidationError("batch_size and patience must be >= 1")
        if self.arch not in nn.ARCHITECTURES:
            raise ValidationError(f"unsupported architecture {self.arch!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = asdict(self.loss_weights)
        return d


@dataclass
class Sample:
    """A scene prepared for the network: graph plus supervision."""

    scene_id: str
    graph: SceneGraph
    sup: Supervision


def prepare(scene: Scene, matching: str = "class_based", cameras_in_crossmap: bool = True) -> Sample:
    g = build_graph(scene.maps, matching=matching, n_classes=scene.n_classes)
    return Sample(scene.scene_id, g, build_supervision(scene, g, cameras_in_crossmap))


def collate(samples: Sequence[Sample]) -> tuple[SceneGraph, Supervision]:
    if len(samples) == 1:
        return samples[0].graph, samples[0].sup
    return SceneGraph.union([s.graph for s in samples]), Supervision.concat([s.sup for s in samples])


def adagrad_step(params: dict, grads: dict, state: dict, lr: float, weight_decay: float = 0.0) -> None:
    """In-place update: ``acc += g**2``, ``p -= lr*wd*p + lr*g/(sqrt(acc)+eps)``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        acc = state.get(name)
        if acc is None:
            acc = state[name] = np.zeros_like(p)
        acc += g * g
        p -= lr * weight_decay * p + lr * g / (np.sqrt(acc) + ADAGRAD_EPS)


def loss_and_grad(model: nn.AlignmentModel, graph: SceneGraph, sup: Supervision, weights: LossWeights):
    pred, cache = nn.forward(model, graph, return_cache=True)
    total, comps, g_pred = loss_total(pred, sup, graph, weights, with_grad=True)
    return total, comps, nn.backward(model, cache, g_pred)


def evaluate_loss(model, samples: Sequence[Sample], weights: LossWeights, chunk: int = 256) -> dict:
    """Mean per-scene loss (total and components) over ``samples``."""
    sums = {"euclidean": 0.0, "crossmap": 0.0, "selfsim": 0.0, "total": 0.0}
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        graph, sup = collate(part)
        total, comps = loss_total(nn.forward(model, graph), sup, graph, weights)
        for k, v in comps.items():
            sums[k] += v * len(part)
        sums["total"] += total * len(part)
    return {k: v / len(samples) for k, v in sums.items()}


@dataclass
class TrainReport:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    stop_reason: str = ""
    wall_clock: float = 0.0

    LOG_COLUMNS = ("epoch", "L_e", "L_mu", "L_sigma", "total", "val_total")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.LOG_COLUMNS)
            for row in self.history:
                w.writerow([row["epoch"]] + [repr(float(row[c])) for c in self.LOG_COLUMNS[1:]])


def train(model: nn.AlignmentModel, train_set: Sequence[Sample], val_set: Sequence[Sample],
          cfg: TrainConfig) -> tuple[nn.AlignmentModel, TrainReport]:
    """Train a copy of ``model``; returns the best-validation parameters and the report.

    ``max_seconds`` (optional) is an extra wall-clock cap, off by default because
    it makes runs machine dependent.
    """
    cfg.validate()
    if not train_set or not val_set:
        raise ValidationError("training needs at least one train and one validation scene")
    if model.arch != cfg.arch:
        raise ValidationError(f"model architecture {model.arch} != configured {cfg.arch}")
    t0 = time.perf_counter()
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    state: dict = {}
    report = TrainReport()
    best = model.copy()
    best_val = evaluate_loss(model, val_set, cfg.loss_weights)["total"]
    report.best_val, report.best_epoch = best_val, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        sums = np.zeros(4)
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            graph, sup = collate([train_set[j] for j in idx])
            total, comps, grads = loss_and_grad(model, graph, sup, cfg.loss_weights)
            if not np.isfinite(total):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            adagrad_step(model.params, grads, state, cfg.lr, cfg.weight_decay)
            sums += len(idx) * np.array([comps["euclidean"], comps["crossmap"], comps["selfsim"], total])
        sums /= len(order)
        val = evaluate_loss(model, val_set, cfg.loss_weights)["total"]
        if not np.isfinite(val):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        report.history.append(dict(epoch=epoch, L_e=sums[0], L_mu=sums[1], L_sigma=sums[2],
                                   total=sums[3], val_total=val))
        if val < best_val:
            best_val, best = val, model.copy()
            report.best_epoch, report.best_val = epoch, val
        log.debug("epoch %d train %.4f val %.4f", epoch, sums[3], val)
        if epoch - report.best_epoch >= cfg.patience:
            report.stop_reason = f"no validation improvement for {cfg.patience} epochs"
            break
        if cfg.max_seconds is not None and time.perf_counter() - t0 > cfg.max_seconds:
            report.stop_reason = "time budget exhausted"
            break
    else:
        report.stop_reason = "max_epochs reached"
    report.wall_clock = time.perf_counter() - t0
    return best, report
