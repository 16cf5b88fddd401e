"""Training losses: per-node Euclidean error, cross-map consistency, self-similarity.

All functions accept a single scene or a disjoint union of scenes.  For a union
each loss is computed per scene and then averaged over scenes, so a batch loss
equals the mean of its per-scene losses.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .datagen import Scene
from .errors import DegenerateCloud, EmptyGroup, ShapeMismatch, ValidationError
from .graph import CAMERA, DETECTION, SceneGraph


@dataclass(frozen=True)
class LossWeights:
    euclidean: float = 1.0
    crossmap: float = 1.0
    selfsim: float = 1.0

    def __post_init__(self):
        w = (self.euclidean, self.crossmap, self.selfsim)
        if min(w) < 0 or max(w) <= 0:
            raise ValidationError("loss weights must be non-negative with at least one positive")

    def as_tuple(self):
        return (self.euclidean, self.crossmap, self.selfsim)


@dataclass
class Supervision:
    """Ground truth per node and the grouping of nodes into physical entities.

    ``group[i]`` indexes the entity of node ``i`` (-1 if the node is left out of
    the cross-map term).  Groups are numbered scene by scene.
    """

    gt_xy: np.ndarray
    group: np.ndarray
    group_gt: np.ndarray
    group_offsets: np.ndarray
    node_offsets: np.ndarray

    @property
    def n_scenes(self) -> int:
        return len(self.node_offsets) - 1

    @property
    def n_groups(self) -> int:
        return len(self.group_gt)

    @classmethod
    def concat(cls, sups: Sequence["Supervision"]) -> "Supervision":
        node_base = np.concatenate([[0], np.cumsum([s.node_offsets[-1] for s in sups])])
        grp_base = np.concatenate([[0], np.cumsum([s.n_groups for s in sups])])
        node_offsets = np.concatenate([[0]] + [s.node_offsets[1:] + b for s, b in zip(sups, node_base)])
        group_offsets = np.concatenate([[0]] + [s.group_offsets[1:] + b for s, b in zip(sups, grp_base)])
        group = np.concatenate([np.where(s.group >= 0, s.group + b, -1) for s, b in zip(sups, grp_base)])
        return cls(
            gt_xy=np.concatenate([s.gt_xy for s in sups]), group=group,
            group_gt=np.concatenate([s.group_gt for s in sups]),
            group_offsets=group_offsets, node_offsets=node_offsets,
        )


def build_supervision(scene: Scene, graph: SceneGraph, cameras_in_crossmap: bool = True) -> Supervision:
    """Ground truth in the frame of map 0; cameras are singleton groups unless excluded."""
    if not scene.has_ground_truth:
        raise ValidationError(f"scene {scene.scene_id} has no ground truth; cannot supervise")
    n = graph.n_nodes
    gt_xy = np.zeros((n, 2))
    det = graph.kind == DETECTION
    ids = graph.gt_object_id[det]
    if np.any(ids < 0):
        raise ValidationError(f"scene {scene.scene_id}: detections without gt_object_id")
    lookup = {int(o): k for k, o in enumerate(scene.object_ids)}
    try:
        rows = np.array([lookup[int(o)] for o in ids], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"scene {scene.scene_id}: unknown gt_object_id {exc}") from None
    gt_xy[det] = scene.object_xy[rows]
    cam = np.flatnonzero(graph.kind == CAMERA)
    gt_xy[cam] = np.array([m.camera_xy_gt for m in scene.maps])

    group = np.full(n, -1, dtype=np.int64)
    seen, inv = np.unique(rows, return_inverse=True)
    group[det] = inv
    group_gt = [scene.object_xy[seen]]
    n_groups = len(seen)
    if cameras_in_crossmap:
        group[cam] = n_groups + np.arange(len(cam))
        group_gt.append(gt_xy[cam])
        n_groups += len(cam)
    return Supervision(gt_xy=gt_xy, group=group, group_gt=np.concatenate(group_gt),
                       group_offsets=np.array([0, n_groups]), node_offsets=np.array([0, n]))


def _check(pred, sup):
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != sup.gt_xy.shape:
        raise ShapeMismatch(f"predictions {pred.shape} vs supervision {sup.gt_xy.shape}")
    return pred


def loss_euclidean(pred, sup: Supervision, with_grad: bool = False):
    """Mean squared distance to ground truth over every node."""
    pred = _check(pred, sup)
    d = pred - sup.gt_xy
    counts = np.diff(sup.node_offsets)
    per_scene = np.add.reduceat(np.sum(d * d, axis=1), sup.node_offsets[:-1]) / counts
    val = float(per_scene.mean())
    if not with_grad:
        return val
    scale = 2.0 / (np.repeat(counts, counts) * sup.n_scenes)
    return val, d * scale[:, None]


def loss_crossmap(pred, sup: Supervision, with_grad: bool = False):
    """Spread of each entity's predictions around their mean, plus the mean's error."""
    pred = _check(pred, sup)
    m = sup.group >= 0
    g = sup.group[m]
    G = sup.n_groups
    sizes = np.bincount(g, minlength=G).astype(np.float64)
    if np.any(sizes == 0):
        raise EmptyGroup("an entity has no prediction nodes")
    P = pred[m]
    mean = np.column_stack([np.bincount(g, P[:, 0], G), np.bincount(g, P[:, 1], G)]) / sizes[:, None]
    dev = P - mean[g]
    var = np.bincount(g, np.sum(dev * dev, axis=1), G) / sizes
    bias_vec = sup.group_gt - mean
    bias = np.sum(bias_vec * bias_vec, axis=1)
    per_group = var + bias
    T = np.diff(sup.group_offsets).astype(np.float64)
    per_scene = np.add.reduceat(per_group, sup.group_offsets[:-1]) / T
    val = float(per_scene.mean())
    if not with_grad:
        return val
    group_scene = np.repeat(np.arange(sup.n_scenes), np.diff(sup.group_offsets))
    coef = 2.0 / (sizes * T[group_scene] * sup.n_scenes)
    grad = np.zeros_like(pred)
    grad[m] = coef[g][:, None] * (dev - bias_vec[g])
    return val, grad


def loss_selfsimilarity(pred, graph: SceneGraph, with_grad: bool = False):
    """Sum over maps of the residual left after aligning predictions onto the local map."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != graph.xy.shape:
        raise ShapeMismatch(f"predictions {pred.shape} vs graph {graph.xy.shape}")
    r, status = kernels.procrustes_forward(graph.map_offsets, graph.xy, pred)
    if np.any(status != kernels.OK):
        bad = int(np.flatnonzero(status != kernels.OK)[0])
        raise DegenerateCloud(f"map {bad}: local map or its predictions have no extent")
    map_scene = np.searchsorted(graph.node_offsets, graph.map_offsets[:-1], side="right") - 1
    S = graph.n_scenes
    val = float(np.bincount(map_scene, r, S).mean())
    if not with_grad:
        return val
    g_r = np.full(len(r), 1.0 / S)
    return val, kernels.procrustes_backward(graph.map_offsets, graph.xy, pred, g_r)


def loss_total(pred, sup: Supervision, graph: SceneGraph, weights: LossWeights = LossWeights(),
               with_grad: bool = False):
    """Weighted sum; returns ``(total, components)`` or ``(total, components, grad)``.

    Components with zero weight are still evaluated for logging.
    """
    fns = (
        lambda wg: loss_euclidean(pred, sup, wg),
        lambda wg: loss_crossmap(pred, sup, wg),
        lambda wg: loss_selfsimilarity(pred, graph, wg),
    )
    names = ("euclidean", "crossmap", "selfsim")
    comps = {}
    total = 0.0
    grad = np.zeros_like(np.asarray(pred, dtype=np.float64)) if with_grad else None
    for name, fn, w in zip(names, fns, weights.as_tuple()):
        if with_grad and w > 0:
            v, g = fn(True)
            grad += w * g
        else:
            v = fn(False)
        comps[name] = v
        total += w * v
    if with_grad:
        return total, comps, grad
    return total, comps
