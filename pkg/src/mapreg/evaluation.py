"""Gauge-aligned scene metrics and their aggregation over runs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import DegenerateCloud, ShapeMismatch, ValidationError
from .geometry import align_2d, apply_similarity
from .graph import CAMERA
from .losses import Supervision

FAIL_THRESHOLD = 7.5
FAIL_METRICS = ("mu_o", "mu_c", "max")


@dataclass(frozen=True)
class SceneMetrics:
    mu_c: float
    mu_o: float
    failed: bool

    def __iter__(self):
        return iter((self.mu_c, self.mu_o, self.failed))


def entity_estimates(pred, sup: Supervision, graph) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-object mean prediction and camera predictions, with matching ground truth.

    Returns ``(obj_pred, obj_gt, cam_pred, cam_gt)`` for a single scene.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != sup.gt_xy.shape:
        raise ShapeMismatch(f"predictions {pred.shape} vs supervision {sup.gt_xy.shape}")
    cam = graph.kind == CAMERA
    det = ~cam
    g = sup.group[det]
    if np.any(g < 0):
        raise ValidationError("every detection needs an object group")
    uniq, inv = np.unique(g, return_inverse=True)
    sizes = np.bincount(inv).astype(np.float64)
    P = pred[det]
    obj = np.column_stack([np.bincount(inv, P[:, 0]), np.bincount(inv, P[:, 1])]) / sizes[:, None]
    return obj, sup.group_gt[uniq], pred[cam], sup.gt_xy[cam]


def is_failure(mu_c: float, mu_o: float, threshold: float = FAIL_THRESHOLD, metric: str = "mu_o") -> bool:
    if metric not in FAIL_METRICS:
        raise ValidationError(f"failure metric must be one of {FAIL_METRICS}")
    value = {"mu_o": mu_o, "mu_c": mu_c, "max": max(mu_o, mu_c)}[metric]
    return bool(not np.isfinite(value) or value > threshold)


def evaluate_scene(pred, sup: Supervision, graph, threshold: float = FAIL_THRESHOLD,
                   metric: str = "mu_o") -> SceneMetrics:
    """Register predicted objects and cameras onto ground truth, then measure mean errors.

    A scene whose predictions cannot be registered (no spatial extent) counts as
    failed with NaN errors.
    """
    obj, obj_gt, cam, cam_gt = entity_estimates(pred, sup, graph)
    src = np.vstack([obj, cam])
    dst = np.vstack([obj_gt, cam_gt])
    try:
        t = align_2d(dst, src)
    except DegenerateCloud:
        return SceneMetrics(float("nan"), float("nan"), True)
    aligned = apply_similarity(t, src)
    err = np.linalg.norm(aligned - dst, axis=1)
    mu_o = float(err[: len(obj)].mean())
    mu_c = float(err[len(obj):].mean()) if len(cam) else float("nan")
    return SceneMetrics(mu_c, mu_o, is_failure(mu_c, mu_o, threshold, metric))


def evaluate_model(model: nn.AlignmentModel, samples, threshold: float = FAIL_THRESHOLD,
                   metric: str = "mu_o") -> list[SceneMetrics]:
    out = []
    for s in samples:
        pred = nn.forward(model, s.graph)
        out.append(evaluate_scene(pred, s.sup, s.graph, threshold, metric))
    return out


def aggregate(metrics: Sequence[SceneMetrics]) -> dict:
    """Failure rate (%) plus mean/std of errors over non-failed scenes and over all scenes."""
    if not metrics:
        raise ValidationError("no scenes to aggregate")
    failed = np.array([m.failed for m in metrics])
    mu_o = np.array([m.mu_o for m in metrics])
    mu_c = np.array([m.mu_c for m in metrics])
    ok = ~failed

    def stat(a, mask):
        a = a[mask & np.isfinite(a)]
        return (float(a.mean()), float(a.std())) if len(a) else (float("nan"), float("nan"))

    mo, so = stat(mu_o, ok)
    mc, sc = stat(mu_c, ok)
    mo_all, _ = stat(mu_o, np.ones_like(ok))
    mc_all, _ = stat(mu_c, np.ones_like(ok))
    return {
        "n_scenes": int(len(metrics)), "failure_rate": float(100.0 * failed.mean()),
        "mu_o": mo, "sigma_o": so, "mu_c": mc, "sigma_c": sc,
        "mu_o_all": mo_all, "mu_c_all": mc_all,
    }
