"""Classical registration baseline: alternate matching, per-map alignment and averaging."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .datagen import LocalMap
from .errors import DegenerateCloud, NoValidMatches, ValidationError
from .geometry import Similarity2D, align_2d, alignment_residual, apply_similarity
from .graph import MATCHING_MODES

TOLERANCE = 1e-8


@dataclass
class BaselineResult:
    object_xy: np.ndarray          # (G, 2) global objects
    object_class: np.ndarray       # (G,)
    camera_xy: np.ndarray          # (M, 2)
    transforms: list[Similarity2D]  # local -> global, per map
    assignment: list[np.ndarray]   # per map: global index of every detection
    residuals: list[float] = field(default_factory=list)  # total residual per iteration
    iterations: int = 0
    converged: bool = False
    stop_reason: str = ""

    def node_predictions(self) -> np.ndarray:
        """Predictions in graph node order (per map: camera, then detections)."""
        rows = []
        for cam, assign in zip(self.camera_xy, self.assignment):
            rows.append(cam[None, :])
            rows.append(self.object_xy[assign])
        return np.vstack(rows)


class _Globals:
    def __init__(self):
        self.xy = np.zeros((0, 2))
        self.cls = np.zeros(0, dtype=np.int64)
        self.gid = np.zeros(0, dtype=np.int64)

    def add(self, xy, cls, gid) -> np.ndarray:
        start = len(self.cls)
        self.xy = np.vstack([self.xy, np.asarray(xy).reshape(-1, 2)])
        self.cls = np.r_[self.cls, cls]
        self.gid = np.r_[self.gid, gid]
        return np.arange(start, len(self.cls))


def _greedy_match(P, cls, G: _Globals, gate: float) -> np.ndarray:
    """One-to-one nearest-neighbour assignment within class; -1 where unmatched."""
    out = np.full(len(P), -1, dtype=np.int64)
    if len(G.cls) == 0:
        return out
    d = np.linalg.norm(P[:, None, :] - G.xy[None, :, :], axis=2)
    d[cls[:, None] != G.cls[None, :]] = np.inf
    d[d > gate] = np.inf
    used = np.zeros(len(G.cls), dtype=bool)
    for flat in np.argsort(d, axis=None):
        i, j = divmod(int(flat), d.shape[1])
        if not np.isfinite(d[i, j]):
            break
        if out[i] < 0 and not used[j]:
            out[i], used[j] = j, True
    return out


def _gate(G: _Globals) -> float:
    spread = np.sqrt(np.mean(np.sum((G.xy - G.xy.mean(0)) ** 2, axis=1))) if len(G.xy) else 0.0
    return max(0.25 * spread, 1e-9)


def _two_point(dst, src) -> Similarity2D | None:
    """Similarity taking ``src[0], src[1]`` exactly onto ``dst[0], dst[1]``."""
    u, v = src[1] - src[0], dst[1] - dst[0]
    nu = np.hypot(*u)
    if nu < 1e-12 or np.hypot(*v) < 1e-12:
        return None
    # clockwise-positive angle, matching rotation()
    theta = np.arctan2(u[1], u[0]) - np.arctan2(v[1], v[0])
    t = Similarity2D(float(theta), float(np.hypot(*v) / nu))
    tau = dst[0] - t.matrix @ src[0]
    return Similarity2D(t.theta, t.scale, tuple(tau))


def _hypothesis_match(m: LocalMap, G: _Globals) -> np.ndarray:
    """Match a map with unknown pose: try every two-point class-consistent hypothesis.

    Hypotheses are ranked by match count, then by summed match distance; a
    hypothesis that matches every detection exactly ends the search.
    """
    gate = _gate(G)
    exact = 1e-9 * max(gate, 1.0)
    best, best_key = np.full(len(m), -1, dtype=np.int64), (0, 0.0)
    for i, j in combinations(range(len(m)), 2):
        for a in np.flatnonzero(G.cls == m.classes[i]):
            for b in np.flatnonzero(G.cls == m.classes[j]):
                if a == b:
                    continue
                t = _two_point(G.xy[[a, b]], m.xy[[i, j]])
                if t is None:
                    continue
                P = apply_similarity(t, m.xy)
                assign = _greedy_match(P, m.classes, G, gate)
                ok = assign >= 0
                err = float(np.sum(np.linalg.norm(P[ok] - G.xy[assign[ok]], axis=1)))
                key = (int(ok.sum()), -err)
                if key > best_key:
                    best, best_key = assign, key
                    if ok.all() and err < exact * len(m):
                        return best
    return best


def _match(m: LocalMap, t: Similarity2D | None, G: _Globals, matching: str) -> np.ndarray:
    if matching == "gt_matches":
        lookup = {int(g): k for k, g in enumerate(G.gid) if g >= 0}
        return np.array([lookup.get(int(g), -1) if g >= 0 else -1 for g in m.gt_object_id], dtype=np.int64)
    if t is None:
        return _hypothesis_match(m, G)
    return _greedy_match(apply_similarity(t, m.xy), m.classes, G, _gate(G))


def baseline_solve(maps: Sequence[LocalMap], matching: str = "class_based", iterations: int = 50) -> BaselineResult:
    """Register local maps into the frame of map 0 by alternating matching and alignment.

    Detections left unmatched become new global objects.  Stops when objects
    move less than ``TOLERANCE``, when the summed alignment residual would
    grow (the previous state is kept), or after ``iterations`` rounds.  Raises
    NoValidMatches if some map never shares two matched objects with the
    global map.
    """
    if matching not in MATCHING_MODES:
        raise ValidationError(f"matching must be one of {MATCHING_MODES}, got {matching!r}")
    if len(maps) < 2:
        raise ValidationError("need at least two local maps")
    if iterations < 1:
        raise ValidationError("iterations must be >= 1")
    if matching == "gt_matches" and any(np.any(m.gt_object_id < 0) for m in maps):
        raise ValidationError("gt_matches mode needs a gt_object_id on every detection")

    G = _Globals()
    first = maps[0]
    assign = [G.add(first.xy, first.classes, first.gt_object_id)] + [None] * (len(maps) - 1)
    transforms: list[Similarity2D | None] = [Similarity2D(0.0, 1.0, (0.0, 0.0))] + [None] * (len(maps) - 1)
    result = BaselineResult(G.xy, G.cls, np.zeros((len(maps), 2)), transforms, assign)

    for it in range(1, iterations + 1):
        snapshot = (G.xy.copy(), G.cls.copy(), G.gid.copy(), list(transforms), list(assign))
        total = 0.0
        pending = list(range(1, len(maps))) if it == 1 else list(range(len(maps)))
        while pending:
            progress = False
            for k in list(pending):
                m = maps[k]
                a = _match(m, transforms[k], G, matching)
                ok = a >= 0
                if ok.sum() < 2:
                    continue
                try:
                    transforms[k] = align_2d(G.xy[a[ok]], m.xy[ok])
                except DegenerateCloud:
                    continue
                total += alignment_residual(G.xy[a[ok]], m.xy[ok])
                if np.any(~ok):
                    P = apply_similarity(transforms[k], m.xy[~ok])
                    a[~ok] = G.add(P, m.classes[~ok], m.gt_object_id[~ok])
                assign[k] = a
                pending.remove(k)
                progress = True
            if not progress:
                raise NoValidMatches(f"map {pending[0]} matches fewer than 2 global objects")

        # re-average every global object over the maps that observe it
        acc = np.zeros_like(G.xy)
        cnt = np.zeros(len(G.xy))
        for m, t, a in zip(maps, transforms, assign):
            np.add.at(acc, a, apply_similarity(t, m.xy))
            np.add.at(cnt, a, 1.0)
        keep = cnt > 0
        new = G.xy.copy()
        new[keep] = acc[keep] / cnt[keep, None]
        movement = float(np.max(np.linalg.norm(new - G.xy, axis=1))) if len(new) else 0.0
        if it > 1 and total > result.residuals[-1] * (1 + 1e-12):
            G.xy, G.cls, G.gid, transforms, assign = snapshot
            result.stop_reason = "residual increased"
            break
        G.xy = new
        result.residuals.append(total)
        result.iterations = it
        if movement < TOLERANCE:
            result.converged = True
            result.stop_reason = "converged"
            break
    else:
        result.stop_reason = "iteration cap"

    result.object_xy, result.object_class = G.xy, G.cls
    result.transforms = transforms
    result.assignment = assign
    result.camera_xy = np.array([t.translation for t in transforms], dtype=np.float64)
    return result
