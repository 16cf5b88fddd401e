"""Detection graph: one complete subgraph per local map plus cross-map edges.

Node order is deterministic: maps in input order, and within each map the camera
node first followed by the detections in map order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .datagen import LocalMap
from .errors import ClassOutOfRange, DisconnectedGraph, ValidationError

DETECTION = 0
CAMERA = 1
MATCHING_MODES = ("class_based", "gt_matches")


@dataclass
class SceneGraph:
    kind: np.ndarray           # (n,) DETECTION or CAMERA
    map_index: np.ndarray      # (n,)
    class_id: np.ndarray       # (n,) -1 for cameras
    xy: np.ndarray             # (n, 2) local-map coordinates; cameras at the origin
    bbox: np.ndarray           # (n, 4) zeros when no box
    gt_object_id: np.ndarray   # (n,) -1 when unknown or camera
    map_offsets: np.ndarray    # (n_maps + 1,) node ranges of each map
    same_map_edges: np.ndarray  # (E1, 2) with i < j
    cross_map_edges: np.ndarray  # (E2, 2) with i < j
    n_classes: int
    matching: str = "class_based"
    node_offsets: np.ndarray = field(default=None)  # scene ranges after a union

    def __post_init__(self):
        if self.node_offsets is None:
            self.node_offsets = np.array([0, self.n_nodes])

    @property
    def n_nodes(self) -> int:
        return len(self.kind)

    @property
    def n_maps(self) -> int:
        return len(self.map_offsets) - 1

    @property
    def n_scenes(self) -> int:
        return len(self.node_offsets) - 1

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([self.same_map_edges, self.cross_map_edges])

    @cached_property
    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 matrix with an empty diagonal."""
        A = np.zeros((self.n_nodes, self.n_nodes), dtype=np.uint8)
        e = self.edges
        A[e[:, 0], e[:, 1]] = 1
        A[e[:, 1], e[:, 0]] = 1
        return A

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(indptr, indices, rev)`` of the adjacency plus self-loops, rows = receivers."""
        e = self.edges
        n = self.n_nodes
        loops = np.arange(n)
        dst = np.concatenate([e[:, 0], e[:, 1], loops])
        src = np.concatenate([e[:, 1], e[:, 0], loops])
        order = np.lexsort((src, dst))
        dst, src = dst[order], src[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=n), out=indptr[1:])
        # position of (src -> dst) inside the sorted (dst, src) list
        key = dst * n + src
        rev = np.searchsorted(key, src * n + dst)
        return indptr, src.astype(np.int64), rev.astype(np.int64)

    @cached_property
    def gcn_weights(self) -> np.ndarray:
        """Symmetric normalisation ``1/sqrt(d_u d_v)`` with degrees counting the self-loop."""
        indptr, indices, _ = self.csr
        deg = np.diff(indptr).astype(np.float64)
        rows = np.repeat(np.arange(self.n_nodes), np.diff(indptr))
        return 1.0 / np.sqrt(deg[rows] * deg[indices])

    @cached_property
    def features(self) -> np.ndarray:
        return initial_embeddings(self, self.n_classes)

    def embeddings(self) -> np.ndarray:
        return self.features

    @classmethod
    def union(cls, graphs: Sequence["SceneGraph"]) -> "SceneGraph":
        """Disjoint union; scene ``s`` occupies ``node_offsets[s]:node_offsets[s+1]``."""
        if not graphs:
            raise ValidationError("cannot take the union of zero graphs")
        sizes = np.array([g.n_nodes for g in graphs])
        starts = np.concatenate([[0], np.cumsum(sizes)])
        map_offsets = [np.array([0])]
        for g, s in zip(graphs, starts):
            map_offsets.append(g.map_offsets[1:] + s)
        map_base = np.concatenate([[0], np.cumsum([g.n_maps for g in graphs])])
        out = cls(
            kind=np.concatenate([g.kind for g in graphs]),
            map_index=np.concatenate([g.map_index + b for g, b in zip(graphs, map_base)]),
            class_id=np.concatenate([g.class_id for g in graphs]),
            xy=np.concatenate([g.xy for g in graphs]),
            bbox=np.concatenate([g.bbox for g in graphs]),
            gt_object_id=np.concatenate([g.gt_object_id for g in graphs]),
            map_offsets=np.concatenate(map_offsets),
            same_map_edges=np.concatenate([g.same_map_edges + s for g, s in zip(graphs, starts)]),
            cross_map_edges=np.concatenate([g.cross_map_edges + s for g, s in zip(graphs, starts)]),
            n_classes=max(g.n_classes for g in graphs),
            matching=graphs[0].matching,
            node_offsets=starts,
        )
        # reuse per-graph caches instead of re-sorting the union's edge list
        nnz = np.concatenate([[0], np.cumsum([len(g.csr[1]) for g in graphs])])
        indptr = np.concatenate([[0]] + [g.csr[0][1:] + z for g, z in zip(graphs, nnz)])
        indices = np.concatenate([g.csr[1] + s for g, s in zip(graphs, starts)])
        rev = np.concatenate([g.csr[2] + z for g, z in zip(graphs, nnz)])
        out.__dict__["csr"] = (indptr, indices, rev)
        out.__dict__["gcn_weights"] = np.concatenate([g.gcn_weights for g in graphs])
        if len({g.n_classes for g in graphs}) == 1:
            out.__dict__["features"] = np.concatenate([g.features for g in graphs])
        return out


def _pairs(n):
    i, j = np.triu_indices(n, k=1)
    return np.column_stack([i, j])


def build_graph(maps: Sequence[LocalMap], matching: str = "class_based", n_classes: int | None = None) -> SceneGraph:
    """Nodes for every camera and detection, complete per-map subgraphs, and
    cross-map edges between detections with equal class (``class_based``) or
    equal ground-truth object id (``gt_matches``)."""
    if matching not in MATCHING_MODES:
        raise ValidationError(f"matching must be one of {MATCHING_MODES}, got {matching!r}")
    if len(maps) < 2:
        raise ValidationError("need at least two local maps")
    kind, map_index, cls, xy, bbox, gt, same = [], [], [], [], [], [], []
    offsets = [0]
    for m, lm in enumerate(maps):
        n = len(lm)
        if n < 1:
            raise ValidationError(f"map {m} has no detections")
        base = offsets[-1]
        kind.append(np.r_[CAMERA, np.full(n, DETECTION)])
        map_index.append(np.full(n + 1, m))
        cls.append(np.r_[-1, lm.classes])
        xy.append(np.vstack([[0.0, 0.0], lm.xy]))
        bbox.append(np.vstack([np.zeros((1, 4)), np.nan_to_num(lm.bbox, nan=0.0)]))
        gt.append(np.r_[-1, lm.gt_object_id])
        same.append(_pairs(n + 1) + base)
        offsets.append(base + n + 1)
    kind = np.concatenate(kind).astype(np.int8)
    map_index = np.concatenate(map_index)
    cls = np.concatenate(cls).astype(np.int64)
    gt = np.concatenate(gt).astype(np.int64)
    if n_classes is None:
        n_classes = int(cls.max()) + 1

    det = np.flatnonzero(kind == DETECTION)
    key = cls[det] if matching == "class_based" else gt[det]
    ok = key >= 0
    match = (key[:, None] == key[None, :]) & ok[:, None] & ok[None, :]
    match &= map_index[det][:, None] != map_index[det][None, :]
    a, b = np.nonzero(np.triu(match, k=1))
    cross = np.column_stack([det[a], det[b]]).astype(np.int64).reshape(-1, 2)

    g = SceneGraph(
        kind=kind, map_index=map_index, class_id=cls, xy=np.concatenate(xy),
        bbox=np.concatenate(bbox), gt_object_id=gt, map_offsets=np.array(offsets),
        same_map_edges=np.concatenate(same).astype(np.int64), cross_map_edges=cross,
        n_classes=int(n_classes), matching=matching,
    )
    n = g.n_nodes
    e = g.edges
    A = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    n_comp, _ = connected_components(A, directed=False)
    if n_comp > 1:
        raise DisconnectedGraph(
            f"graph has {n_comp} connected components; some maps share no "
            f"{'class' if matching == 'class_based' else 'matched object'} with the rest")
    return g


def initial_embeddings(g: SceneGraph, n_classes: int) -> np.ndarray:
    """Rows ``[x, y | one-hot over n_classes + camera channel | bbox(4)]``."""
    det = g.kind == DETECTION
    if np.any(g.class_id[det] >= n_classes) or np.any(g.class_id[det] < 0):
        raise ClassOutOfRange(f"detection class outside [0, {n_classes})")
    X = np.zeros((g.n_nodes, n_classes + 7))
    X[:, :2] = g.xy
    col = np.where(det, g.class_id, n_classes)
    X[np.arange(g.n_nodes), 2 + col] = 1.0
    X[:, n_classes + 3:] = np.where(det[:, None], g.bbox, 0.0)
    return X
