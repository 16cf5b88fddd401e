"""Alignment network: linear+GeLU encoder, four message-passing layers, linear decoder.

Gradients are hand-derived layer adjoints run in reverse over a cache recorded
by :func:`forward`.  Everything is float64.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ShapeMismatch, ValidationError
from .graph import SceneGraph

ARCHITECTURES = ("gcn", "gat")
N_LAYERS = 4
LEAKY_SLOPE = 0.2
CHECKPOINT_VERSION = 1
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class AlignmentModel:
    arch: str
    n_classes: int
    width: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return self.n_classes + 7

    def copy(self) -> "AlignmentModel":
        return AlignmentModel(self.arch, self.n_classes, self.width,
                              {k: v.copy() for k, v in self.params.items()})

    def layer(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"gnn{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def _glorot(rng, fan_in, fan_out, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def init_model(arch: str, n_classes: int, width: int = 64, seed: int = 0) -> AlignmentModel:
    if arch not in ARCHITECTURES:
        raise ValidationError(f"unsupported architecture {arch!r}; choose from {ARCHITECTURES}")
    if width <= 0 or n_classes < 1:
        raise ValidationError("width and n_classes must be positive")
    rng = np.random.default_rng(seed)
    F = width
    d = n_classes + 7
    p = {"enc.W": _glorot(rng, d, F, (d, F)), "enc.b": np.zeros(F)}
    for i in range(N_LAYERS):
        p[f"gnn{i}.theta"] = _glorot(rng, F, F, (F, F))
        if arch == "gat":
            p[f"gnn{i}.w_dst"] = _glorot(rng, F, F, (F, F))
            p[f"gnn{i}.w_src"] = _glorot(rng, F, F, (F, F))
            p[f"gnn{i}.att"] = _glorot(rng, F, 1, (F,))
    p["dec.W"] = _glorot(rng, F, 2, (F, 2))
    p["dec.b"] = np.zeros(2)
    return AlignmentModel(arch, n_classes, width, p)


# ---------------------------------------------------------------------------
# graph structure helpers


@dataclass
class Structure:
    indptr: np.ndarray
    indices: np.ndarray
    rev: np.ndarray
    gcn_weights: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1


def structure(adjacency) -> Structure:
    """CSR structure from a :class:`SceneGraph` or a dense symmetric 0/1 matrix."""
    if isinstance(adjacency, Structure):
        return adjacency
    if isinstance(adjacency, SceneGraph):
        ip, ind, rev = adjacency.csr
        return Structure(ip, ind, rev, adjacency.gcn_weights)
    A = np.asarray(adjacency)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"adjacency must be square, got {A.shape}")
    if not np.array_equal(A, A.T):
        raise ValidationError("adjacency must be symmetric")
    n = A.shape[0]
    Ahat = (A != 0) | np.eye(n, dtype=bool)
    dst, src = np.nonzero(Ahat)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(Ahat.sum(axis=1), out=indptr[1:])
    pos = -np.ones((n, n), dtype=np.int64)
    pos[dst, src] = np.arange(len(dst))
    rev = pos[src, dst]
    deg = Ahat.sum(axis=1).astype(np.float64)
    return Structure(indptr, src.astype(np.int64), rev, 1.0 / np.sqrt(deg[dst] * deg[src]))


def _check_rows(h, st):
    if h.ndim != 2 or h.shape[0] != st.n_nodes:
        raise ShapeMismatch(f"features have {h.shape[0] if h.ndim else 0} rows, graph has {st.n_nodes} nodes")


# ---------------------------------------------------------------------------
# stages


def encode(model: AlignmentModel, embeddings: np.ndarray) -> np.ndarray:
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.params["enc.W"].shape[0]:
        raise ShapeMismatch(f"embedding width {X.shape[-1]} != encoder input {model.params['enc.W'].shape[0]}")
    return gelu(X @ model.params["enc.W"] + model.params["enc.b"])


def gcn_layer(h: np.ndarray, adjacency, params: dict) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2 h theta``."""
    st = structure(adjacency)
    _check_rows(h, st)
    theta = params["theta"]
    if h.shape[1] != theta.shape[0]:
        raise ShapeMismatch("feature width does not match theta")
    return kernels.spmm(st.indptr, st.indices, st.gcn_weights, h) @ theta


def gat_attention(h: np.ndarray, st: Structure, params: dict) -> np.ndarray:
    """Attention weight of each CSR entry; rows sum to one."""
    P = h @ params["w_dst"]
    Q = h @ params["w_src"]
    s = kernels.gat_scores(st.indptr, st.indices, P, Q, params["att"], LEAKY_SLOPE)
    return kernels.segment_softmax(st.indptr, s)


def gat_layer(h: np.ndarray, adjacency, params: dict) -> np.ndarray:
    """Single-head attention over N(u) and u itself; scores ``a . LeakyReLU(W_dst h_u + W_src h_v)``."""
    st = structure(adjacency)
    _check_rows(h, st)
    if h.shape[1] != params["theta"].shape[0]:
        raise ShapeMismatch("feature width does not match theta")
    alpha = gat_attention(h, st, params)
    return kernels.spmm(st.indptr, st.indices, alpha, h) @ params["theta"]


def decode(model: AlignmentModel, h: np.ndarray) -> np.ndarray:
    if h.ndim != 2 or h.shape[1] != model.params["dec.W"].shape[0]:
        raise ShapeMismatch(f"decoder expects width {model.params['dec.W'].shape[0]}")
    return h @ model.params["dec.W"] + model.params["dec.b"]


# ---------------------------------------------------------------------------
# full pass with cache


@dataclass
class _Cache:
    X: np.ndarray
    pre0: np.ndarray
    hs: list = field(default_factory=list)      # input of each GNN layer
    aggs: list = field(default_factory=list)    # aggregated features before theta
    pres: list = field(default_factory=list)    # layer outputs before GeLU
    alphas: list = field(default_factory=list)
    st: Structure | None = None


def forward(model: AlignmentModel, graph, embeddings: np.ndarray | None = None,
            return_cache: bool = False):
    """Predicted global coordinates for every node, shape ``(n_nodes, 2)``."""
    st = structure(graph)
    X = graph.embeddings() if embeddings is None else np.asarray(embeddings, dtype=np.float64)
    if X.shape[0] != st.n_nodes:
        raise ShapeMismatch("embedding rows do not match node count")
    if model.arch not in ARCHITECTURES:
        raise ValidationError(f"unsupported architecture {model.arch!r}")
    p = model.params
    if X.shape[1] != p["enc.W"].shape[0]:
        raise ShapeMismatch(f"embedding width {X.shape[1]} != encoder input {p['enc.W'].shape[0]}")
    pre0 = X @ p["enc.W"] + p["enc.b"]
    h = gelu(pre0)
    cache = _Cache(X=X, pre0=pre0, st=st)
    for i in range(N_LAYERS):
        lp = model.layer(i)
        if model.arch == "gcn":
            alpha = st.gcn_weights
        else:
            alpha = gat_attention(h, st, lp)
        agg = kernels.spmm(st.indptr, st.indices, alpha, h)
        z = agg @ lp["theta"]
        cache.hs.append(h)
        cache.alphas.append(alpha)
        cache.aggs.append(agg)
        cache.pres.append(z)
        h = gelu(z) if i < N_LAYERS - 1 else z
    cache.hs.append(h)
    out = h @ p["dec.W"] + p["dec.b"]
    if return_cache:
        return out, cache
    return out


def backward(model: AlignmentModel, cache: _Cache, g_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of ``sum(g_out * forward(...))`` w.r.t. every parameter."""
    p = model.params
    st = cache.st
    grads = {}
    h_last = cache.hs[-1]
    grads["dec.W"] = h_last.T @ g_out
    grads["dec.b"] = g_out.sum(axis=0)
    g_h = g_out @ p["dec.W"].T
    for i in reversed(range(N_LAYERS)):
        lp = model.layer(i)
        g_z = g_h * gelu_grad(cache.pres[i]) if i < N_LAYERS - 1 else g_h
        agg, alpha, h_in = cache.aggs[i], cache.alphas[i], cache.hs[i]
        grads[f"gnn{i}.theta"] = agg.T @ g_z
        g_agg = g_z @ lp["theta"].T
        g_h = kernels.spmm(st.indptr, st.indices, alpha[st.rev], g_agg)
        if model.arch == "gat":
            g_alpha = kernels.edge_dot(st.indptr, st.indices, g_agg, h_in)
            g_s = kernels.segment_softmax_backward(st.indptr, alpha, g_alpha)
            P = h_in @ lp["w_dst"]
            Q = h_in @ lp["w_src"]
            gP, gQ, ga = kernels.gat_scores_backward(st.indptr, st.indices, st.rev, P, Q,
                                                     lp["att"], LEAKY_SLOPE, g_s)
            grads[f"gnn{i}.w_dst"] = h_in.T @ gP
            grads[f"gnn{i}.w_src"] = h_in.T @ gQ
            grads[f"gnn{i}.att"] = ga
            g_h = g_h + gP @ lp["w_dst"].T + gQ @ lp["w_src"].T
    g_pre0 = g_h * gelu_grad(cache.pre0)
    grads["enc.W"] = cache.X.T @ g_pre0
    grads["enc.b"] = g_pre0.sum(axis=0)
    return {k: grads[k] for k in p}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: AlignmentModel, path) -> None:
    meta = {"format": "mapreg-checkpoint", "version": CHECKPOINT_VERSION, "arch": model.arch,
            "width": model.width, "n_classes": model.n_classes, "n_layers": N_LAYERS,
            "param_names": list(model.params)}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **model.params)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> AlignmentModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != "mapreg-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        params = {name: data[name].copy() for name in meta["param_names"]}
    return AlignmentModel(meta["arch"], meta["n_classes"], meta["width"], params)
