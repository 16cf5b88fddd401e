"""Hot loops of the training pipeline, each written twice.

Every kernel has a numba implementation (``_nb_*``) and a vectorised numpy
implementation (``_np_*``) with the same signature.  The public names dispatch
to whichever backend is active; ``MAPREG_NUMBA=0`` starts on numpy, and
:func:`set_backend` switches at runtime (used by the tests and the benchmark).

Sparse structures are CSR by receiving node: ``indptr`` of length ``n + 1`` and
``indices`` holding the sending node of each entry.  Every row must be
non-empty, which holds once self-loops are added.  ``rev[e]`` is the position
of the reversed entry, so a transposed product is ``spmm`` with permuted
weights.

Point-set kernels work on contiguous row segments delimited by ``offsets``.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import _accel
from ._accel import njit

EPS = 1e-12

# status codes returned by the procrustes kernels
OK = 0
DEGENERATE = 1


# ---------------------------------------------------------------------------
# numpy backend


def _rows(indptr):
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def _np_spmm(indptr, indices, weights, X):
    return np.add.reduceat(weights[:, None] * X[indices], indptr[:-1], axis=0)


def _np_edge_dot(indptr, indices, G, H):
    return np.einsum("ij,ij->i", G[_rows(indptr)], H[indices])


def _np_segment_softmax(indptr, scores):
    rows = _rows(indptr)
    m = np.maximum.reduceat(scores, indptr[:-1])
    e = np.exp(scores - m[rows])
    return e / np.add.reduceat(e, indptr[:-1])[rows]


def _np_segment_softmax_backward(indptr, alpha, g_alpha):
    rows = _rows(indptr)
    dot = np.add.reduceat(alpha * g_alpha, indptr[:-1])
    return alpha * (g_alpha - dot[rows])


def _np_gat_scores(indptr, indices, P, Q, a, slope):
    z = P[_rows(indptr)] + Q[indices]
    return np.where(z > 0, z, slope * z) @ a


def _np_gat_scores_backward(indptr, indices, rev, P, Q, a, slope, g_scores):
    z = P[_rows(indptr)] + Q[indices]
    pos = z > 0
    ga = np.where(pos, z, slope * z).T @ g_scores
    dz = g_scores[:, None] * np.where(pos, 1.0, slope) * a
    gP = np.add.reduceat(dz, indptr[:-1], axis=0)
    gQ = np.add.reduceat(dz[rev], indptr[:-1], axis=0)
    return gP, gQ, ga


def _np_procrustes_parts(offsets, T, S):
    counts = np.diff(offsets)
    starts = offsets[:-1]
    seg = np.repeat(np.arange(len(counts)), counts)
    mu_t = np.add.reduceat(T, starts, axis=0) / counts[:, None]
    mu_s = np.add.reduceat(S, starts, axis=0) / counts[:, None]
    A = T - mu_t[seg]
    B = S - mu_s[seg]
    rho_t = np.sqrt(np.add.reduceat(np.sum(A * A, axis=1), starts))
    rho_s = np.sqrt(np.add.reduceat(np.sum(B * B, axis=1), starts))
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    valid = (na >= EPS) & (nb >= EPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(valid[:, None], A / na[:, None], 0.0)
        v = np.where(valid[:, None], B / nb[:, None], 0.0)
    k = np.add.reduceat(valid.astype(np.float64), starts)
    dot = v[:, 0] * u[:, 0] + v[:, 1] * u[:, 1]
    crs = v[:, 1] * u[:, 0] - v[:, 0] * u[:, 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        c_bar = np.add.reduceat(dot, starts) / k
        s_bar = np.add.reduceat(crs, starts) / k
    n = np.hypot(c_bar, s_bar)
    bad = (counts < 2) | (rho_t < EPS) | (rho_s < EPS) | (k == 0) | ~(n >= EPS)
    safe = np.where(bad, 1.0, n)
    c = np.where(bad, 1.0, c_bar / safe)
    s = np.where(bad, 0.0, s_bar / safe)
    rho_s_safe = np.where(bad, 1.0, rho_s)
    b = B / rho_s_safe[seg][:, None]
    Rb = np.column_stack([c[seg] * b[:, 0] + s[seg] * b[:, 1], -s[seg] * b[:, 0] + c[seg] * b[:, 1]])
    E = A - rho_t[seg][:, None] * Rb
    r = np.sqrt(np.add.reduceat(np.sum(E * E, axis=1), starts))
    return dict(seg=seg, starts=starts, counts=counts, rho_t=rho_t, rho_s=rho_s_safe, nb=nb,
                valid=valid, u=u, v=v, k=k, n=safe, c=c, s=s, b=b, E=E, r=r, bad=bad)


def _np_procrustes_forward(offsets, T, S):
    p = _np_procrustes_parts(offsets, T, S)
    r = np.where(p["bad"], np.nan, p["r"])
    return r, p["bad"].astype(np.int64)


def _np_procrustes_backward(offsets, T, S, g_r):
    p = _np_procrustes_parts(offsets, T, S)
    seg, starts = p["seg"], p["starts"]
    c, s, b, E = p["c"][seg], p["s"][seg], p["b"], p["E"]
    live = (~p["bad"]) & (p["r"] >= EPS)
    scale = np.where(live, g_r / np.where(live, p["r"], 1.0), 0.0)
    g = scale[seg][:, None] * E
    rho_t = p["rho_t"][seg][:, None]
    g_b = -rho_t * np.column_stack([g[:, 0] * c - g[:, 1] * s, g[:, 0] * s + g[:, 1] * c])
    g_c = -p["rho_t"] * np.add.reduceat(g[:, 0] * b[:, 0] + g[:, 1] * b[:, 1], starts)
    g_s = -p["rho_t"] * np.add.reduceat(g[:, 0] * b[:, 1] - g[:, 1] * b[:, 0], starts)
    proj = g_c * p["c"] + g_s * p["s"]
    gc_bar = (g_c - proj * p["c"]) / p["n"]
    gs_bar = (g_s - proj * p["s"]) / p["n"]
    k = np.where(p["k"] > 0, p["k"], 1.0)
    u = p["u"]
    gvx = (gc_bar[seg] * u[:, 0] - gs_bar[seg] * u[:, 1]) / k[seg]
    gvy = (gc_bar[seg] * u[:, 1] + gs_bar[seg] * u[:, 0]) / k[seg]
    v = p["v"]
    pr = gvx * v[:, 0] + gvy * v[:, 1]
    nb = np.where(p["valid"], p["nb"], 1.0)
    gB = np.where(p["valid"][:, None], np.column_stack([gvx - pr * v[:, 0], gvy - pr * v[:, 1]]) / nb[:, None], 0.0)
    bb = np.add.reduceat(np.sum(g_b * b, axis=1), starts)
    gB += (g_b - bb[seg][:, None] * b) / p["rho_s"][seg][:, None]
    mean = np.add.reduceat(gB, starts, axis=0) / p["counts"][:, None]
    return gB - mean[seg]


# ---------------------------------------------------------------------------
# numba backend


@njit
def _nb_spmm(indptr, indices, weights, X):
    n = indptr.shape[0] - 1
    f = X.shape[1]
    Y = np.zeros((n, f))
    for u in range(n):
        for e in range(indptr[u], indptr[u + 1]):
            w = weights[e]
            src = indices[e]
            for k in range(f):
                Y[u, k] += w * X[src, k]
    return Y


@njit
def _nb_edge_dot(indptr, indices, G, H):
    n = indptr.shape[0] - 1
    out = np.empty(indices.shape[0])
    for u in range(n):
        for e in range(indptr[u], indptr[u + 1]):
            v = indices[e]
            acc = 0.0
            for k in range(G.shape[1]):
                acc += G[u, k] * H[v, k]
            out[e] = acc
    return out


@njit
def _nb_segment_softmax(indptr, scores):
    out = np.empty_like(scores)
    for u in range(indptr.shape[0] - 1):
        lo, hi = indptr[u], indptr[u + 1]
        m = scores[lo]
        for e in range(lo + 1, hi):
            if scores[e] > m:
                m = scores[e]
        z = 0.0
        for e in range(lo, hi):
            out[e] = math.exp(scores[e] - m)
            z += out[e]
        for e in range(lo, hi):
            out[e] /= z
    return out


@njit
def _nb_segment_softmax_backward(indptr, alpha, g_alpha):
    out = np.empty_like(alpha)
    for u in range(indptr.shape[0] - 1):
        lo, hi = indptr[u], indptr[u + 1]
        dot = 0.0
        for e in range(lo, hi):
            dot += alpha[e] * g_alpha[e]
        for e in range(lo, hi):
            out[e] = alpha[e] * (g_alpha[e] - dot)
    return out


@njit
def _nb_gat_scores(indptr, indices, P, Q, a, slope):
    out = np.empty(indices.shape[0])
    f = P.shape[1]
    for u in range(indptr.shape[0] - 1):
        for e in range(indptr[u], indptr[u + 1]):
            v = indices[e]
            acc = 0.0
            for k in range(f):
                z = P[u, k] + Q[v, k]
                acc += a[k] * (z if z > 0 else slope * z)
            out[e] = acc
    return out


@njit
def _nb_gat_scores_backward(indptr, indices, rev, P, Q, a, slope, g_scores):
    n, f = P.shape
    gP = np.zeros((n, f))
    gQ = np.zeros((n, f))
    ga = np.zeros(f)
    for u in range(n):
        for e in range(indptr[u], indptr[u + 1]):
            v = indices[e]
            g = g_scores[e]
            for k in range(f):
                z = P[u, k] + Q[v, k]
                if z > 0:
                    ga[k] += g * z
                    d = g * a[k]
                else:
                    ga[k] += g * slope * z
                    d = g * a[k] * slope
                gP[u, k] += d
                gQ[v, k] += d
    return gP, gQ, ga


@njit
def _nb_procrustes_segment(T, S, lo, hi):
    # returns status, r, rho_t, rho_s, k, n, c, s, mu_s_x, mu_s_y
    cnt = hi - lo
    if cnt < 2:
        return DEGENERATE, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0
    mtx = mty = msx = msy = 0.0
    for i in range(lo, hi):
        mtx += T[i, 0]
        mty += T[i, 1]
        msx += S[i, 0]
        msy += S[i, 1]
    mtx /= cnt
    mty /= cnt
    msx /= cnt
    msy /= cnt
    rt = rs = 0.0
    for i in range(lo, hi):
        ax, ay = T[i, 0] - mtx, T[i, 1] - mty
        bx, by = S[i, 0] - msx, S[i, 1] - msy
        rt += ax * ax + ay * ay
        rs += bx * bx + by * by
    rt = math.sqrt(rt)
    rs = math.sqrt(rs)
    if rt < EPS or rs < EPS:
        return DEGENERATE, 0.0, rt, 1.0, 0.0, 1.0, 1.0, 0.0, msx, msy
    k = 0.0
    cb = sb = 0.0
    for i in range(lo, hi):
        ax, ay = T[i, 0] - mtx, T[i, 1] - mty
        bx, by = S[i, 0] - msx, S[i, 1] - msy
        na = math.sqrt(ax * ax + ay * ay)
        nb = math.sqrt(bx * bx + by * by)
        if na >= EPS and nb >= EPS:
            ux, uy = ax / na, ay / na
            vx, vy = bx / nb, by / nb
            cb += vx * ux + vy * uy
            sb += vy * ux - vx * uy
            k += 1.0
    if k == 0.0:
        return DEGENERATE, 0.0, rt, rs, 0.0, 1.0, 1.0, 0.0, msx, msy
    cb /= k
    sb /= k
    n = math.sqrt(cb * cb + sb * sb)
    if n < EPS:
        return DEGENERATE, 0.0, rt, rs, k, 1.0, 1.0, 0.0, msx, msy
    c, s = cb / n, sb / n
    r = 0.0
    for i in range(lo, hi):
        ax, ay = T[i, 0] - mtx, T[i, 1] - mty
        bx, by = (S[i, 0] - msx) / rs, (S[i, 1] - msy) / rs
        ex = ax - rt * (c * bx + s * by)
        ey = ay - rt * (-s * bx + c * by)
        r += ex * ex + ey * ey
    return OK, math.sqrt(r), rt, rs, k, n, c, s, msx, msy


@njit
def _nb_procrustes_forward(offsets, T, S):
    m = offsets.shape[0] - 1
    r = np.empty(m)
    status = np.zeros(m, dtype=np.int64)
    for j in range(m):
        st, rj = _nb_procrustes_segment(T, S, offsets[j], offsets[j + 1])[:2]
        status[j] = st
        r[j] = rj if st == OK else np.nan
    return r, status


@njit
def _nb_procrustes_backward(offsets, T, S, g_r):
    gS = np.zeros_like(S)
    for j in range(offsets.shape[0] - 1):
        lo, hi = offsets[j], offsets[j + 1]
        st, r, rt, rs, k, n, c, s, msx, msy = _nb_procrustes_segment(T, S, lo, hi)
        if st != OK or r < EPS:
            continue
        cnt = hi - lo
        mtx = mty = 0.0
        for i in range(lo, hi):
            mtx += T[i, 0]
            mty += T[i, 1]
        mtx /= cnt
        mty /= cnt
        sc = g_r[j] / r
        gc = gs = bb = 0.0
        # first pass: rotation gradient and <g_b, b>
        for i in range(lo, hi):
            ax, ay = T[i, 0] - mtx, T[i, 1] - mty
            bx, by = (S[i, 0] - msx) / rs, (S[i, 1] - msy) / rs
            gx = sc * (ax - rt * (c * bx + s * by))
            gy = sc * (ay - rt * (-s * bx + c * by))
            gc -= rt * (gx * bx + gy * by)
            gs -= rt * (gx * by - gy * bx)
            gbx = -rt * (gx * c - gy * s)
            gby = -rt * (gx * s + gy * c)
            bb += gbx * bx + gby * by
            gS[i, 0] = gbx
            gS[i, 1] = gby
        proj = gc * c + gs * s
        gcb = (gc - proj * c) / n
        gsb = (gs - proj * s) / n
        mx = my = 0.0
        for i in range(lo, hi):
            bx, by = (S[i, 0] - msx) / rs, (S[i, 1] - msy) / rs
            gx = (gS[i, 0] - bb * bx) / rs
            gy = (gS[i, 1] - bb * by) / rs
            ax, ay = T[i, 0] - mtx, T[i, 1] - mty
            na = math.sqrt(ax * ax + ay * ay)
            nbr = rs * math.sqrt(bx * bx + by * by)
            if na >= EPS and nbr >= EPS:
                ux, uy = ax / na, ay / na
                vx, vy = bx * rs / nbr, by * rs / nbr
                gvx = (gcb * ux - gsb * uy) / k
                gvy = (gcb * uy + gsb * ux) / k
                pr = gvx * vx + gvy * vy
                gx += (gvx - pr * vx) / nbr
                gy += (gvy - pr * vy) / nbr
            gS[i, 0] = gx
            gS[i, 1] = gy
            mx += gx
            my += gy
        mx /= cnt
        my /= cnt
        for i in range(lo, hi):
            gS[i, 0] -= mx
            gS[i, 1] -= my
    return gS


# ---------------------------------------------------------------------------
# dispatch

_NAMES = (
    "spmm", "edge_dot", "segment_softmax", "segment_softmax_backward",
    "gat_scores", "gat_scores_backward", "procrustes_forward", "procrustes_backward",
)
BACKENDS = {
    "numpy": {name: globals()[f"_np_{name}"] for name in _NAMES},
    "numba": {name: globals()[f"_nb_{name}"] for name in _NAMES},
}
_active = {"name": "numba" if _accel.ENABLED else "numpy"}


def backend() -> str:
    return _active["name"]


def set_backend(name: str) -> None:
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not _accel.HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _active["name"] = name


@contextlib.contextmanager
def use_backend(name: str):
    prev = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _dispatch(name):
    def call(*args):
        return BACKENDS[_active["name"]][name](*args)

    call.__name__ = name
    call.__doc__ = globals()[f"_np_{name}"].__doc__
    return call


spmm = _dispatch("spmm")
edge_dot = _dispatch("edge_dot")
segment_softmax = _dispatch("segment_softmax")
segment_softmax_backward = _dispatch("segment_softmax_backward")
gat_scores = _dispatch("gat_scores")
gat_scores_backward = _dispatch("gat_scores_backward")
procrustes_forward = _dispatch("procrustes_forward")
procrustes_backward = _dispatch("procrustes_backward")
