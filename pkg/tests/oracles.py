"""Slow, independent reference computations used only by the tests."""
import itertools
import math

import numpy as np


def rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


def grid_align(target, source, step=1e-4, refine=True):
    """Brute-force angle search for the unit-vector (angle-averaging) alignment.

    Maximises sum_l <t_l/|t_l|, R(theta) s_l/|s_l|> over a theta grid, then
    polishes with one parabolic step.  Scale is the ratio of cloud radii and
    the translation maps the source centroid onto the target centroid.
    """
    T = np.asarray(target, float)
    S = np.asarray(source, float)
    mt, ms = T.mean(0), S.mean(0)
    Tc, Sc = T - mt, S - ms
    nt, ns = np.linalg.norm(Tc, axis=1), np.linalg.norm(Sc, axis=1)
    ok = (nt > 1e-12) & (ns > 1e-12)
    U = Tc[ok] / nt[ok, None]
    V = Sc[ok] / ns[ok, None]
    thetas = np.arange(-np.pi, np.pi, step)
    c, s = np.cos(thetas), np.sin(thetas)
    # <u, R v> with R = [[c, s], [-s, c]]
    a = np.sum(U[:, 0] * V[:, 0] + U[:, 1] * V[:, 1])
    b = np.sum(U[:, 0] * V[:, 1] - U[:, 1] * V[:, 0])
    f = a * c + b * s
    k = int(np.argmax(f))
    theta = thetas[k]
    if refine:
        f0, f1, f2 = f[k - 1], f[k], f[(k + 1) % len(f)]
        denom = f0 - 2 * f1 + f2
        if denom != 0:
            theta += 0.5 * step * (f0 - f2) / denom
    lam = np.linalg.norm(Tc) / np.linalg.norm(Sc)
    tau = mt - lam * rot(theta) @ ms
    return theta, lam, tau


def grid_residual(target, source, **kw):
    theta, lam, tau = grid_align(target, source, **kw)
    P = np.asarray(source, float) @ (lam * rot(theta)).T + tau
    return float(np.linalg.norm(np.asarray(target, float) - P))


def dense_gcn(A, H, theta):
    n = A.shape[0]
    Ahat = A + np.eye(n)
    d = Ahat.sum(1)
    Dm = np.diag(1.0 / np.sqrt(d))
    return Dm @ Ahat @ Dm @ H @ theta


def dense_gat(A, H, w_dst, w_src, att, theta, slope=0.2):
    n = A.shape[0]
    out = np.zeros((n, theta.shape[1]))
    alpha = np.zeros((n, n))
    for u in range(n):
        nbrs = [v for v in range(n) if v == u or A[u, v]]
        scores = []
        for v in nbrs:
            z = H[u] @ w_dst + H[v] @ w_src
            z = np.where(z > 0, z, slope * z)
            scores.append(att @ z)
        scores = np.array(scores)
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        for wv, v in zip(w, nbrs):
            alpha[u, v] = wv
            out[u] += wv * (H[v] @ theta)
    return out, alpha


def enumerate_edges(maps, matching):
    """Same-map and cross-map edges by looping over every node pair."""
    nodes = []
    for m, lm in enumerate(maps):
        nodes.append((m, "cam", -1, -1))
        for k in range(len(lm)):
            nodes.append((m, "det", int(lm.classes[k]), int(lm.gt_object_id[k])))
    same, cross = set(), set()
    for i, j in itertools.combinations(range(len(nodes)), 2):
        a, b = nodes[i], nodes[j]
        if a[0] == b[0]:
            same.add((i, j))
        elif a[1] == "det" and b[1] == "det":
            key = 2 if matching == "class_based" else 3
            if a[key] == b[key] and a[key] >= 0:
                cross.add((i, j))
    return same, cross


def central_fd(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def fd_with_noise(f, x, h=1e-6, m=6):
    """Central differences plus the oracle's own error level along each coordinate.

    ``f`` is sampled on a difference table of ``m + 1`` points spaced ``h``
    apart around each coordinate; the middle three give the central
    difference, and the k >= 3 differences estimate the noise at that same
    step (rounding and higher-order curvature alike).  ``f`` may return a
    scalar or a vector; results have shape ``x.shape + output.shape``.
    """
    x = np.array(x, dtype=float)
    flat = x.ravel()
    grads, noises = [], []
    for i in range(flat.size):
        vals = []
        for j in range(m + 1):
            y = flat.copy()
            y[i] += (j - m // 2) * h
            vals.append(np.asarray(f(y.reshape(x.shape)), dtype=float))
        vals = np.array(vals)
        grads.append((vals[m // 2 + 1] - vals[m // 2 - 1]) / (2 * h))
        sigmas = []
        for k in range(1, m + 1):
            vals = np.diff(vals, axis=0)
            if k >= 3:
                gamma = math.factorial(k) ** 2 / math.factorial(2 * k)
                sigmas.append(np.sqrt(gamma * np.mean(vals ** 2, axis=0)))
        noises.append(np.max(sigmas, axis=0))
    shape = x.shape + np.shape(grads[0])
    return np.reshape(grads, shape), np.reshape(noises, shape)


def fd_rel_error(analytic, numeric, fval, h=1e-6, rtol=1e-4, noise=0.0):
    """Relative error with an absolute floor at the finite-difference noise level.

    Central differences of a function whose values carry rounding noise sigma
    are uncertain by about sigma/h.  The floor assumes sigma is at least
    2.5*eps*|f|, or the measured ``noise`` (see :func:`fd_with_noise`) when larger,
    and allows four times that uncertainty before the relative test applies.
    """
    sigma = np.maximum(2.5 * np.finfo(float).eps * max(1.0, abs(fval)), noise)
    floor = 4 * sigma / (h * rtol)
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
