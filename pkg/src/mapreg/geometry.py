"""Planar similarity transforms and the angle-averaging 2D Procrustes solver.

Rotation convention: ``R(theta) = [[cos, sin], [-sin, cos]]`` acting on column
vectors, i.e. a clockwise turn by ``theta``.  Point sets are ``(N, 2)`` arrays
with one point per row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCloud, LengthMismatch, ValidationError

EPS = 1e-12


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s, c]])


@dataclass(frozen=True)
class Similarity2D:
    theta: float = 0.0
    scale: float = 1.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    @property
    def R(self) -> np.ndarray:
        return rotation(self.theta)

    @property
    def matrix(self) -> np.ndarray:
        """The linear part ``scale * R``."""
        return self.scale * self.R

    def compose(self, other: "Similarity2D") -> "Similarity2D":
        """Return ``self o other`` (apply ``other`` first)."""
        t = self.matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        return Similarity2D(self.theta + other.theta, self.scale * other.scale, tuple(t))

    def inverse(self) -> "Similarity2D":
        inv_scale = 1.0 / self.scale
        t = -inv_scale * (rotation(-self.theta) @ np.asarray(self.translation))
        return Similarity2D(-self.theta, inv_scale, tuple(t))


def as_points(p, name: str = "points") -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValidationError(f"{name} must have shape (N, 2), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValidationError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite coordinates")
    return arr


def apply_similarity(t: Similarity2D, points) -> np.ndarray:
    pts = as_points(points)
    return pts @ t.matrix.T + np.asarray(t.translation)


@dataclass
class _Fit:
    # intermediates kept for the backward pass
    A: np.ndarray        # centered target
    B: np.ndarray        # centered source
    rho_t: float
    rho_s: float
    u: np.ndarray        # target unit directions (valid rows only meaningful)
    v: np.ndarray        # source unit directions
    nb: np.ndarray       # per-point source norms
    valid: np.ndarray
    sc_bar: np.ndarray   # averaged (cos, sin) before renormalisation
    cos: float
    sin: float
    mu_t: np.ndarray
    mu_s: np.ndarray


def _fit(target, source) -> _Fit:
    T = as_points(target, "target")
    S = as_points(source, "source")
    if T.shape[0] != S.shape[0]:
        raise LengthMismatch(f"target has {T.shape[0]} points, source has {S.shape[0]}")
    if T.shape[0] < 2:
        raise DegenerateCloud("need at least two points to estimate a similarity")
    mu_t, mu_s = T.mean(axis=0), S.mean(axis=0)
    A, B = T - mu_t, S - mu_s
    rho_t, rho_s = np.linalg.norm(A), np.linalg.norm(B)
    if rho_t < EPS or rho_s < EPS:
        raise DegenerateCloud("all points of a cloud coincide")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    valid = (na >= EPS) & (nb >= EPS)
    if not valid.any():
        raise DegenerateCloud("no point has a defined angle about its centroid")
    u = np.zeros_like(A)
    v = np.zeros_like(B)
    u[valid] = A[valid] / na[valid, None]
    v[valid] = B[valid] / nb[valid, None]
    k = valid.sum()
    # cos/sin of (source angle - target angle), averaged over matched points
    c_bar = np.sum(v[:, 0] * u[:, 0] + v[:, 1] * u[:, 1]) / k
    s_bar = np.sum(v[:, 1] * u[:, 0] - v[:, 0] * u[:, 1]) / k
    n = np.hypot(c_bar, s_bar)
    if n < EPS:
        raise DegenerateCloud("matched point angles cancel out; rotation undefined")
    return _Fit(A, B, rho_t, rho_s, u, v, nb, valid, np.array([c_bar, s_bar]),
                c_bar / n, s_bar / n, mu_t, mu_s)


def align_2d(target, source) -> Similarity2D:
    """Similarity mapping ``source`` onto ``target`` (row ``n`` of each is the same object).

    Both clouds are centred and normalised by their Frobenius radius, the rotation
    is the average angular offset between matched points, and scale/translation
    follow from the radii and centroids.
    """
    f = _fit(target, source)
    theta = float(np.arctan2(f.sin, f.cos))
    lam = f.rho_t / f.rho_s
    R = np.array([[f.cos, f.sin], [-f.sin, f.cos]])
    tau = f.mu_t - lam * (R @ f.mu_s)
    return Similarity2D(theta, float(lam), tuple(tau))


def alignment_residual(target, source) -> float:
    """Frobenius norm of ``target - align_2d(target, source)(source)``."""
    f = _fit(target, source)
    R = np.array([[f.cos, f.sin], [-f.sin, f.cos]])
    E = f.A - (f.rho_t / f.rho_s) * f.B @ R.T
    return float(np.linalg.norm(E))


def align_2d_grad(target, source, upstream: float = 1.0) -> tuple[float, np.ndarray]:
    """Residual of the alignment and its exact gradient w.r.t. ``source``.

    The rotation, scale and translation are differentiated as functions of the
    source points.  At a zero residual the gradient is defined as zero.
    """
    f = _fit(target, source)
    R = np.array([[f.cos, f.sin], [-f.sin, f.cos]])
    b = f.B / f.rho_s
    E = f.A - f.rho_t * b @ R.T
    r = float(np.linalg.norm(E))
    if r < EPS:
        return r, np.zeros_like(f.B)
    gE = (upstream / r) * E
    g_b = -f.rho_t * gE @ R
    g_R = -f.rho_t * gE.T @ b
    g_cs = np.array([g_R[0, 0] + g_R[1, 1], g_R[0, 1] - g_R[1, 0]])
    w = np.array([f.cos, f.sin])
    g_bar = (g_cs - (g_cs @ w) * w) / np.hypot(*f.sc_bar)
    k = f.valid.sum()
    u = f.u
    g_v = (g_bar[0] * u + g_bar[1] * np.column_stack([-u[:, 1], u[:, 0]])) / k
    g_B = np.zeros_like(f.B)
    vv = f.valid
    proj = np.sum(g_v[vv] * f.v[vv], axis=1, keepdims=True)
    g_B[vv] = (g_v[vv] - proj * f.v[vv]) / f.nb[vv, None]
    g_B += (g_b - np.sum(g_b * b) * b) / f.rho_s
    return r, g_B - g_B.mean(axis=0)
