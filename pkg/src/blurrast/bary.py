"""Barycentric solvers: per-frame linear solve, rational-quadratic fast path,
and closest-point weights for pixels outside a triangle.

Triangles are 3x3 matrices whose columns are homogeneous screen points
(x, y, 1). Under linear vertex motion between a start matrix F0 and an end
matrix F1 the weights of a fixed pixel p are

    w(t) = (A1 t^2 + A2 t + A3) / (a1 t^2 + a2 t + a3)

where the numerator row k is the 2D cross product of the two other vertices
taken relative to p, and the denominator is det F(t).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .validation import check_triangle_matrix

DET_EPS = 1e-10


class DegenerateTriangleError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# scalar kernels (shared with the rasterizer)


@njit(cache=True, inline="always")
def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


@njit(cache=True)
def naive_weights(x0, y0, x1, y1, x2, y2, u, v):
    """Solve F w = p through the adjugate; returns (w0, w1, w2, det)."""
    det = x0 * (y1 - y2) - x1 * (y0 - y2) + x2 * (y0 - y1)
    if abs(det) <= DET_EPS:
        return 0.0, 0.0, 0.0, det
    n0 = (y1 - y2) * u + (x2 - x1) * v + (x1 * y2 - x2 * y1)
    n1 = (y2 - y0) * u + (x0 - x2) * v + (x2 * y0 - x0 * y2)
    n2 = (y0 - y1) * u + (x1 - x0) * v + (x0 * y1 - x1 * y0)
    inv = 1.0 / det
    return n0 * inv, n1 * inv, n2 * inv, det


@njit(cache=True)
def rational_coeffs(x0, y0, x1, y1, x2, y2, X0, Y0, X1, Y1, X2, Y2, u, v):
    """Coefficients for start vertices (x, y) and end vertices (X, Y).

    Returns (A1_0, A1_1, A1_2, A2_0, A2_1, A2_2, A3_0, A3_1, A3_2, a1, a2, a3).
    """
    ax0, ay0 = x0 - u, y0 - v
    ax1, ay1 = x1 - u, y1 - v
    ax2, ay2 = x2 - u, y2 - v
    ex0, ey0 = X0 - x0, Y0 - y0
    ex1, ey1 = X1 - x1, Y1 - y1
    ex2, ey2 = X2 - x2, Y2 - y2
    # row k pairs vertices (1,2), (2,0), (0,1)
    c10 = _cross(ex1, ey1, ex2, ey2)
    c11 = _cross(ex2, ey2, ex0, ey0)
    c12 = _cross(ex0, ey0, ex1, ey1)
    c20 = _cross(ax1, ay1, ex2, ey2) + _cross(ex1, ey1, ax2, ay2)
    c21 = _cross(ax2, ay2, ex0, ey0) + _cross(ex2, ey2, ax0, ay0)
    c22 = _cross(ax0, ay0, ex1, ey1) + _cross(ex0, ey0, ax1, ay1)
    c30 = _cross(ax1, ay1, ax2, ay2)
    c31 = _cross(ax2, ay2, ax0, ay0)
    c32 = _cross(ax0, ay0, ax1, ay1)
    return (c10, c11, c12, c20, c21, c22, c30, c31, c32,
            c10 + c11 + c12, c20 + c21 + c22, c30 + c31 + c32)


@njit(cache=True)
def closest_point(qx, qy, x0, y0, x1, y1, x2, y2):
    """Closest point of the triangle to an exterior point q.

    Scans the edges (0,1), (1,2), (2,0) and keeps the first minimum. Returns
    (w0, w1, w2, i, j, s, interior) where the winning edge is (i, j) with
    parameter s, and ``interior`` is True when 0 < s < 1 (not clamped to a
    vertex).
    """
    best = np.inf
    bi, bj, bs = 0, 1, 0.0
    binterior = False
    for e in range(3):
        if e == 0:
            ix, iy, jx, jy, i, j = x0, y0, x1, y1, 0, 1
        elif e == 1:
            ix, iy, jx, jy, i, j = x1, y1, x2, y2, 1, 2
        else:
            ix, iy, jx, jy, i, j = x2, y2, x0, y0, 2, 0
        ex, ey = jx - ix, jy - iy
        m = ex * ex + ey * ey
        interior = False
        if m > 0.0:
            s = ((qx - ix) * ex + (qy - iy) * ey) / m
            if s <= 0.0:
                s = 0.0
            elif s >= 1.0:
                s = 1.0
            else:
                interior = True
        else:
            s = 0.0
        px = ix + s * ex
        py = iy + s * ey
        d = (qx - px) * (qx - px) + (qy - py) * (qy - py)
        if d < best:
            best = d
            bi, bj, bs, binterior = i, j, s, interior
    w0 = 0.0
    w1 = 0.0
    w2 = 0.0
    wi = 1.0 - bs
    if bi == 0:
        w0 = wi
    elif bi == 1:
        w1 = wi
    else:
        w2 = wi
    if bj == 0:
        w0 += bs
    elif bj == 1:
        w1 += bs
    else:
        w2 += bs
    return w0, w1, w2, bi, bj, bs, binterior


# ---------------------------------------------------------------------------
# public API


@dataclass(frozen=True)
class BaryCoeffs:
    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray
    a1: float
    a2: float
    a3: float

    def denominator(self, t):
        return (self.a1 * t + self.a2) * t + self.a3

    def numerator(self, t):
        return (self.A1 * t + self.A2) * t + self.A3


@dataclass(frozen=True)
class TrianglePair:
    """Start and end keyframe of one face within one segment."""

    F0: np.ndarray
    F1: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "F0", check_triangle_matrix(self.F0))
        object.__setattr__(self, "F1", check_triangle_matrix(self.F1))

    @classmethod
    def from_points(cls, start, end):
        """Build from two (3, 2) arrays of vertex pixel positions."""
        return cls(triangle_matrix(start), triangle_matrix(end))

    def at(self, t):
        return (1.0 - t) * self.F0 + t * self.F1


def triangle_matrix(points):
    P = np.asarray(points, dtype=np.float64).reshape(3, 2)
    return np.vstack([P[:, 0], P[:, 1], np.ones(3)])


def _pixel(p):
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size == 3:
        if p[2] != 1.0:
            raise ValueError("homogeneous pixel must end in 1")
        return p[0], p[1]
    if p.size == 2:
        return p[0], p[1]
    raise ValueError("pixel must be (u, v) or (u, v, 1)")


def naive_bary(F, p):
    """Weights of pixel p for one triangle by direct solve of F w = p."""
    F = check_triangle_matrix(F)
    u, v = _pixel(p)
    w0, w1, w2, det = naive_weights(F[0, 0], F[1, 0], F[0, 1], F[1, 1], F[0, 2], F[1, 2], u, v)
    if abs(det) <= DET_EPS:
        raise DegenerateTriangleError(f"|det| = {abs(det):.3g} <= {DET_EPS}")
    return np.array([w0, w1, w2])


def precompute_coeffs(pair: TrianglePair, p) -> BaryCoeffs:
    u, v = _pixel(p)
    a, b = pair.F0, pair.F1
    c = rational_coeffs(a[0, 0], a[1, 0], a[0, 1], a[1, 1], a[0, 2], a[1, 2],
                        b[0, 0], b[1, 0], b[0, 1], b[1, 1], b[0, 2], b[1, 2], u, v)
    return BaryCoeffs(np.array(c[0:3]), np.array(c[3:6]), np.array(c[6:9]), c[9], c[10], c[11])


def eval_bary(coeffs: BaryCoeffs, t):
    """Weights at time t from precomputed coefficients."""
    den = coeffs.denominator(t)
    if abs(den) <= DET_EPS:
        raise DegenerateTriangleError(f"triangle is degenerate at t={t}")
    return coeffs.numerator(t) / den


def closest_weights(F, w):
    """Clamp weights to the triangle: the weights of the closest point to F w."""
    F = check_triangle_matrix(F)
    w = np.asarray(w, dtype=np.float64).ravel()
    det = np.linalg.det(F)
    if abs(det) <= DET_EPS:
        raise DegenerateTriangleError(f"|det| = {abs(det):.3g} <= {DET_EPS}")
    if np.all(w >= 0.0) and np.all(w <= 1.0):
        return w.copy()
    q = F @ w
    r = closest_point(q[0], q[1], F[0, 0], F[1, 0], F[0, 1], F[1, 1], F[0, 2], F[1, 2])
    return np.array(r[:3])


def endpoint_select(t):
    """Keyframe used for closest-point selection: 0 up to t = 0.5, else 1."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return 0 if t <= 0.5 else 1
