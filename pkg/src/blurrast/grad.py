"""Reverse pass of the blur renderer.

The backward sweep recomputes the forward per pixel (winners, weights and
coverage terms) instead of storing a tape, so memory stays proportional to
the image. Gradients land first on the screen-space keyframes and are then
pulled back through projection and trajectory onto world vertices.

Selections are frozen: the depth-test winner and the edge or vertex picked
by the closest-point search do not move under infinitesimal perturbation.
On the fast path the continuous edge parameter of the closest point still
depends on the vertices, and that dependence is differentiated.

Partial sums go to a fixed number of row chunks and are merged in order,
so results do not depend on the thread count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange

from .bary import DET_EPS, closest_point, naive_weights
from .geometry import SegmentedMotion, project_jacobian
from .raster import (BlurFrame, RenderRecord, ensure_coeffs, fast_background, fast_candidates, fast_winners,
                     frame_tiles, max_tile_count, row_filter, segment_boxes, segment_tiles, write_png)

N_CHUNKS = 16


class UnrecordedForwardError(RuntimeError):
    """backward_blur was given a frame rendered without ``record=True``."""


@dataclass
class PixelAdjoint:
    """Upstream gradients of the loss with respect to the blurred image."""

    d_rgb: np.ndarray
    d_alpha: np.ndarray

    def __post_init__(self):
        self.d_rgb = np.ascontiguousarray(self.d_rgb, dtype=np.float64)
        self.d_alpha = np.ascontiguousarray(self.d_alpha, dtype=np.float64)
        if self.d_rgb.shape != self.d_alpha.shape + (3,):
            raise ValueError(f"d_rgb {self.d_rgb.shape} does not match d_alpha {self.d_alpha.shape}")

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)))

    def scaled(self, factor):
        return PixelAdjoint(self.d_rgb * factor, self.d_alpha * factor)


@dataclass
class AdjointState:
    """Loss gradients. ``d_screen`` is per keyframe, in pixel units."""

    d_vertices: np.ndarray | None
    d_colors: np.ndarray
    d_screen: np.ndarray

    def is_finite(self):
        parts = [self.d_colors, self.d_screen]
        if self.d_vertices is not None:
            parts.append(self.d_vertices)
        return all(np.all(np.isfinite(p)) for p in parts)


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True, inline="always")
def _coeff_grads(H, ax, ay, ex, ey, g0, g1):
    """Add vertex gradients of coefficient adjoints H (3, 3) to g0, g1 (3, 2).

    H[n, k] is the adjoint of coefficient A_{n+1} of row k. Start offsets
    a = v(0) - p and motion e = v(1) - v(0) feed both keyframes.
    """
    ga = np.zeros((3, 2))
    ge = np.zeros((3, 2))
    for k in range(3):
        i = (k + 1) % 3
        j = (k + 2) % 3
        G1, G2, G3 = H[0, k], H[1, k], H[2, k]
        if G1 == 0.0 and G2 == 0.0 and G3 == 0.0:
            continue
        # cross(a, b) = a.x b.y - a.y b.x
        ga[i, 0] += G3 * ay[j] + G2 * ey[j]
        ga[i, 1] -= G3 * ax[j] + G2 * ex[j]
        ga[j, 0] -= G3 * ay[i]
        ga[j, 1] += G3 * ax[i]
        ge[j, 0] -= G2 * ay[i] + G1 * ey[i]
        ge[j, 1] += G2 * ax[i] + G1 * ex[i]
        ge[i, 0] += G2 * ay[j] + G1 * ey[j]
        ge[i, 1] -= G2 * ax[j] + G1 * ex[j]
        ga[j, 0] -= G2 * ey[i]
        ga[j, 1] += G2 * ex[i]
    for m in range(3):
        for c in range(2):
            g0[m, c] += ga[m, c] - ge[m, c]
            g1[m, c] += ge[m, c]


@njit(cache=True, inline="always")
def _add_rational(H, gw0, gw1, gw2, w0, w1, w2, den, t):
    s = gw0 * w0 + gw1 * w1 + gw2 * w2
    inv = 1.0 / den
    tt = t * t
    h0 = (gw0 - s) * inv
    h1 = (gw1 - s) * inv
    h2 = (gw2 - s) * inv
    H[0, 0] += h0 * tt
    H[0, 1] += h1 * tt
    H[0, 2] += h2 * tt
    H[1, 0] += h0 * t
    H[1, 1] += h1 * t
    H[1, 2] += h2 * t
    H[2, 0] += h0
    H[2, 1] += h1
    H[2, 2] += h2


@njit(cache=True, inline="always")
def _scatter(f, faces, g0, g1, gP0, gP1, D0, D1, want_img):
    dot = 0.0
    for m in range(3):
        vid = faces[f, m]
        for c in range(2):
            gP0[vid, c] += g0[m, c]
            gP1[vid, c] += g1[m, c]
            if want_img:
                dot += g0[m, c] * D0[vid, c] + g1[m, c] * D1[vid, c]
    return dot


@njit(cache=True, inline="always")
def _load_face(P0, P1, faces, f, u, v, ax, ay, ex, ey):
    for m in range(3):
        vid = faces[f, m]
        ax[m] = P0[vid, 0] - u
        ay[m] = P0[vid, 1] - v
        ex[m] = P1[vid, 0] - P0[vid, 0]
        ey[m] = P1[vid, 1] - P0[vid, 1]


@njit(parallel=True, cache=True)
def _fast_segment_backward(P0, P1, faces, colors, times, fb, tile_ptr, tile_idx, ts, width, height,
                           c_px, kappa, maxc, g_rgb, g_alpha, gP0, gP1, gC, D0, D1, want_img, img):
    K = times.shape[0]
    ntx = (width + ts - 1) // ts
    nch = gP0.shape[0]
    for ch in prange(nch):
        r_lo = (ch * height) // nch
        r_hi = ((ch + 1) * height) // nch
        cP0 = gP0[ch]
        cP1 = gP1[ch]
        cC = gC[ch]
        best_z = np.empty(K)
        best_f = np.empty(K, dtype=np.int64)
        best_c = np.empty(K, dtype=np.int64)
        bw = np.empty((K, 3))
        Tnz = np.empty(K)
        nzero = np.empty(K, dtype=np.int64)
        cf = np.empty(maxc, dtype=np.int64)
        ck = np.empty((maxc, 2), dtype=np.int64)
        cc = np.empty((maxc, 12))
        have = np.empty(maxc, dtype=np.bool_)
        uniq = np.empty(K, dtype=np.int64)
        # background entries of one pixel, grouped by candidate
        cap = maxc * K
        ent_c = np.empty(cap, dtype=np.int64)
        ent_k = np.empty(cap, dtype=np.int64)
        ent_e = np.empty((cap, 3), dtype=np.int64)
        ent = np.empty((cap, 10))
        H = np.zeros((3, 3))
        g0 = np.zeros((3, 2))
        g1 = np.zeros((3, 2))
        sw = np.zeros(3)
        ax = np.empty(3)
        ay = np.empty(3)
        ex = np.empty(3)
        ey = np.empty(3)
        rowlist = np.empty(maxc, dtype=np.int64)
        for row in range(r_lo, r_hi):
            v = row + 0.5
            n_row = 0
            for col in range(width):
                u = col + 0.5
                if col % ts == 0:
                    tile = (row // ts) * ntx + col // ts
                    n_row = row_filter(fb, tile_idx, tile_ptr[tile], tile_ptr[tile + 1], times, u,
                                   min(col + ts, width) - 0.5, v, c_px, rowlist)
                ga = g_alpha[row, col]
                gr0, gr1, gr2 = g_rgb[row, col, 0], g_rgb[row, col, 1], g_rgb[row, col, 2]
                want_fg = gr0 != 0.0 or gr1 != 0.0 or gr2 != 0.0
                if not want_fg and ga == 0.0:
                    continue
                n = fast_candidates(fb, rowlist, 0, n_row, times, u, v, c_px, cf, ck, have)
                fast_winners(n, cf, have, cc, fb, P0, P1, faces, times, u, v, best_z, best_f, best_c, bw)
                acc_img = 0.0
                n_bg = 0
                n_u = 0
                for k in range(K):
                    c = best_c[k]
                    if c < 0:
                        n_bg += 1
                        continue
                    seen = False
                    for q in range(n_u):
                        if uniq[q] == c:
                            seen = True
                            break
                    if not seen:
                        uniq[n_u] = c
                        n_u += 1

                # foreground: color interpolation through the rational weights
                for q in range(n_u):
                    c = uniq[q]
                    f = cf[c]
                    i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
                    gw0 = gr0 * colors[i0, 0] + gr1 * colors[i0, 1] + gr2 * colors[i0, 2]
                    gw1 = gr0 * colors[i1, 0] + gr1 * colors[i1, 1] + gr2 * colors[i1, 2]
                    gw2 = gr0 * colors[i2, 0] + gr1 * colors[i2, 1] + gr2 * colors[i2, 2]
                    H[:, :] = 0.0
                    sw[:] = 0.0
                    for k in range(K):
                        if best_c[k] != c:
                            continue
                        t = times[k]
                        w0, w1, w2 = bw[k, 0], bw[k, 1], bw[k, 2]
                        sw[0] += w0
                        sw[1] += w1
                        sw[2] += w2
                        if want_fg:
                            den = (cc[c, 9] * t + cc[c, 10]) * t + cc[c, 11]
                            _add_rational(H, gw0, gw1, gw2, w0, w1, w2, den, t)
                    for m in range(3):
                        vid = faces[f, m]
                        cC[vid, 0] += gr0 * sw[m]
                        cC[vid, 1] += gr1 * sw[m]
                        cC[vid, 2] += gr2 * sw[m]
                    if want_fg:
                        _load_face(P0, P1, faces, f, u, v, ax, ay, ex, ey)
                        g0[:, :] = 0.0
                        g1[:, :] = 0.0
                        _coeff_grads(H, ax, ay, ex, ey, g0, g1)
                        acc_img += _scatter(f, faces, g0, g1, cP0, cP1, D0, D1, want_img)

                # background: soft coverage with the endpoint closest point
                if n_bg > 0 and ga != 0.0:
                    for k in range(K):
                        Tnz[k] = 1.0
                        nzero[k] = 0
                    ne = 0
                    for c in range(n):
                        f = cf[c]
                        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
                        for k in range(ck[c, 0], ck[c, 1] + 1):
                            if best_f[k] >= 0:
                                continue
                            ensure_coeffs(c, cf, have, cc, P0, P1, faces, u, v)
                            ok, rx, ry, w0, w1, w2, den, cw0, cw1, cw2, ei, ej, ein = fast_background(
                                cc, c, times[k], u, v,
                                P0[i0, 0], P0[i0, 1], P0[i1, 0], P0[i1, 1], P0[i2, 0], P0[i2, 1],
                                P1[i0, 0], P1[i0, 1], P1[i1, 0], P1[i1, 1], P1[i2, 0], P1[i2, 1])
                            if not ok:
                                continue
                            A = math.exp(-kappa * (rx * rx + ry * ry))
                            fac = 1.0 - A
                            if fac == 0.0:
                                nzero[k] += 1
                            else:
                                Tnz[k] *= fac
                            ent_c[ne] = c
                            ent_k[ne] = k
                            ent_e[ne, 0] = ei
                            ent_e[ne, 1] = ej
                            ent_e[ne, 2] = 1 if ein else 0
                            ent[ne, 0] = rx
                            ent[ne, 1] = ry
                            ent[ne, 2] = w0
                            ent[ne, 3] = w1
                            ent[ne, 4] = w2
                            ent[ne, 5] = den
                            ent[ne, 6] = cw0
                            ent[ne, 7] = cw1
                            ent[ne, 8] = cw2
                            ent[ne, 9] = A
                            ne += 1
                    e = 0
                    while e < ne:
                        c = ent_c[e]
                        f = cf[c]
                        H[:, :] = 0.0
                        g0[:, :] = 0.0
                        g1[:, :] = 0.0
                        touched = False
                        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
                        x0, y0, x1, y1, x2, y2 = (P0[i0, 0], P0[i0, 1], P0[i1, 0], P0[i1, 1],
                                                  P0[i2, 0], P0[i2, 1])
                        X0, Y0, X1, Y1, X2, Y2 = (P1[i0, 0], P1[i0, 1], P1[i1, 0], P1[i1, 1],
                                                  P1[i2, 0], P1[i2, 1])
                        while e < ne and ent_c[e] == c:
                            k = ent_k[e]
                            A = ent[e, 9]
                            fac = 1.0 - A
                            if nzero[k] == 0:
                                excl = Tnz[k] / fac
                            elif nzero[k] == 1 and fac == 0.0:
                                excl = Tnz[k]
                            else:
                                e += 1
                                continue
                            gd = -ga * excl * kappa * A
                            if gd == 0.0:
                                e += 1
                                continue
                            touched = True
                            t = times[k]
                            s = 1.0 - t
                            rx, ry = ent[e, 0], ent[e, 1]
                            w0, w1, w2, den = ent[e, 2], ent[e, 3], ent[e, 4], ent[e, 5]
                            # distance with the closest weights held fixed
                            for m in range(3):
                                cwm = ent[e, 6 + m]
                                gx = -2.0 * gd * rx * cwm
                                gy = -2.0 * gd * ry * cwm
                                g0[m, 0] += s * gx
                                g0[m, 1] += s * gy
                                g1[m, 0] += t * gx
                                g1[m, 1] += t * gy
                            if ent_e[e, 2] == 0:
                                e += 1
                                continue
                            # the edge parameter moves with q and the keyframe edge
                            ei, ej = ent_e[e, 0], ent_e[e, 1]
                            vx = (s * x0 + t * X0, s * x1 + t * X1, s * x2 + t * X2)
                            vy = (s * y0 + t * Y0, s * y1 + t * Y1, s * y2 + t * Y2)
                            if t <= 0.5:
                                Vx = (x0, x1, x2)
                                Vy = (y0, y1, y2)
                            else:
                                Vx = (X0, X1, X2)
                                Vy = (Y0, Y1, Y2)
                            qx = w0 * Vx[0] + w1 * Vx[1] + w2 * Vx[2]
                            qy = w0 * Vy[0] + w1 * Vy[1] + w2 * Vy[2]
                            gs = -2.0 * gd * (rx * (vx[ej] - vx[ei]) + ry * (vy[ej] - vy[ei]))
                            Ex = Vx[ej] - Vx[ei]
                            Ey = Vy[ej] - Vy[ei]
                            mm = Ex * Ex + Ey * Ey
                            qix = qx - Vx[ei]
                            qiy = qy - Vy[ei]
                            c2 = 2.0 * (qix * Ex + qiy * Ey) / (mm * mm)
                            gix = gs * ((-Ex - qix) / mm + c2 * Ex)
                            giy = gs * ((-Ey - qiy) / mm + c2 * Ey)
                            gjx = gs * (qix / mm - c2 * Ex)
                            gjy = gs * (qiy / mm - c2 * Ey)
                            gqx = gs * Ex / mm
                            gqy = gs * Ey / mm
                            gX = g0 if t <= 0.5 else g1
                            gX[ei, 0] += gix
                            gX[ei, 1] += giy
                            gX[ej, 0] += gjx
                            gX[ej, 1] += gjy
                            gX[0, 0] += gqx * w0
                            gX[0, 1] += gqy * w0
                            gX[1, 0] += gqx * w1
                            gX[1, 1] += gqy * w1
                            gX[2, 0] += gqx * w2
                            gX[2, 1] += gqy * w2
                            _add_rational(H, gqx * Vx[0] + gqy * Vy[0], gqx * Vx[1] + gqy * Vy[1],
                                          gqx * Vx[2] + gqy * Vy[2], w0, w1, w2, den, t)
                            e += 1
                        if touched:
                            _load_face(P0, P1, faces, f, u, v, ax, ay, ex, ey)
                            _coeff_grads(H, ax, ay, ex, ey, g0, g1)
                            acc_img += _scatter(f, faces, g0, g1, cP0, cP1, D0, D1, want_img)
                if want_img:
                    img[row, col] += acc_img


@njit(parallel=True, cache=True)
def _naive_frame_backward(P, faces, colors, box, tile_ptr, tile_idx, ts, width, height, c_px, kappa,
                          g_rgb, g_alpha, t, gP0, gP1, gC, D, want_img, img):
    ntx = (width + ts - 1) // ts
    nch = gP0.shape[0]
    s = 1.0 - t
    for ch in prange(nch):
        r_lo = (ch * height) // nch
        r_hi = ((ch + 1) * height) // nch
        cP0 = gP0[ch]
        cP1 = gP1[ch]
        cC = gC[ch]
        for row in range(r_lo, r_hi):
            v = row + 0.5
            for col in range(width):
                u = col + 0.5
                ga = g_alpha[row, col]
                gr0, gr1, gr2 = g_rgb[row, col, 0], g_rgb[row, col, 1], g_rgb[row, col, 2]
                if ga == 0.0 and gr0 == 0.0 and gr1 == 0.0 and gr2 == 0.0:
                    continue
                tile = (row // ts) * ntx + col // ts
                best_z = np.inf
                best_f = -1
                b0 = 0.0
                b1 = 0.0
                b2 = 0.0
                bdet = 0.0
                for ii in range(tile_ptr[tile], tile_ptr[tile + 1]):
                    f = tile_idx[ii]
                    if u < box[f, 0] or u > box[f, 1] or v < box[f, 2] or v > box[f, 3]:
                        continue
                    i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
                    w0, w1, w2, det = naive_weights(P[i0, 0], P[i0, 1], P[i1, 0], P[i1, 1],
                                                    P[i2, 0], P[i2, 1], u, v)
                    if abs(det) <= DET_EPS:
                        continue
                    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                        continue
                    z = w0 * P[i0, 2] + w1 * P[i1, 2] + w2 * P[i2, 2]
                    if z < best_z:
                        best_z = z
                        best_f = f
                        b0, b1, b2, bdet = w0, w1, w2, det
                acc_img = 0.0
                if best_f >= 0:
                    f = best_f
                    i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
                    ids = (i0, i1, i2)
                    ws = (b0, b1, b2)
                    for m in range(3):
                        cC[ids[m], 0] += gr0 * ws[m]
                        cC[ids[m], 1] += gr1 * ws[m]
                        cC[ids[m], 2] += gr2 * ws[m]
                    gw = (gr0 * colors[i0, 0] + gr1 * colors[i0, 1] + gr2 * colors[i0, 2],
                          gr0 * colors[i1, 0] + gr1 * colors[i1, 1] + gr2 * colors[i1, 2],
                          gr0 * colors[i2, 0] + gr1 * colors[i2, 1] + gr2 * colors[i2, 2])
                    sgw = gw[0] * b0 + gw[1] * b1 + gw[2] * b2
                    for k in range(3):
                        h = (gw[k] - sgw) / bdet
                        if h == 0.0:
                            continue
                        i = ids[(k + 1) % 3]
                        j = ids[(k + 2) % 3]
                        aix, aiy = P[i, 0] - u, P[i, 1] - v
                        ajx, ajy = P[j, 0] - u, P[j, 1] - v
                        # h * d cross(a_i, a_j)
                        cP0[i, 0] += s * h * ajy
                        cP0[i, 1] -= s * h * ajx
                        cP0[j, 0] -= s * h * aiy
                        cP0[j, 1] += s * h * aix
                        cP1[i, 0] += t * h * ajy
                        cP1[i, 1] -= t * h * ajx
                        cP1[j, 0] -= t * h * aiy
                        cP1[j, 1] += t * h * aix
                        if want_img:
                            acc_img += h * (ajy * D[i, 0] - ajx * D[i, 1] - aiy * D[j, 0] + aix * D[j, 1])
                elif ga != 0.0:
                    Tnz = 1.0
                    nzero = 0
                    for sweep in range(2):
                        for ii in range(tile_ptr[tile], tile_ptr[tile + 1]):
                            f = tile_idx[ii]
                            if (u < box[f, 0] - c_px or u > box[f, 1] + c_px
                                    or v < box[f, 2] - c_px or v > box[f, 3] + c_px):
                                continue
                            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
                            x0, y0, x1, y1, x2, y2 = P[i0, 0], P[i0, 1], P[i1, 0], P[i1, 1], P[i2, 0], P[i2, 1]
                            det = x0 * (y1 - y2) - x1 * (y0 - y2) + x2 * (y0 - y1)
                            if abs(det) <= DET_EPS:
                                continue
                            cw0, cw1, cw2, ei, ej, es, ein = closest_point(u, v, x0, y0, x1, y1, x2, y2)
                            rx = u - (cw0 * x0 + cw1 * x1 + cw2 * x2)
                            ry = v - (cw0 * y0 + cw1 * y1 + cw2 * y2)
                            A = math.exp(-kappa * (rx * rx + ry * ry))
                            fac = 1.0 - A
                            if sweep == 0:
                                if fac == 0.0:
                                    nzero += 1
                                else:
                                    Tnz *= fac
                                continue
                            if nzero == 0:
                                excl = Tnz / fac
                            elif nzero == 1 and fac == 0.0:
                                excl = Tnz
                            else:
                                continue
                            gd = -ga * excl * kappa * A
                            ids = (i0, i1, i2)
                            cws = (cw0, cw1, cw2)
                            for m in range(3):
                                if cws[m] == 0.0:
                                    continue
                                gx = -2.0 * gd * rx * cws[m]
                                gy = -2.0 * gd * ry * cws[m]
                                vid = ids[m]
                                cP0[vid, 0] += s * gx
                                cP0[vid, 1] += s * gy
                                cP1[vid, 0] += t * gx
                                cP1[vid, 1] += t * gy
                                if want_img:
                                    acc_img += gx * D[vid, 0] + gy * D[vid, 1]
                if want_img:
                    img[row, col] += acc_img


# ---------------------------------------------------------------------------
# public API


def _record(frame_or_record):
    if isinstance(frame_or_record, RenderRecord):
        return frame_or_record
    rec = getattr(frame_or_record, "record", None)
    if rec is None:
        raise UnrecordedForwardError("render_blur must be called with record=True before backward_blur")
    return rec


def _check_adjoint(adj: PixelAdjoint, config):
    if adj.d_alpha.shape != (config.height, config.width):
        raise ValueError(f"adjoint shape {adj.d_alpha.shape} does not match image "
                         f"{(config.height, config.width)}")


def screen_backward(record: RenderRecord, adj: PixelAdjoint, direction=None):
    """Gradients on keyframe pixel positions and vertex colors.

    Returns (d_screen (S+1, V, 2), d_colors (V, 3), image). With a
    ``direction`` of shape (S+1, V, 2), ``image`` holds each pixel's
    derivative along that screen-space perturbation; otherwise it is None.
    """
    sm = record.segmotion
    config = record.config
    _check_adjoint(adj, config)
    nV = sm.keyframes.shape[1]
    S = sm.n_segments
    n = sm.total_samples
    g_rgb = adj.d_rgb / n
    g_alpha = adj.d_alpha / n
    times = np.ascontiguousarray(sm.sample_times(), dtype=np.float64)
    d_screen = np.zeros((S + 1, nV, 2))
    d_colors = np.zeros((nV, 3))
    want_img = direction is not None
    img = np.zeros((config.height, config.width))
    if want_img:
        direction = np.ascontiguousarray(direction, dtype=np.float64)
        if direction.shape != (S + 1, nV, 2):
            raise ValueError(f"direction must have shape {(S + 1, nV, 2)}")
    else:
        direction = np.zeros((S + 1, 1, 2))
    faces = sm.faces
    if len(faces) == 0:
        return d_screen, d_colors, (img if want_img else None)
    for seg in range(S):
        gP0 = np.zeros((N_CHUNKS, nV, 2))
        gP1 = np.zeros((N_CHUNKS, nV, 2))
        gC = np.zeros((N_CHUNKS, nV, 3))
        P0 = sm.keyframes[seg]
        P1 = sm.keyframes[seg + 1]
        if record.solver == "fast":
            fb = segment_boxes(P0, P1, faces)
            ptr, idx = segment_tiles(fb, config)
            _fast_segment_backward(P0, P1, faces, record.colors, times, fb, ptr, idx, config.tile_size,
                                   config.width, config.height, config.cutoff_px, config.kappa,
                                   max_tile_count(ptr), g_rgb, g_alpha, gP0, gP1, gC, direction[seg], direction[seg + 1],
                                   want_img, img)
        else:
            for t in times:
                P = np.ascontiguousarray(sm.interpolate(seg, t))
                box, ptr, idx = frame_tiles(P, faces, config)
                Dt = (1.0 - t) * direction[seg] + t * direction[seg + 1]
                _naive_frame_backward(P, faces, record.colors, box, ptr, idx, config.tile_size,
                                      config.width, config.height, config.cutoff_px, config.kappa,
                                      g_rgb, g_alpha, float(t), gP0, gP1, gC,
                                      np.ascontiguousarray(Dt), want_img, img)
        # ordered merge of the chunk partials
        for c in range(N_CHUNKS):
            d_screen[seg] += gP0[c]
            d_screen[seg + 1] += gP1[c]
            d_colors += gC[c]
    return d_screen, d_colors, (img if want_img else None)


def world_pullback(sm: SegmentedMotion, d_screen):
    """Map keyframe pixel gradients back to the template's world vertices."""
    if sm.world is None or sm.camera is None or sm.trajectory is None:
        return None
    out = np.zeros((sm.keyframes.shape[1], 3))
    for i, t in enumerate(sm.times):
        R, _ = sm.trajectory.affine(t)
        J = project_jacobian(sm.world[i], sm.camera)
        g_pose = np.einsum("nij,ni->nj", J, d_screen[i])
        out += g_pose @ R
    return out


def backward_blur(frame_or_record, adj: PixelAdjoint) -> AdjointState:
    """Gradients of a loss whose image adjoint is ``adj``."""
    rec = _record(frame_or_record)
    d_screen, d_colors, _ = screen_backward(rec, adj)
    return AdjointState(world_pullback(rec.segmotion, d_screen), d_colors, d_screen)


def world_direction(sm: SegmentedMotion, direction):
    """Screen-space keyframe velocities of a world-space vertex perturbation."""
    direction = np.broadcast_to(np.asarray(direction, dtype=np.float64), sm.world.shape[1:])
    out = np.empty((sm.n_segments + 1, sm.keyframes.shape[1], 2))
    for i, t in enumerate(sm.times):
        R, _ = sm.trajectory.affine(t)
        J = project_jacobian(sm.world[i], sm.camera)
        out[i] = np.einsum("nij,nj->ni", J, direction @ R.T)
    return out


# ---------------------------------------------------------------------------
# checks and visualization


def mean_alpha_loss(frame: BlurFrame):
    """Mean coverage over the image, with its pixel adjoint."""
    n = frame.alpha.size
    adj = PixelAdjoint(np.zeros(frame.rgb.shape), np.full(frame.alpha.shape, 1.0 / n))
    return float(frame.alpha.mean()), adj


@dataclass
class FDReport:
    max_rel_err: float
    worst_index: tuple | None
    n_checked: int
    n_skipped: int
    n_flat: int = 0
    threshold: float = 1e-3

    @property
    def passed(self):
        return self.max_rel_err < self.threshold

    @property
    def skipped_fraction(self):
        total = self.n_checked + self.n_skipped + self.n_flat
        return self.n_skipped / total if total else 0.0

    def to_dict(self):
        return {"max_rel_err": self.max_rel_err,
                "worst_index": list(self.worst_index) if self.worst_index is not None else None,
                "n_checked": self.n_checked, "n_skipped": self.n_skipped, "n_flat": self.n_flat}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return Path(path)


def finite_diff_check(scene, loss_fn=mean_alpha_loss, h=1e-3, threshold=1e-3, wrt="vertices",
                      flat_tol=1e-6, disagreement=0.5) -> FDReport:
    """Compare analytic gradients with central differences, one coordinate at a time.

    A coordinate whose one-sided differences disagree by more than
    ``disagreement`` of their magnitude straddles a kink (depth-test flip,
    cutoff edge, closest-feature switch) and is skipped. Coordinates where
    both gradients are below ``flat_tol`` are counted as flat.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    if wrt not in ("vertices", "colors"):
        raise ValueError("wrt must be 'vertices' or 'colors'")
    V0 = scene.mesh.vertices.copy()
    C0 = scene.mesh.colors.copy()

    def evaluate(V, C, record=False):
        frame = scene.render(vertices=V, colors=C, record=record)
        value, adj = loss_fn(frame)
        return value, adj, frame

    f0, adj, frame = evaluate(V0, C0, record=True)
    state = backward_blur(frame, adj)
    analytic = state.d_vertices if wrt == "vertices" else state.d_colors
    base = V0 if wrt == "vertices" else C0
    worst, worst_idx = 0.0, None
    n_checked = n_skipped = n_flat = 0
    for idx in np.ndindex(base.shape):
        X = base.copy()
        X[idx] += h
        fp = evaluate(X, C0)[0] if wrt == "vertices" else evaluate(V0, X)[0]
        X[idx] -= 2 * h
        fm = evaluate(X, C0)[0] if wrt == "vertices" else evaluate(V0, X)[0]
        num = (fp - fm) / (2 * h)
        a = float(analytic[idx])
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if max(abs(a), abs(num)) <= flat_tol:
            n_flat += 1
            continue
        if abs(fwd - bwd) > disagreement * max(abs(fwd), abs(bwd)):
            n_skipped += 1
            continue
        rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
        n_checked += 1
        if rel > worst or worst_idx is None:
            worst, worst_idx = rel, tuple(int(i) for i in idx)
    return FDReport(worst, worst_idx, n_checked, n_skipped, n_flat, threshold)


@dataclass
class GradImage:
    values: np.ndarray
    rgb: np.ndarray

    def write_png(self, path):
        return write_png(path, self.rgb)


def grad_image(scene, axis=0, vertex_mask=None, pixel_mask=None, channel="alpha") -> GradImage:
    """Per-pixel derivative of each selected pixel with respect to a joint shift.

    Every selected vertex moves along world ``axis`` together; ``values``
    holds d(pixel) / d(shift) and ``rgb`` its viridis rendering, centered on
    zero. ``channel`` is "alpha" or "rgb" (sum of the three channels).
    """
    from .colormap import apply_colormap, signed_to_unit
    if channel not in ("alpha", "rgb"):
        raise ValueError("channel must be 'alpha' or 'rgb'")
    frame = scene.render(record=True)
    sm = frame.record.segmotion
    H, W = frame.shape
    mask = np.ones((H, W)) if pixel_mask is None else np.asarray(pixel_mask, dtype=np.float64)
    adj = PixelAdjoint.zeros(H, W)
    if channel == "alpha":
        adj.d_alpha[:] = mask
    else:
        adj.d_rgb[:] = mask[..., None]
    dirn = np.zeros((sm.keyframes.shape[1], 3))
    sel = np.ones(len(dirn), bool) if vertex_mask is None else np.asarray(vertex_mask, bool)
    dirn[sel, axis] = 1.0
    _, _, img = screen_backward(frame.record, adj, direction=world_direction(sm, dirn))
    return GradImage(img, apply_colormap(signed_to_unit(img)))
