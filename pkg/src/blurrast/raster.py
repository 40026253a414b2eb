"""Soft rasterization of time samples and their accumulation into a blurred
RGBA image.

A pixel covered by some face at a sample takes the interpolated color of
the nearest covering face and alpha 1. An uncovered pixel has rgb 0 and
alpha 1 - prod_j (1 - exp(-d_j / delta)), where d_j is the squared distance
to face j in normalized device units.

Two paths produce the same image:

* ``fast`` works one segment at a time. Per (pixel, face) it builds the
  rational-quadratic weight coefficients once and evaluates them at every
  sample. Closest points for uncovered pixels are taken on the nearer
  keyframe triangle.
* ``naive`` renders every sample as an independent static frame, re-solving
  the weights per frame and using exact closest points.

Per-pixel accumulation is segment-major, sample-minor in float64, so output
does not depend on the thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .bary import DET_EPS, TrianglePair, closest_point, naive_weights, rational_coeffs, endpoint_select
from .geometry import SegmentedMotion, sample_times
from .image_io import write_png, write_rfi  # noqa: F401  re-exported writers

KERNEL_FLOOR = 1e-7


@dataclass
class RasterConfig:
    """Image size and soft-coverage settings.

    ``delta`` is in squared normalized units, where the image width spans
    [-1, 1]. Faces farther than ``sqrt(delta * ln 1e7)`` from a pixel are
    culled unless ``use_cutoff`` is False.
    """

    width: int = 128
    height: int = 128
    delta: float = 1e-4
    use_cutoff: bool = True
    tile_size: int = 8

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be positive")
        self.width, self.height = int(self.width), int(self.height)

    @classmethod
    def for_camera(cls, camera, **kw):
        return cls(width=camera.width, height=camera.height, **kw)

    @property
    def cutoff(self):
        return math.sqrt(self.delta * math.log(1.0 / KERNEL_FLOOR)) if self.use_cutoff else math.inf

    @property
    def cutoff_px(self):
        return self.cutoff * self.width / 2.0

    @property
    def kappa(self):
        """Scale turning squared pixel distance into the kernel exponent."""
        return 4.0 / (self.width * self.width * self.delta)


@dataclass
class FrameSample:
    rgb: np.ndarray
    alpha: np.ndarray
    zchosen: np.ndarray


@dataclass
class RenderRecord:
    """What the backward pass needs to recompute a forward render."""

    segmotion: SegmentedMotion
    colors: np.ndarray
    config: RasterConfig
    solver: str


@dataclass
class BlurFrame:
    """Mean of all rendered samples. ``rgb`` is premultiplied by coverage."""

    rgb: np.ndarray
    alpha: np.ndarray
    n_segments: int = 1
    samples_per_segment: int = 1
    record: RenderRecord | None = field(default=None, repr=False)

    @property
    def total_samples(self):
        return self.n_segments * self.samples_per_segment

    @property
    def shape(self):
        return self.alpha.shape

    def rgba(self):
        return np.concatenate([self.rgb, self.alpha[..., None]], axis=-1)

    @classmethod
    def from_rgba(cls, rgba, **kw):
        rgba = np.asarray(rgba, dtype=np.float64)
        return cls(rgba[..., :3].copy(), rgba[..., 3].copy(), **kw)


# ---------------------------------------------------------------------------
# binning and culling helpers


@njit(cache=True)
def bin_faces(xmin, xmax, ymin, ymax, width, height, ts):
    """CSR lists of faces per ts x ts pixel tile, in ascending face order."""
    ntx = (width + ts - 1) // ts
    nty = (height + ts - 1) // ts
    nf = xmin.shape[0]
    rng = np.full((nf, 4), -1, dtype=np.int64)
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for f in range(nf):
        lo = xmin[f] - 0.5
        hi = xmax[f] - 0.5
        lo_y = ymin[f] - 0.5
        hi_y = ymax[f] - 0.5
        if hi < 0.0 or lo > width - 1 or hi_y < 0.0 or lo_y > height - 1:
            continue
        c0 = 0 if lo <= 0.0 else int(math.ceil(lo))
        c1 = width - 1 if hi >= width - 1 else int(math.floor(hi))
        r0 = 0 if lo_y <= 0.0 else int(math.ceil(lo_y))
        r1 = height - 1 if hi_y >= height - 1 else int(math.floor(hi_y))
        if c0 > c1 or r0 > r1:
            continue
        rng[f, 0] = c0 // ts
        rng[f, 1] = c1 // ts
        rng[f, 2] = r0 // ts
        rng[f, 3] = r1 // ts
        for ty in range(rng[f, 2], rng[f, 3] + 1):
            for tx in range(rng[f, 0], rng[f, 1] + 1):
                counts[ty * ntx + tx + 1] += 1
    for i in range(ntx * nty):
        counts[i + 1] += counts[i]
    idx = np.empty(counts[ntx * nty], dtype=np.int64)
    fill = counts[:-1].copy()
    for f in range(nf):
        if rng[f, 0] < 0:
            continue
        for ty in range(rng[f, 2], rng[f, 3] + 1):
            for tx in range(rng[f, 0], rng[f, 1] + 1):
                t = ty * ntx + tx
                idx[fill[t]] = f
                fill[t] += 1
    return counts, idx


@njit(cache=True, inline="always")
def _axis_window(lo0, lo1, hi0, hi1, c_lo, c_hi, c, tmin, tmax):
    # lo(t) - c <= c_hi and hi(t) + c >= c_lo, lo/hi linear in t
    s = lo1 - lo0
    r = c_hi + c - lo0
    if s > 0.0:
        tmax = min(tmax, r / s)
    elif s < 0.0:
        tmin = max(tmin, r / s)
    elif r < 0.0:
        return 1.0, 0.0
    s2 = hi1 - hi0
    r2 = hi0 + c - c_lo
    if s2 > 0.0:
        tmin = max(tmin, -r2 / s2)
    elif s2 < 0.0:
        tmax = min(tmax, -r2 / s2)
    elif r2 < 0.0:
        return 1.0, 0.0
    return tmin, tmax


@njit(cache=True, inline="always")
def time_window(fb, f, u, v, c):
    """Conservative t-interval in which pixel (u, v) can be within c of face f.

    The face's box at time t contains the lerp of its keyframe boxes, so the
    interval is exact for translations and a superset otherwise.
    """
    tmin, tmax = _axis_window(fb[f, 0], fb[f, 4], fb[f, 1], fb[f, 5], u, u, c, 0.0, 1.0)
    if tmin > tmax:
        return tmin, tmax
    return _axis_window(fb[f, 2], fb[f, 6], fb[f, 3], fb[f, 7], v, v, c, tmin, tmax)


@njit(cache=True, inline="always")
def sample_range(times, tmin, tmax):
    """Indices [kl, kh] of sorted sample times inside [tmin, tmax] (slack 1e-9)."""
    lo_t = tmin - 1e-9
    hi_t = tmax + 1e-9
    n = times.shape[0]
    a, b = 0, n
    while a < b:
        m = (a + b) // 2
        if times[m] < lo_t:
            a = m + 1
        else:
            b = m
    kl = a
    a, b = kl, n
    while a < b:
        m = (a + b) // 2
        if times[m] <= hi_t:
            a = m + 1
        else:
            b = m
    return kl, a - 1


@njit(cache=True)
def row_filter(fb, tile_idx, start, stop, times, u_lo, u_hi, v, c, out):
    """Faces of a tile that reach the row span [u_lo, u_hi] x v at some sample.

    Keeps tile order; the survivors are a superset of every pixel's candidates.
    """
    m = 0
    for ii in range(start, stop):
        f = tile_idx[ii]
        tmin, tmax = _axis_window(fb[f, 0], fb[f, 4], fb[f, 1], fb[f, 5], u_lo, u_hi, c, 0.0, 1.0)
        if tmin > tmax:
            continue
        tmin, tmax = _axis_window(fb[f, 2], fb[f, 6], fb[f, 3], fb[f, 7], v, v, c, tmin, tmax)
        if tmin > tmax:
            continue
        kl, kh = sample_range(times, tmin, tmax)
        if kl > kh:
            continue
        out[m] = f
        m += 1
    return m


def max_tile_count(ptr):
    return max(int(np.diff(ptr).max()) if len(ptr) > 1 else 0, 1)


def segment_boxes(P0, P1, faces):
    """(F, 8) per-face keyframe boxes: x/y lo/hi at start then at end."""
    fb = np.empty((len(faces), 8))
    for off, P in ((0, P0), (4, P1)):
        xs = P[faces, 0]
        ys = P[faces, 1]
        fb[:, off + 0] = xs.min(axis=1)
        fb[:, off + 1] = xs.max(axis=1)
        fb[:, off + 2] = ys.min(axis=1)
        fb[:, off + 3] = ys.max(axis=1)
    return fb


def segment_tiles(fb, config: RasterConfig):
    c = config.cutoff_px
    xmin = np.minimum(fb[:, 0], fb[:, 4]) - c
    xmax = np.maximum(fb[:, 1], fb[:, 5]) + c
    ymin = np.minimum(fb[:, 2], fb[:, 6]) - c
    ymax = np.maximum(fb[:, 3], fb[:, 7]) + c
    return bin_faces(xmin, xmax, ymin, ymax, config.width, config.height, config.tile_size)


def frame_tiles(P, faces, config: RasterConfig):
    """Per-face boxes (F, 4) at one instant plus tiles of the dilated boxes."""
    xs = P[faces, 0]
    ys = P[faces, 1]
    box = np.stack([xs.min(axis=1), xs.max(axis=1), ys.min(axis=1), ys.max(axis=1)], axis=1)
    c = config.cutoff_px
    ptr, idx = bin_faces(box[:, 0] - c, box[:, 1] + c, box[:, 2] - c, box[:, 3] + c,
                         config.width, config.height, config.tile_size)
    return np.ascontiguousarray(box), ptr, idx


# ---------------------------------------------------------------------------
# forward kernels


@njit(cache=True)
def fast_candidates(fb, tile_idx, start, stop, times, u, v, c_px, cf, ck, have):
    """Faces of a tile that come within c_px of (u, v) at some sample.

    Fills face ids ``cf`` and sample ranges ``ck`` and returns the candidate
    count. Rational coefficients are filled on demand by ``ensure_coeffs``.
    """
    n = 0
    for ii in range(start, stop):
        f = tile_idx[ii]
        if (u < min(fb[f, 0], fb[f, 4]) - c_px or u > max(fb[f, 1], fb[f, 5]) + c_px
                or v < min(fb[f, 2], fb[f, 6]) - c_px or v > max(fb[f, 3], fb[f, 7]) + c_px):
            continue
        tmin, tmax = time_window(fb, f, u, v, c_px)
        if tmin > tmax:
            continue
        kl, kh = sample_range(times, tmin, tmax)
        if kl > kh:
            continue
        cf[n] = f
        ck[n, 0] = kl
        ck[n, 1] = kh
        have[n] = False
        n += 1
    return n


@njit(cache=True, inline="always")
def ensure_coeffs(c, cf, have, cc, P0, P1, faces, u, v):
    if have[c]:
        return
    f = cf[c]
    i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
    co = rational_coeffs(P0[i0, 0], P0[i0, 1], P0[i1, 0], P0[i1, 1], P0[i2, 0], P0[i2, 1],
                         P1[i0, 0], P1[i0, 1], P1[i1, 0], P1[i1, 1], P1[i2, 0], P1[i2, 1], u, v)
    for q in range(12):
        cc[c, q] = co[q]
    have[c] = True


@njit(cache=True)
def fast_winners(n, cf, have, cc, fb, P0, P1, faces, times, u, v, best_z, best_f, best_c, bw):
    """Nearest covering candidate per sample by interpolated depth."""
    K = times.shape[0]
    for k in range(K):
        best_z[k] = np.inf
        best_f[k] = -1
        best_c[k] = -1
    for c in range(n):
        f = cf[c]
        tmin, tmax = time_window(fb, f, u, v, 0.0)
        if tmin > tmax:
            continue
        kl, kh = sample_range(times, tmin, tmax)
        if kl > kh:
            continue
        ensure_coeffs(c, cf, have, cc, P0, P1, faces, u, v)
        c10, c11, c12, c20, c21, c22 = cc[c, 0], cc[c, 1], cc[c, 2], cc[c, 3], cc[c, 4], cc[c, 5]
        c30, c31, c32, d1, d2, d3 = cc[c, 6], cc[c, 7], cc[c, 8], cc[c, 9], cc[c, 10], cc[c, 11]
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        za, zb, zc = P0[i0, 2], P0[i1, 2], P0[i2, 2]
        dza, dzb, dzc = P1[i0, 2] - za, P1[i1, 2] - zb, P1[i2, 2] - zc
        for k in range(kl, kh + 1):
            t = times[k]
            den = (d1 * t + d2) * t + d3
            if abs(den) <= DET_EPS:
                continue
            inv = 1.0 / den
            w0 = ((c10 * t + c20) * t + c30) * inv
            if w0 < 0.0:
                continue
            w1 = ((c11 * t + c21) * t + c31) * inv
            if w1 < 0.0:
                continue
            w2 = ((c12 * t + c22) * t + c32) * inv
            if w2 < 0.0:
                continue
            z = w0 * (za + t * dza) + w1 * (zb + t * dzb) + w2 * (zc + t * dzc)
            if z < best_z[k]:
                best_z[k] = z
                best_f[k] = f
                best_c[k] = c
                bw[k, 0] = w0
                bw[k, 1] = w1
                bw[k, 2] = w2


@njit(cache=True, inline="always")
def fast_background(cc, c, t, u, v, x0, y0, x1, y1, x2, y2, X0, Y0, X1, Y1, X2, Y2):
    """Endpoint closest point for one candidate at local time t.

    Returns (ok, rx, ry, w0, w1, w2, den, cw0, cw1, cw2, ei, ej, ein) where
    (rx, ry) is the pixel minus its closest point on the triangle at t.
    """
    den = (cc[c, 9] * t + cc[c, 10]) * t + cc[c, 11]
    if abs(den) <= DET_EPS:
        return False, 0.0, 0.0, 0.0, 0.0, 0.0, den, 0.0, 0.0, 0.0, 0, 0, False
    inv = 1.0 / den
    w0 = ((cc[c, 0] * t + cc[c, 3]) * t + cc[c, 6]) * inv
    w1 = ((cc[c, 1] * t + cc[c, 4]) * t + cc[c, 7]) * inv
    w2 = ((cc[c, 2] * t + cc[c, 5]) * t + cc[c, 8]) * inv
    if t <= 0.5:
        qx = w0 * x0 + w1 * x1 + w2 * x2
        qy = w0 * y0 + w1 * y1 + w2 * y2
        cw0, cw1, cw2, ei, ej, es, ein = closest_point(qx, qy, x0, y0, x1, y1, x2, y2)
    else:
        qx = w0 * X0 + w1 * X1 + w2 * X2
        qy = w0 * Y0 + w1 * Y1 + w2 * Y2
        cw0, cw1, cw2, ei, ej, es, ein = closest_point(qx, qy, X0, Y0, X1, Y1, X2, Y2)
    s = 1.0 - t
    px = cw0 * (s * x0 + t * X0) + cw1 * (s * x1 + t * X1) + cw2 * (s * x2 + t * X2)
    py = cw0 * (s * y0 + t * Y0) + cw1 * (s * y1 + t * Y1) + cw2 * (s * y2 + t * Y2)
    return True, u - px, v - py, w0, w1, w2, den, cw0, cw1, cw2, ei, ej, ein


@njit(parallel=True, cache=True)
def _fast_segment(P0, P1, faces, colors, times, fb, tile_ptr, tile_idx, ts, width, height,
                  c_px, kappa, maxc, acc_rgb, acc_alpha, zsel):
    K = times.shape[0]
    ntx = (width + ts - 1) // ts
    for row in prange(height):
        best_z = np.empty(K)
        best_f = np.empty(K, dtype=np.int64)
        best_c = np.empty(K, dtype=np.int64)
        bw = np.empty((K, 3))
        T = np.empty(K)
        cf = np.empty(maxc, dtype=np.int64)
        ck = np.empty((maxc, 2), dtype=np.int64)
        cc = np.empty((maxc, 12))
        have = np.empty(maxc, dtype=np.bool_)
        rowlist = np.empty(maxc, dtype=np.int64)
        n_row = 0
        v = row + 0.5
        for col in range(width):
            u = col + 0.5
            if col % ts == 0:
                tile = (row // ts) * ntx + col // ts
                n_row = row_filter(fb, tile_idx, tile_ptr[tile], tile_ptr[tile + 1], times, u,
                               min(col + ts, width) - 0.5, v, c_px, rowlist)
            n = fast_candidates(fb, rowlist, 0, n_row, times, u, v, c_px, cf, ck, have)
            fast_winners(n, cf, have, cc, fb, P0, P1, faces, times, u, v, best_z, best_f, best_c, bw)
            n_bg = 0
            for k in range(K):
                T[k] = 1.0
                if best_f[k] < 0:
                    n_bg += 1
            if n_bg > 0:
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
                        if ok:
                            T[k] *= 1.0 - math.exp(-kappa * (rx * rx + ry * ry))
            for k in range(K):
                f = best_f[k]
                if f >= 0:
                    i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
                    for ch in range(3):
                        acc_rgb[row, col, ch] += (bw[k, 0] * colors[i0, ch] + bw[k, 1] * colors[i1, ch]
                                                  + bw[k, 2] * colors[i2, ch])
                    acc_alpha[row, col] += 1.0
                else:
                    acc_alpha[row, col] += 1.0 - T[k]
            zsel[row, col] = best_f[K - 1]


@njit(parallel=True, cache=True)
def _naive_frame(P, faces, colors, box, tile_ptr, tile_idx, ts, width, height,
                 c_px, kappa, acc_rgb, acc_alpha, zsel):
    ntx = (width + ts - 1) // ts
    for row in prange(height):
        v = row + 0.5
        for col in range(width):
            u = col + 0.5
            tile = (row // ts) * ntx + col // ts
            best_z = np.inf
            best_f = -1
            b0 = 0.0
            b1 = 0.0
            b2 = 0.0
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
                    b0, b1, b2 = w0, w1, w2
            if best_f >= 0:
                i0, i1, i2 = faces[best_f, 0], faces[best_f, 1], faces[best_f, 2]
                for ch in range(3):
                    acc_rgb[row, col, ch] += b0 * colors[i0, ch] + b1 * colors[i1, ch] + b2 * colors[i2, ch]
                acc_alpha[row, col] += 1.0
            else:
                T = 1.0
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
                    px = cw0 * x0 + cw1 * x1 + cw2 * x2
                    py = cw0 * y0 + cw1 * y1 + cw2 * y2
                    d = (u - px) * (u - px) + (v - py) * (v - py)
                    T *= 1.0 - math.exp(-kappa * d)
                acc_alpha[row, col] += 1.0 - T
            zsel[row, col] = best_f


# ---------------------------------------------------------------------------
# public rendering API


def _colors(colors, n_vertices):
    C = np.ascontiguousarray(colors, dtype=np.float64)
    if C.shape != (n_vertices, 3):
        raise ValueError(f"colors must have shape ({n_vertices}, 3), got {C.shape}")
    return C


def _buffers(config):
    H, W = config.height, config.width
    return np.zeros((H, W, 3)), np.zeros((H, W)), np.full((H, W), -1, dtype=np.int64)


def _accumulate_fast_segment(segmotion, seg, times, colors, config, acc_rgb, acc_alpha, zsel):
    P0 = segmotion.keyframes[seg]
    P1 = segmotion.keyframes[seg + 1]
    faces = segmotion.faces
    if len(faces) == 0:
        return
    fb = segment_boxes(P0, P1, faces)
    ptr, idx = segment_tiles(fb, config)
    _fast_segment(P0, P1, faces, colors, np.ascontiguousarray(times, dtype=np.float64), fb, ptr, idx,
                  config.tile_size, config.width, config.height, config.cutoff_px, config.kappa,
                  max_tile_count(ptr), acc_rgb, acc_alpha, zsel)


def _accumulate_naive_frame(P, faces, colors, config, acc_rgb, acc_alpha, zsel):
    if len(faces) == 0:
        return
    P = np.ascontiguousarray(P, dtype=np.float64)
    box, ptr, idx = frame_tiles(P, faces, config)
    _naive_frame(P, faces, colors, box, ptr, idx, config.tile_size, config.width, config.height,
                 config.cutoff_px, config.kappa, acc_rgb, acc_alpha, zsel)


def render_sample(segmotion: SegmentedMotion, seg, t, colors, config: RasterConfig) -> FrameSample:
    """One instant of a segment through the fast path."""
    if not 0 <= seg < segmotion.n_segments:
        raise IndexError(f"segment {seg} out of range for {segmotion.n_segments} segments")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    C = _colors(colors, segmotion.keyframes.shape[1])
    rgb, alpha, zsel = _buffers(config)
    _accumulate_fast_segment(segmotion, seg, np.array([float(t)]), C, config, rgb, alpha, zsel)
    return FrameSample(rgb, alpha, zsel)


def render_static(screen_vertices, faces, colors, config: RasterConfig) -> FrameSample:
    """One static frame through the per-frame naive solve, exact distances."""
    P = np.ascontiguousarray(screen_vertices, dtype=np.float64)
    F = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    C = _colors(colors, len(P))
    rgb, alpha, zsel = _buffers(config)
    _accumulate_naive_frame(P, F, C, config, rgb, alpha, zsel)
    return FrameSample(rgb, alpha, zsel)


def render_blur(segmotion: SegmentedMotion, colors, config: RasterConfig, solver="fast",
                record=False) -> BlurFrame:
    """Uniform mean over every sample of every segment."""
    if solver not in ("fast", "naive"):
        raise ValueError(f"solver must be 'fast' or 'naive', got {solver!r}")
    C = _colors(colors, segmotion.keyframes.shape[1])
    rgb, alpha, zsel = _buffers(config)
    times = segmotion.sample_times()
    for seg in range(segmotion.n_segments):
        if solver == "fast":
            _accumulate_fast_segment(segmotion, seg, times, C, config, rgb, alpha, zsel)
        else:
            for t in times:
                _accumulate_naive_frame(segmotion.interpolate(seg, t), segmotion.faces, C, config,
                                        rgb, alpha, zsel)
    n = segmotion.total_samples
    rec = RenderRecord(segmotion, C, config, solver) if record else None
    return BlurFrame(rgb / n, alpha / n, segmotion.n_segments, segmotion.samples_per_segment, rec)


def render_poses(frames, faces, colors, config: RasterConfig) -> BlurFrame:
    """Mean of naive static renders of explicit screen-space poses."""
    C = _colors(colors, frames[0].shape[0])
    rgb, alpha, zsel = _buffers(config)
    F = np.ascontiguousarray(faces, dtype=np.int64)
    for P in frames:
        _accumulate_naive_frame(P, F, C, config, rgb, alpha, zsel)
    n = len(frames)
    return BlurFrame(rgb / n, alpha / n, 1, n)


# ---------------------------------------------------------------------------
# per-pair reference operations


def coverage_prob(pair: TrianglePair, p, w_t, t, delta, width=2):
    """Soft coverage of pixel p by a moving face at local time t.

    The closest point is selected on the nearer keyframe triangle and the
    distance measured on the true triangle at t. ``width`` converts pixel
    distances to normalized units; the default of 2 means p and the
    triangles are already normalized.
    """
    p = np.asarray(p, dtype=np.float64).ravel()[:2]
    w_t = np.asarray(w_t, dtype=np.float64).ravel()
    FX = pair.F1 if endpoint_select(t) else pair.F0
    if np.all(w_t >= 0.0):
        what = w_t
    else:
        q = FX @ w_t
        what = np.array(closest_point(q[0], q[1], FX[0, 0], FX[1, 0], FX[0, 1], FX[1, 1],
                                      FX[0, 2], FX[1, 2])[:3])
    Ft = pair.at(t)
    r = p - (Ft @ what)[:2]
    d = float(r @ r) * (2.0 / width) ** 2
    return math.exp(-d / delta)


def exact_coverage_prob(pair: TrianglePair, p, t, delta, width=2):
    """Reference kernel with the closest point taken on the triangle at t."""
    p = np.asarray(p, dtype=np.float64).ravel()[:2]
    Ft = pair.at(t)
    cw = closest_point(p[0], p[1], Ft[0, 0], Ft[1, 0], Ft[0, 1], Ft[1, 1], Ft[0, 2], Ft[1, 2])[:3]
    w = np.linalg.solve(Ft, np.array([p[0], p[1], 1.0]))
    if np.all(w >= 0.0):
        return 1.0
    r = p - (Ft @ np.array(cw))[:2]
    return math.exp(-float(r @ r) * (2.0 / width) ** 2 / delta)


def zbuffer_select(candidates, depths):
    """Winning face among covering candidates.

    ``candidates`` is a sequence of (face_index, weights) and ``depths`` the
    matching per-vertex depth triples. The smallest interpolated depth wins;
    ties go to the lower face index.
    """
    if len(candidates) == 0:
        raise ValueError("zbuffer_select needs at least one candidate")
    best = None
    for (f, w), z in zip(candidates, depths):
        zi = float(np.dot(w, z))
        key = (zi, f)
        if best is None or key < best[0]:
            best = (key, f)
    return best[1]


def candidate_faces(pairs, p, cutoff):
    """Faces whose swept screen box, dilated by ``cutoff`` pixels, holds p."""
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    u, v = np.asarray(p, dtype=np.float64).ravel()[:2]
    keep = []
    for j, pair in enumerate(pairs):
        xs = np.concatenate([pair.F0[0], pair.F1[0]])
        ys = np.concatenate([pair.F0[1], pair.F1[1]])
        if xs.min() - cutoff <= u <= xs.max() + cutoff and ys.min() - cutoff <= v <= ys.max() + cutoff:
            keep.append(j)
    return keep
