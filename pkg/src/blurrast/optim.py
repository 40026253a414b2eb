"""Losses, Adam, evaluation metrics and multi-view shape and color recovery.

The recovery loop deforms a template mesh and its per-vertex colors so
that blurred renders from several cameras match target images under a
known motion.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .geometry import Camera, Mesh, MotionTrajectory, icosphere, segment
from .grad import PixelAdjoint, backward_blur
from .raster import BlurFrame, RasterConfig, render_blur
from .validation import check_image_pair


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossWeights:
    lambda_s: float = 3e-2
    lambda_l: float = 3e-4

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_l < 0:
            raise ValueError("loss weights must be nonnegative")


def _rgba(x):
    if isinstance(x, BlurFrame):
        return x.rgba()
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 4:
        raise ValueError(f"expected an (H, W, 4) RGBA image, got {a.shape}")
    return a


def image_loss(rendered, target):
    """Mean absolute rgb error plus mean absolute alpha error.

    Returns (value, PixelAdjoint). The subgradient at a zero difference is 0.
    """
    r, t = check_image_pair(_rgba(rendered), _rgba(target))
    diff = r - t
    n_rgb = diff[..., :3].size
    n_a = diff[..., 3].size
    value = np.abs(diff[..., :3]).sum() / n_rgb + np.abs(diff[..., 3]).sum() / n_a
    sgn = np.sign(diff)
    return float(value), PixelAdjoint(sgn[..., :3] / n_rgb, sgn[..., 3] / n_a)


def uniform_laplacian(faces, n_vertices):
    """Sparse I - M where M averages each vertex's one-ring neighbors."""
    F = np.asarray(faces, dtype=np.int64)
    rows = np.concatenate([F[:, 0], F[:, 1], F[:, 2], F[:, 1], F[:, 2], F[:, 0]])
    cols = np.concatenate([F[:, 1], F[:, 2], F[:, 0], F[:, 0], F[:, 1], F[:, 2]])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices)).tocsr()
    adj.data[:] = 1.0  # duplicate edges count once
    deg = np.asarray(adj.sum(axis=1)).ravel()
    isolated = deg == 0
    if isolated.any():
        warnings.warn(f"{int(isolated.sum())} isolated vertices contribute nothing to the Laplacian loss")
    inv = np.where(isolated, 0.0, 1.0 / np.where(isolated, 1.0, deg))
    L = sp.identity(n_vertices, format="csr") - sp.diags(inv) @ adj
    # an isolated vertex equals its own (empty) neighborhood mean
    L = sp.diags(np.where(isolated, 0.0, 1.0)) @ L
    return L.tocsr()


def laplacian_loss(vertices, template, faces, L=None):
    """Sum over vertices of |delta_v - mean of neighbor deltas|^2.

    delta is the displacement from the template. Returns (value, gradient).
    """
    V = np.asarray(vertices, dtype=np.float64)
    if L is None:
        L = uniform_laplacian(faces, len(V))
    r = L @ (V - np.asarray(template, dtype=np.float64))
    return float((r * r).sum()), 2.0 * (L.T @ r)


def _edge_pairs(faces):
    """Interior edges with exactly two incident faces: (v0, v1, opposite_a, opposite_b)."""
    F = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    opp = np.concatenate([F[:, 2], F[:, 0], F[:, 1]])
    key = np.sort(e, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    key, e, opp = key[order], e[order], opp[order]
    out = []
    i = 0
    n = len(key)
    while i < n:
        j = i
        while j + 1 < n and key[j + 1, 0] == key[i, 0] and key[j + 1, 1] == key[i, 1]:
            j += 1
        if j == i + 1:
            out.append((e[i, 0], e[i, 1], opp[i], opp[j]))
        i = j + 1
    return np.array(out, dtype=np.int64).reshape(-1, 4)


def smoothness_loss(vertices, faces, pairs=None):
    """Sum over interior edges of (cos theta + 1)^2.

    theta is the angle between the two faces measured through the edge:
    cos theta = -1 when they are coplanar, +1 when folded flat onto each
    other. Returns (value, gradient).
    """
    V = np.asarray(vertices, dtype=np.float64)
    if pairs is None:
        pairs = _edge_pairs(faces)
    grad = np.zeros_like(V)
    if len(pairs) == 0:
        return 0.0, grad
    v0, v1, pa, pb = (V[pairs[:, i]] for i in range(4))
    e = v1 - v0
    l2 = np.einsum("ij,ij->i", e, e)
    d1 = pa - v0
    d2 = pb - v0
    a1 = np.einsum("ij,ij->i", d1, e) / np.where(l2 > 0, l2, 1.0)
    a2 = np.einsum("ij,ij->i", d2, e) / np.where(l2 > 0, l2, 1.0)
    b1 = d1 - a1[:, None] * e
    b2 = d2 - a2[:, None] * e
    n1 = np.linalg.norm(b1, axis=1)
    n2 = np.linalg.norm(b2, axis=1)
    ok = (l2 > 1e-20) & (n1 > 1e-12) & (n2 > 1e-12)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} degenerate edges skipped in smoothness loss")
    n1s = np.where(ok, n1, 1.0)
    n2s = np.where(ok, n2, 1.0)
    cos = np.einsum("ij,ij->i", b1, b2) / (n1s * n2s)
    value = float(np.sum(np.where(ok, (cos + 1.0) ** 2, 0.0)))
    gcos = np.where(ok, 2.0 * (cos + 1.0), 0.0)[:, None]
    gb1 = gcos * (b2 / (n1s * n2s)[:, None] - cos[:, None] * b1 / (n1s ** 2)[:, None])
    gb2 = gcos * (b1 / (n1s * n2s)[:, None] - cos[:, None] * b2 / (n2s ** 2)[:, None])
    inv_l2 = (1.0 / np.where(l2 > 0, l2, 1.0))[:, None]
    ge = np.zeros_like(e)
    gd = []
    for gb, a, d in ((gb1, a1, d1), (gb2, a2, d2)):
        ga = -np.einsum("ij,ij->i", gb, e)[:, None]
        ge += -a[:, None] * gb + ga * d * inv_l2 - 2.0 * ga * a[:, None] * e * inv_l2
        gd.append(gb + ga * e * inv_l2)
    np.add.at(grad, pairs[:, 2], gd[0])
    np.add.at(grad, pairs[:, 3], gd[1])
    np.add.at(grad, pairs[:, 0], -gd[0] - gd[1] - ge)
    np.add.at(grad, pairs[:, 1], ge)
    return value, grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    shape: tuple
    lr: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.99
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        self.shape = tuple(self.shape)
        if self.m is None:
            self.m = np.zeros(self.shape)
        if self.v is None:
            self.v = np.zeros(self.shape)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; returns the new parameters."""
    g = np.asarray(grads, dtype=np.float64)
    p = np.asarray(params, dtype=np.float64)
    if g.shape != state.shape or p.shape != state.shape:
        raise ValueError(f"shape mismatch: state {state.shape}, params {p.shape}, grads {g.shape}")
    bad = ~np.isfinite(g)
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"{int(bad.sum())} non-finite gradient entries, first at {first}, "
                             f"step {state.step_count + 1}")
    state.step_count += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.step_count)
    vhat = state.v / (1.0 - state.beta2 ** state.step_count)
    return p - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b):
    """10 log10(1 / MSE) for images in [0, 1]; inf when they are equal."""
    a, b = check_image_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _ray_hits(V, F, ys, zs):
    """Sorted x of crossings of rays (y, z) along +x with the triangles, per ray."""
    T = V[F]
    out = []
    y0, z0 = T[:, 0, 1], T[:, 0, 2]
    e1y, e1z = T[:, 1, 1] - y0, T[:, 1, 2] - z0
    e2y, e2z = T[:, 2, 1] - y0, T[:, 2, 2] - z0
    det = e1y * e2z - e1z * e2y
    keep = np.abs(det) > 1e-15
    T, y0, z0, e1y, e1z, e2y, e2z, det = (x[keep] for x in (T, y0, z0, e1y, e1z, e2y, e2z, det))
    for y, z in zip(ys, zs):
        py, pz = y - y0, z - z0
        b1 = (py * e2z - pz * e2y) / det
        b2 = (e1y * pz - e1z * py) / det
        inside = (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1)
        b0 = 1 - b1 - b2
        x = b0 * T[:, 0, 0] + b1 * T[:, 1, 0] + b2 * T[:, 2, 0]
        out.append(np.sort(x[inside]))
    return out


def voxelize(mesh: Mesh, lo, size, resolution):
    """Occupancy of voxel centers by ray parity along +x."""
    n = int(resolution)
    h = size / n
    lo = np.asarray(lo, dtype=np.float64)
    idx = (np.arange(n) + 0.5) * h
    nudge = 1e-7 * h
    yy, zz = np.meshgrid(lo[1] + idx + nudge, lo[2] + idx + nudge, indexing="ij")
    hits = _ray_hits(mesh.vertices, mesh.faces, yy.ravel(), zz.ravel())
    occ = np.zeros((n, n, n), dtype=bool)
    for r, hx in enumerate(hits):
        iy, iz = divmod(r, n)
        # a center is inside when an odd number of crossings lie beyond it along +x
        beyond = len(hx) - np.searchsorted(hx, lo[0] + idx, side="right")
        occ[:, iy, iz] = beyond % 2 == 1
    return occ


def voxel_iou(a: Mesh, b: Mesh, resolution=32):
    """Intersection over union of parity voxelizations on a shared cube."""
    if int(resolution) < 2:
        raise ValueError("resolution must be >= 2")
    allv = np.concatenate([a.vertices, b.vertices])
    lo = allv.min(axis=0)
    hi = allv.max(axis=0)
    size = float((hi - lo).max())
    if not size > 0:
        raise ValueError("meshes have zero extent")
    center = (lo + hi) / 2
    # small margin keeps surface points off the grid boundary
    size *= 1.0 + 1e-3
    lo = center - size / 2
    A = voxelize(a, lo, size, resolution)
    B = voxelize(b, lo, size, resolution)
    union = np.logical_or(A, B).sum()
    if union == 0:
        raise ValueError("both voxelizations are empty")
    return float(np.logical_and(A, B).sum() / union)


# ---------------------------------------------------------------------------
# recovery


@dataclass
class RecoveryProblem:
    targets: list
    cameras: list
    trajectory: MotionTrajectory
    template: Mesh
    iterations: int = 500
    batch_size: int = 8
    n_segments: int = 1
    samples_per_segment: int = 10
    delta: float = 1e-4
    solver: str = "fast"
    seed: int = 0

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("need at least one view")
        if len(self.targets) != len(self.cameras):
            raise ValueError(f"{len(self.targets)} targets for {len(self.cameras)} cameras")
        self.targets = [_rgba(t) for t in self.targets]
        for t, cam in zip(self.targets, self.cameras):
            if t.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"target of shape {t.shape[:2]} does not match camera "
                                 f"{(cam.height, cam.width)}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")

    def render(self, vertices, colors, view, record=False):
        cam = self.cameras[view]
        mesh = Mesh(vertices, self.template.faces, colors)
        sm = segment(self.trajectory, mesh, cam, self.n_segments, self.samples_per_segment)
        cfg = RasterConfig.for_camera(cam, delta=self.delta)
        return render_blur(sm, colors, cfg, solver=self.solver, record=record)


@dataclass
class RecoveryResult:
    mesh: Mesh
    history: list
    wall_time: float

    def losses(self, key="total"):
        return np.array([row[key] for row in self.history])


class ViewSampler:
    """Seeded batches without replacement, reshuffled every epoch."""

    def __init__(self, n_views, batch_size, seed=0):
        self.n = n_views
        self.batch = min(batch_size, n_views)
        self.rng = np.random.default_rng(seed)
        self._queue = []

    def next(self):
        out = []
        while len(out) < self.batch:
            if not self._queue:
                self._queue = list(self.rng.permutation(self.n))
            v = self._queue.pop(0)
            if v not in out:
                out.append(v)
            else:
                self._queue.append(v)
        return out


def recover_translation(problem: RecoveryProblem, weights: LossWeights = None, callback=None):
    """Adam on vertices and colors against the blurred targets.

    ``callback(iteration, mesh, row)`` runs after every update.
    """
    weights = weights or LossWeights()
    tpl = problem.template
    V = tpl.vertices.copy()
    C = tpl.colors.copy()
    L = uniform_laplacian(tpl.faces, len(V))
    pairs = _edge_pairs(tpl.faces)
    sv = AdamState(V.shape)
    sc = AdamState(C.shape)
    sampler = ViewSampler(len(problem.cameras), problem.batch_size, problem.seed)
    history = []
    t_start = time.perf_counter()
    for it in range(problem.iterations):
        t0 = time.perf_counter()
        views = sampler.next()
        gV = np.zeros_like(V)
        gC = np.zeros_like(C)
        l_img = 0.0
        for view in views:
            frame = problem.render(V, C, view, record=True)
            value, adj = image_loss(frame, problem.targets[view])
            state = backward_blur(frame, adj)
            l_img += value / len(views)
            gV += state.d_vertices / len(views)
            gC += state.d_colors / len(views)
        l_s, g_s = smoothness_loss(V, tpl.faces, pairs)
        l_l, g_l = laplacian_loss(V, tpl.vertices, tpl.faces, L)
        total = l_img + weights.lambda_s * l_s + weights.lambda_l * l_l
        if not math.isfinite(total):
            raise NonFiniteError(f"loss is {total} at iteration {it}")
        gV += weights.lambda_s * g_s + weights.lambda_l * g_l
        V = adam_step(sv, V, gV)
        C = np.clip(adam_step(sc, C, gC), 0.0, 1.0)
        row = {"iter": it, "L_img": l_img, "L_s": l_s, "L_L": l_l, "total": total,
               "wall_ms": (time.perf_counter() - t0) * 1e3}
        history.append(row)
        if callback is not None:
            callback(it, Mesh(V, tpl.faces, C), row)
    return RecoveryResult(Mesh(V, tpl.faces, C), history, time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# estimator


TRANSLATION_AZIMUTHS = (-315.0, -270.0, -225.0, -180.0, -135.0, -90.0, -45.0, 0.0)


def default_cameras(width=64, height=64, n_views=8, elevations=(30.0, -30.0)):
    """Eye positions for multi-view recovery at the standard distance."""
    cams = []
    for i in range(n_views):
        az = TRANSLATION_AZIMUTHS[i % len(TRANSLATION_AZIMUTHS)]
        el = elevations[i % len(elevations)]
        cams.append(Camera.from_spherical(elevation=el, azimuth=az, width=width, height=height))
    return cams


class BlurredShapeRecovery(BaseEstimator):
    """Recover a colored mesh from motion-blurred views.

    ``fit(images, cameras)`` takes one RGBA target per camera; ``predict``
    renders the recovered mesh for new cameras and ``score`` reports mean
    PSNR against given images.
    """

    def __init__(self, trajectory="translation-x", template_subdivisions=3, template_radius=0.5,
                 iterations=500, batch_size=8, lambda_s=3e-2, lambda_l=3e-4, n_segments=1,
                 samples_per_segment=10, delta=1e-4, solver="fast", random_state=0):
        self.trajectory = trajectory
        self.template_subdivisions = template_subdivisions
        self.template_radius = template_radius
        self.iterations = iterations
        self.batch_size = batch_size
        self.lambda_s = lambda_s
        self.lambda_l = lambda_l
        self.n_segments = n_segments
        self.samples_per_segment = samples_per_segment
        self.delta = delta
        self.solver = solver
        self.random_state = random_state

    def _trajectory(self):
        if isinstance(self.trajectory, MotionTrajectory):
            return self.trajectory
        return MotionTrajectory(self.trajectory)

    def _problem(self, images, cameras, template):
        return RecoveryProblem(list(images), list(cameras), self._trajectory(), template,
                               self.iterations, self.batch_size, self.n_segments,
                               self.samples_per_segment, self.delta, self.solver,
                               self.random_state)

    def fit(self, images, cameras, template=None):
        if template is None:
            template = icosphere(self.template_subdivisions, radius=self.template_radius)
        problem = self._problem(images, cameras, template)
        result = recover_translation(problem, LossWeights(self.lambda_s, self.lambda_l))
        self.mesh_ = result.mesh
        self.history_ = result.history
        self.n_iter_ = len(result.history)
        self.fit_time_ = result.wall_time
        return self

    def _check_fitted(self):
        if not hasattr(self, "mesh_"):
            raise RuntimeError("BlurredShapeRecovery is not fitted yet; call fit first")

    def predict(self, cameras):
        """(n, H, W, 4) blurred RGBA renders of the recovered mesh."""
        self._check_fitted()
        out = []
        for cam in cameras:
            sm = segment(self._trajectory(), self.mesh_, cam, self.n_segments, self.samples_per_segment)
            frame = render_blur(sm, self.mesh_.colors, RasterConfig.for_camera(cam, delta=self.delta),
                                solver=self.solver)
            out.append(frame.rgba())
        return np.stack(out)

    def score(self, images, cameras):
        """Mean PSNR of ``predict(cameras)`` against ``images``."""
        pred = self.predict(cameras)
        return float(np.mean([psnr(p, _rgba(t)) for p, t in zip(pred, images)]))
