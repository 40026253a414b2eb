"""Meshes, cameras, motion trajectories and keyframe segmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import check_colors, check_faces, check_vertices

DEFAULT_GRAY = 0.7
NEAR_EPS = 1e-6

TRAJECTORY_KINDS = ("static", "translation-x", "rotation-y", "parabolic-composite")


class ObjParseError(ValueError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class MeshIndexError(IndexError):
    pass


class BehindCameraError(ValueError):
    def __init__(self, indices):
        self.indices = np.asarray(indices, dtype=np.int64)
        shown = ", ".join(str(i) for i in self.indices[:20])
        more = "" if len(self.indices) <= 20 else f" (+{len(self.indices) - 20} more)"
        super().__init__(f"vertices behind the camera: {shown}{more}")


@dataclass
class Mesh:
    """Triangle mesh with per-vertex RGB colors."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = check_vertices(self.vertices)
        self.faces = check_faces(self.faces, len(self.vertices))
        if self.colors is None:
            self.colors = np.full_like(self.vertices, DEFAULT_GRAY)
        self.colors = check_colors(self.colors, len(self.vertices))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def copy(self):
        return Mesh(self.vertices.copy(), self.faces.copy(), self.colors.copy())

    def with_vertices(self, vertices):
        return Mesh(vertices, self.faces, self.colors)

    def edges(self):
        """Unique undirected edges as a sorted (E, 2) array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


def load_obj(path) -> Mesh:
    """Read an ASCII OBJ file.

    Faces with more than three corners are fan-triangulated. A ``v`` record
    with six floats carries an RGB vertex color; vertices without one get
    0.7 gray.
    """
    path = Path(path)
    verts, cols, faces = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                try:
                    nums = [float(x) for x in parts[1:]]
                except ValueError:
                    raise ObjParseError(path, lineno, f"bad vertex record {line!r}") from None
                if len(nums) not in (3, 4, 6, 7):
                    raise ObjParseError(path, lineno, f"vertex needs 3 or 6 values, got {len(nums)}")
                verts.append(nums[:3])
                cols.append(nums[3:6] if len(nums) >= 6 else None)
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(path, lineno, "face needs at least 3 corners")
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/", 1)[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ObjParseError(path, lineno, f"bad face index {tok!r}") from None
                    if i == 0:
                        raise ObjParseError(path, lineno, "face index 0 is invalid in OBJ")
                    # negative indices count back from the current vertex
                    i = i - 1 if i > 0 else len(verts) + i
                    idx.append((i, lineno))
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
            # vt, vn, o, g, s, usemtl, mtllib: ignored
    n = len(verts)
    flat = []
    for tri in faces:
        for i, lineno in tri:
            if i < 0 or i >= n:
                raise MeshIndexError(f"{path}:{lineno}: face index {i + 1} out of range for {n} vertices")
        flat.append([c[0] for c in tri])
    colors = np.array([c if c is not None else [DEFAULT_GRAY] * 3 for c in cols], dtype=np.float64).reshape(-1, 3)
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(flat, dtype=np.int64).reshape(-1, 3), colors)


def save_obj(mesh: Mesh, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for v, c in zip(mesh.vertices, mesh.colors):
            fh.write("v %.9g %.9g %.9g %.6g %.6g %.6g\n" % (v[0], v[1], v[2], c[0], c[1], c[2]))
        for f in mesh.faces:
            fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))
    return path


# ---------------------------------------------------------------------------
# procedural meshes


def icosphere(subdivisions=3, radius=1.0, color=DEFAULT_GRAY) -> Mesh:
    """Subdivided icosahedron; 20 * 4**subdivisions faces."""
    phi = (1 + 5 ** 0.5) / 2
    v = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
         (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
         (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    V = np.array(verts) * radius
    return Mesh(V, np.array(faces, dtype=np.int64), np.full_like(V, color))


def uv_sphere(n_lat=11, n_lon=25, radius=1.0, color=DEFAULT_GRAY) -> Mesh:
    """Latitude/longitude sphere with 2 * n_lon * (n_lat - 1) faces."""
    verts = [(0.0, radius, 0.0)]
    for i in range(1, n_lat):
        th = math.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * math.pi * j / n_lon
            verts.append((radius * math.sin(th) * math.cos(ph), radius * math.cos(th),
                          radius * math.sin(th) * math.sin(ph)))
    verts.append((0.0, -radius, 0.0))
    bottom = len(verts) - 1
    faces = []
    for j in range(n_lon):
        faces.append((0, 1 + (j + 1) % n_lon, 1 + j))
    for i in range(n_lat - 2):
        r0, r1 = 1 + i * n_lon, 1 + (i + 1) * n_lon
        for j in range(n_lon):
            j1 = (j + 1) % n_lon
            faces.append((r0 + j, r0 + j1, r1 + j))
            faces.append((r0 + j1, r1 + j1, r1 + j))
    last = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append((bottom, last + j, last + (j + 1) % n_lon))
    V = np.array(verts)
    return Mesh(V, np.array(faces, dtype=np.int64), np.full_like(V, color))


def cube(half=1.0, colored=True) -> Mesh:
    """Axis-aligned cube, 8 vertices and 12 outward-wound triangles."""
    V = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64) * half
    F = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
                  [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
                  [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]], dtype=np.int64)
    C = 0.5 + 0.4 * V / half if colored else np.full_like(V, DEFAULT_GRAY)
    return Mesh(V, F, C)


# (center, semi-axes) of the ellipsoid lobes making up the cow proxy
_COW_LOBES = (
    ((0.0, 0.0, 0.0), (0.95, 0.5, 0.45)),     # body
    ((0.95, 0.25, 0.0), (0.35, 0.3, 0.25)),   # head
    ((0.55, -0.55, 0.25), (0.12, 0.45, 0.12)),
    ((0.55, -0.55, -0.25), (0.12, 0.45, 0.12)),
    ((-0.55, -0.55, 0.25), (0.12, 0.45, 0.12)),
    ((-0.55, -0.55, -0.25), (0.12, 0.45, 0.12)),
)


def cow_proxy(subdivisions=2) -> Mesh:
    """Star-shaped low-poly stand-in for the Spot cow.

    Each icosphere direction is pushed out to the farthest exit point of a
    union of ellipsoid lobes (body, head, four legs), so the result stays a
    closed genus-0 surface. Scaled to unit max vertex norm.
    """
    base = icosphere(subdivisions)
    dirs = base.vertices
    radius = np.zeros(len(dirs))
    for center, axes in _COW_LOBES:
        c = np.asarray(center) / axes
        d = dirs / axes
        # |t d - c|^2 = 1
        a = np.einsum("ij,ij->i", d, d)
        b = -2 * d @ c
        cc = c @ c - 1
        disc = b * b - 4 * a * cc
        hit = disc >= 0
        t_exit = np.where(hit, (-b + np.sqrt(np.maximum(disc, 0))) / (2 * a), 0.0)
        radius = np.maximum(radius, np.where(t_exit > 0, t_exit, 0.0))
    V = dirs * radius[:, None]
    V /= np.linalg.norm(V, axis=1).max()
    spots = 0.5 + 0.5 * np.tanh(4 * np.sin(3.1 * V[:, 0] + 1.0) * np.sin(2.7 * V[:, 2] + 0.4))
    brown = np.array([0.45, 0.3, 0.2])
    white = np.array([0.92, 0.9, 0.86])
    C = spots[:, None] * white + (1 - spots[:, None]) * brown
    return Mesh(V, base.faces.copy(), C)


def normalize_unit(mesh: Mesh) -> Mesh:
    """Uniformly scale so that the largest vertex norm is 1."""
    r = np.linalg.norm(mesh.vertices, axis=1).max()
    return mesh.with_vertices(mesh.vertices / r)


def rotation_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


# ---------------------------------------------------------------------------
# camera


@dataclass
class Camera:
    """Look-at perspective camera.

    ``half_fov`` is in radians. Projection maps view-space (x, y, z) to
    normalized coordinates x / (z tan(half_fov)), then to pixels with the
    image y axis pointing down.
    """

    eye: np.ndarray
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    half_fov: float = math.radians(30.0)
    width: int = 128
    height: int = 128

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64).reshape(3)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)
        self.up = np.asarray(self.up, dtype=np.float64).reshape(3)
        if not 0.0 < self.half_fov < math.pi / 2:
            raise ValueError(f"half_fov must lie in (0, pi/2), got {self.half_fov}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be positive")
        self.width, self.height = int(self.width), int(self.height)
        fwd = self.target - self.eye
        n = np.linalg.norm(fwd)
        if n == 0:
            raise ValueError("eye and target coincide")
        un = np.linalg.norm(self.up)
        if un == 0 or np.linalg.norm(np.cross(self.up / un, fwd / n)) < 1e-9:
            raise ValueError("up vector is parallel to the view direction")
        self.up = self.up / un

    @classmethod
    def from_spherical(cls, distance=2.232, elevation=0.0, azimuth=0.0, half_fov=30.0,
                       width=128, height=128):
        """Eye on a sphere around the origin; angles in degrees, y is up.

        azimuth 0 / elevation 0 puts the eye on the -z axis.
        """
        el, az = math.radians(elevation), math.radians(azimuth)
        eye = distance * np.array([math.cos(el) * math.sin(az), math.sin(el),
                                   -math.cos(el) * math.cos(az)])
        return cls(eye=eye, half_fov=math.radians(half_fov), width=width, height=height)

    def rotation(self):
        """World-to-view rotation; rows are the view x, y, z axes."""
        z = self.target - self.eye
        z /= np.linalg.norm(z)
        x = np.cross(self.up, z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return np.stack([x, y, z])

    def to_view(self, points):
        return (np.asarray(points, dtype=np.float64) - self.eye) @ self.rotation().T


def project(mesh_or_vertices, camera: Camera) -> np.ndarray:
    """World points -> (N, 3) array of pixel x, pixel y and view-space depth."""
    V = mesh_or_vertices.vertices if isinstance(mesh_or_vertices, Mesh) else mesh_or_vertices
    view = camera.to_view(V)
    z = view[:, 2]
    bad = np.flatnonzero(~(z > NEAR_EPS))
    if len(bad):
        raise BehindCameraError(bad)
    tan = math.tan(camera.half_fov)
    xn = view[:, 0] / (z * tan)
    yn = view[:, 1] / (z * tan)
    out = np.empty_like(view)
    out[:, 0] = (xn + 1.0) * (camera.width / 2.0)
    out[:, 1] = (1.0 - yn) * (camera.height / 2.0)
    out[:, 2] = z
    return out


def project_jacobian(vertices, camera: Camera) -> np.ndarray:
    """(N, 2, 3) derivative of pixel (x, y) with respect to world position."""
    R = camera.rotation()
    view = camera.to_view(vertices)
    x, y, z = view[:, 0], view[:, 1], view[:, 2]
    tan = math.tan(camera.half_fov)
    sx = camera.width / (2.0 * tan)
    sy = -camera.height / (2.0 * tan)
    J = np.zeros((len(view), 2, 3))
    J[:, 0, 0] = sx / z
    J[:, 0, 2] = -sx * x / z ** 2
    J[:, 1, 1] = sy / z
    J[:, 1, 2] = -sy * y / z ** 2
    return J @ R


# ---------------------------------------------------------------------------
# motion


@dataclass
class MotionTrajectory:
    """Analytic rigid motion over the exposure interval t in [0, 1].

    Parameters by kind:
      translation-x: ``span`` (default 1.0), x(t) = x0 + span * (0.5 - t)
      rotation-y: ``angle`` (default 2 pi), rotation by angle * t about y
      parabolic-composite: rotation by pi t about y plus the parabolic offset
    """

    kind: str = "static"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; expected one of {TRAJECTORY_KINDS}")
        self.params = dict(self.params)

    def affine(self, t):
        """Rotation R and offset T with pose(t) = V @ R.T + T."""
        t = float(t)
        if self.kind == "static":
            return np.eye(3), np.zeros(3)
        if self.kind == "translation-x":
            span = float(self.params.get("span", 1.0))
            return np.eye(3), np.array([span * (0.5 - t), 0.0, 0.0])
        if self.kind == "rotation-y":
            th = float(self.params.get("angle", 2 * math.pi)) * t
            c, s = math.cos(th), math.sin(th)
            return np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]]), np.zeros(3)
        # parabolic-composite: its rotation is written x' = x cos + z sin
        th = math.pi * t
        c, s = math.cos(th), math.sin(th)
        R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        sh = 0.5 - t
        return R, np.array([sh, -4 * sh * sh + 0.5, sh])


def pose_at(trajectory: MotionTrajectory, mesh_or_vertices, t) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    V = mesh_or_vertices.vertices if isinstance(mesh_or_vertices, Mesh) else np.asarray(mesh_or_vertices, float)
    R, T = trajectory.affine(t)
    return V @ R.T + T


def sample_times(k):
    """Sample positions inside one segment: centered for k = 1, else inclusive."""
    if k < 1:
        raise ValueError("samples_per_segment must be >= 1")
    if k == 1:
        return np.array([0.5])
    return np.arange(k, dtype=np.float64) / (k - 1)


@dataclass
class SegmentedMotion:
    """Projected keyframes of a motion, linear in screen space between them.

    ``keyframes[i]`` holds pixel x, pixel y and view depth of every vertex at
    global time ``times[i]``; segment i runs from keyframe i to i + 1.
    """

    keyframes: np.ndarray
    faces: np.ndarray
    samples_per_segment: int
    times: np.ndarray
    world: np.ndarray | None = None
    camera: Camera | None = None
    trajectory: MotionTrajectory | None = None

    def __post_init__(self):
        self.keyframes = np.ascontiguousarray(self.keyframes, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.keyframes.ndim != 3 or self.keyframes.shape[2] != 3 or len(self.keyframes) < 2:
            raise ValueError("keyframes must have shape (n_segments + 1, V, 3)")
        if int(self.samples_per_segment) < 1:
            raise ValueError("samples_per_segment must be >= 1")
        self.samples_per_segment = int(self.samples_per_segment)

    @property
    def n_segments(self):
        return len(self.keyframes) - 1

    @property
    def segments(self):
        return [(self.keyframes[i], self.keyframes[i + 1]) for i in range(self.n_segments)]

    @property
    def total_samples(self):
        return self.n_segments * self.samples_per_segment

    def sample_times(self):
        return sample_times(self.samples_per_segment)

    def global_time(self, seg, t):
        return (seg + t) / self.n_segments

    def interpolate(self, seg, t):
        """Screen-space vertices at local time t of a segment (linear)."""
        a, b = self.keyframes[seg], self.keyframes[seg + 1]
        return (1.0 - t) * a + t * b


def segment(trajectory: MotionTrajectory, mesh: Mesh, camera: Camera, n_segments=1,
            samples_per_segment=1) -> SegmentedMotion:
    """Evaluate the trajectory at t = i / n_segments and project each pose."""
    n_segments = int(n_segments)
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    times = np.arange(n_segments + 1) / n_segments
    world = np.stack([pose_at(trajectory, mesh, t) for t in times])
    kf = np.stack([project(w, camera) for w in world])
    return SegmentedMotion(kf, mesh.faces, samples_per_segment, times, world, camera, trajectory)


def static_motion(mesh: Mesh, camera: Camera) -> SegmentedMotion:
    """Single-segment, single-sample motion of an unmoving mesh."""
    return segment(MotionTrajectory("static"), mesh, camera, 1, 1)
