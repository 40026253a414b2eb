"""Timing harness comparing the fast and naive solvers.

Each configuration renders a unit-scaled, randomly tilted mesh translating
across a front-view camera with K samples. Outputs of both solvers are
checked against each other before anything is timed.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .geometry import Camera, Mesh, MotionTrajectory, load_obj, normalize_unit, rotation_x
from .grad import PixelAdjoint, backward_blur
from .raster import RasterConfig, render_blur
from .scene import ConfigError, Scene, load_json, mesh_from_spec

MODES = ("forward", "forward+backward")
SOLVERS = ("fast", "naive")


class OutputMismatchError(RuntimeError):
    """The two solvers disagree, so their timings would not be comparable."""


def random_rotate_scene(seed, mesh: Mesh = None, width=128, height=128, samples=1) -> Scene:
    """Unit max-norm mesh tilted about x by a seeded angle in [-90, 90] degrees."""
    rng = np.random.default_rng(seed)
    if mesh is None:
        mesh = mesh_from_spec({"builtin": "icosphere", "subdivisions": 4})
    angle = rng.uniform(-90.0, 90.0)
    mesh = normalize_unit(mesh)
    mesh = mesh.with_vertices(mesh.vertices @ rotation_x(math.radians(angle)).T)
    cam = Camera.from_spherical(width=width, height=height)
    return Scene(mesh, cam, MotionTrajectory("translation-x"), 1, samples)


@dataclass
class BenchScenario:
    meshes: list = field(default_factory=lambda: [mesh_from_spec({"builtin": "icosphere", "subdivisions": 4})])
    samples: list = field(default_factory=lambda: [1, 10, 25, 50, 100])
    width: int = 128
    height: int = 128
    reps: int = 5
    warmup: int = 2
    mode: str = "forward+backward"
    seed: int = 0
    threads: int | None = None
    tile_size: int = 8
    rgb_tol: float = 1e-6
    alpha_tol: float = 1e-2

    def __post_init__(self):
        if self.reps < 3:
            raise ConfigError(f"reps must be >= 3, got {self.reps}")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        s = list(self.samples)
        if len(s) < 1 or any(int(k) < 1 for k in s):
            raise ConfigError("samples must be positive counts")
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError(f"samples must be strictly increasing, got {s}")
        self.samples = [int(k) for k in s]
        if not self.meshes:
            raise ConfigError("no benchmark meshes")

    @classmethod
    def from_dict(cls, data, base_dir=None):
        data = dict(data)
        data.pop("schema_version", None)
        meshes = []
        if "obj_dir" in data:
            d = Path(data.pop("obj_dir"))
            if base_dir is not None and not d.is_absolute():
                d = Path(base_dir) / d
            paths = sorted(d.glob("*.obj"))
            if not paths:
                raise ConfigError(f"no .obj files in {d}")
            meshes = [load_obj(p) for p in paths]
        if "mesh" in data:
            meshes.append(mesh_from_spec(data.pop("mesh"), base_dir))
        known = {f for f in cls.__dataclass_fields__} - {"meshes"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown bench keys {sorted(extra)}")
        if meshes:
            data["meshes"] = meshes
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_dict(load_json(path), base_dir=path.parent)


@dataclass
class BenchResult:
    rows: list
    slopes: dict
    speedup: dict
    threads: int
    mode: str
    max_rgb_diff: float
    max_alpha_diff: float
    mean_alpha_diff: float

    def median(self, solver, samples):
        for r in self.rows:
            if r["solver"] == solver and r["samples"] == samples:
                return r["median_ms"]
        raise KeyError((solver, samples))

    def write_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["solver", "samples", "median_ms", "min_ms", "reps", "threads"])
            w.writeheader()
            w.writerows(self.rows)
        return path

    def summary(self):
        return {
            "mode": self.mode,
            "threads": self.threads,
            "slope_ms_per_sample": self.slopes,
            "speedup": {str(k): v for k, v in self.speedup.items()},
            "verification": {"max_rgb_diff": self.max_rgb_diff, "max_alpha_diff": self.max_alpha_diff,
                             "mean_alpha_diff": self.mean_alpha_diff},
        }

    def write_json(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        return path


def _slope(ks, ms):
    if len(ks) < 3:
        return None
    return float(np.polyfit(np.asarray(ks, float), np.asarray(ms, float), 1)[0])


def _workloads(scenario: BenchScenario, k):
    out = []
    for i, mesh in enumerate(scenario.meshes):
        scene = random_rotate_scene(scenario.seed + i, mesh, scenario.width, scenario.height, k)
        sm = scene.motion()
        cfg = RasterConfig.for_camera(scene.camera, tile_size=scenario.tile_size)
        out.append((sm, scene.mesh.colors, cfg))
    return out


def _verify(work, scenario):
    """(max |d rgb|, max |d alpha|, mean |d alpha|) between the two solvers.

    Background alpha of the fast path uses endpoint closest points, so single
    silhouette pixels can differ a lot; the alpha check is on the mean.
    """
    rgb_d = alpha_max = alpha_mean = 0.0
    for sm, colors, cfg in work:
        a = render_blur(sm, colors, cfg, solver="fast")
        b = render_blur(sm, colors, cfg, solver="naive")
        da = np.abs(a.alpha - b.alpha)
        rgb_d = max(rgb_d, float(np.abs(a.rgb - b.rgb).max()))
        alpha_max = max(alpha_max, float(da.max()))
        alpha_mean = max(alpha_mean, float(da.mean()))
    if rgb_d > scenario.rgb_tol or alpha_mean > scenario.alpha_tol:
        raise OutputMismatchError(f"fast and naive outputs differ: max |d rgb| = {rgb_d:.3g} "
                                  f"(tol {scenario.rgb_tol:g}), mean |d alpha| = {alpha_mean:.3g} "
                                  f"(tol {scenario.alpha_tol:g})")
    return rgb_d, alpha_max, alpha_mean


def _run_once(work, solver, mode, adjoints):
    for (sm, colors, cfg), adj in zip(work, adjoints):
        frame = render_blur(sm, colors, cfg, solver=solver, record=mode != "forward")
        if mode != "forward":
            backward_blur(frame, adj)


def run_bench(scenario: BenchScenario, progress=None) -> BenchResult:
    """Median wall time per (solver, K) after verifying both solvers agree."""
    if scenario.threads is not None:
        numba.set_num_threads(int(scenario.threads))
    threads = numba.get_num_threads()
    rng = np.random.default_rng(scenario.seed)
    H, W = scenario.height, scenario.width
    adjoints = [PixelAdjoint(rng.normal(size=(H, W, 3)), rng.normal(size=(H, W)))
                for _ in scenario.meshes]
    rows = []
    diffs = np.zeros(3)
    for k in scenario.samples:
        work = _workloads(scenario, k)
        diffs = np.maximum(diffs, _verify(work, scenario))
        for solver in SOLVERS:
            for _ in range(scenario.warmup):
                _run_once(work, solver, scenario.mode, adjoints)
            times = []
            for _ in range(scenario.reps):
                t0 = time.perf_counter()
                _run_once(work, solver, scenario.mode, adjoints)
                times.append((time.perf_counter() - t0) * 1e3)
            row = {"solver": solver, "samples": k, "median_ms": statistics.median(times),
                   "min_ms": min(times), "reps": scenario.reps, "threads": threads}
            rows.append(row)
            if progress is not None:
                progress(row)
    slopes = {}
    for solver in SOLVERS:
        pts = [(r["samples"], r["median_ms"]) for r in rows if r["solver"] == solver]
        slopes[solver] = _slope([p[0] for p in pts], [p[1] for p in pts])
    med = {(r["solver"], r["samples"]): r["median_ms"] for r in rows}
    speedup = {k: med["naive", k] / med["fast", k] for k in scenario.samples}
    return BenchResult(rows, slopes, speedup, threads, scenario.mode, *map(float, diffs))


def scenario_dict(scenario: BenchScenario):
    d = asdict(scenario)
    d["meshes"] = [{"n_vertices": m.n_vertices, "n_faces": m.n_faces} for m in scenario.meshes]
    return d
