"""Scene description (mesh, camera, motion, sampling) and its JSON form.

Scene JSON, ``schema_version`` 1::

    {
      "schema_version": 1,
      "mesh": {"builtin": "icosphere", "subdivisions": 2}  or  {"obj": "path.obj"},
      "normalize": false,
      "rotate_x_deg": 0.0,
      "camera": {"distance": 2.232, "elevation": 0, "azimuth": 0,
                 "half_fov": 30, "width": 128, "height": 128},
      "trajectory": {"kind": "rotation-y", "params": {}},
      "n_segments": 12,
      "samples_per_segment": 5,
      "delta": 1e-4,
      "solver": "fast",
      "seed": 0
    }

Relative paths resolve against the JSON file's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import (Camera, Mesh, MotionTrajectory, cow_proxy, cube, icosphere, load_obj,
                       normalize_unit, rotation_x, segment, uv_sphere)
from .raster import RasterConfig, render_blur

SCHEMA_VERSION = 1

BUILTIN_MESHES = {
    "icosahedron": lambda **kw: icosphere(0, **kw),
    "icosphere": icosphere,
    "uv_sphere": uv_sphere,
    "cube": cube,
    "cow_proxy": cow_proxy,
}


class ConfigError(ValueError):
    """Invalid or unreadable configuration file."""


def load_json(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version!r}")
    return data


def mesh_from_spec(spec, base_dir=None) -> Mesh:
    if not isinstance(spec, dict):
        raise ConfigError("mesh must be an object")
    if "obj" in spec:
        p = Path(spec["obj"])
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        if not p.exists():
            raise ConfigError(f"mesh file not found: {p}")
        return load_obj(p)
    name = spec.get("builtin")
    if name not in BUILTIN_MESHES:
        raise ConfigError(f"unknown builtin mesh {name!r}; choose from {sorted(BUILTIN_MESHES)}")
    kw = {k: v for k, v in spec.items() if k != "builtin"}
    try:
        return BUILTIN_MESHES[name](**kw)
    except TypeError as e:
        raise ConfigError(f"bad parameters for mesh {name!r}: {e}") from None


def camera_from_spec(spec) -> Camera:
    spec = dict(spec or {})
    extra = set(spec) - {"distance", "elevation", "azimuth", "half_fov", "width", "height"}
    if extra:
        raise ConfigError(f"unknown camera keys {sorted(extra)}")
    try:
        return Camera.from_spherical(
            distance=float(spec.get("distance", 2.232)),
            elevation=float(spec.get("elevation", 0.0)),
            azimuth=float(spec.get("azimuth", 0.0)),
            half_fov=float(spec.get("half_fov", 30.0)),
            width=int(spec.get("width", 128)),
            height=int(spec.get("height", 128)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad camera: {e}") from None


def camera_to_spec(cam: Camera):
    eye = np.asarray(cam.eye, dtype=np.float64)
    d = float(np.linalg.norm(eye))
    return {
        "distance": d,
        "elevation": math.degrees(math.asin(eye[1] / d)),
        "azimuth": math.degrees(math.atan2(eye[0], -eye[2])),
        "half_fov": math.degrees(cam.half_fov),
        "width": cam.width,
        "height": cam.height,
    }


@dataclass
class Scene:
    mesh: Mesh
    camera: Camera
    trajectory: MotionTrajectory
    n_segments: int = 1
    samples_per_segment: int = 1
    delta: float = 1e-4
    solver: str = "fast"
    use_cutoff: bool = True

    def __post_init__(self):
        if int(self.n_segments) < 1 or int(self.samples_per_segment) < 1:
            raise ConfigError("n_segments and samples_per_segment must be >= 1")
        if self.solver not in ("fast", "naive"):
            raise ConfigError(f"solver must be 'fast' or 'naive', got {self.solver!r}")
        self.n_segments = int(self.n_segments)
        self.samples_per_segment = int(self.samples_per_segment)

    @property
    def config(self) -> RasterConfig:
        return RasterConfig.for_camera(self.camera, delta=self.delta, use_cutoff=self.use_cutoff)

    def motion(self, vertices=None):
        mesh = self.mesh if vertices is None else self.mesh.with_vertices(vertices)
        return segment(self.trajectory, mesh, self.camera, self.n_segments, self.samples_per_segment)

    def render(self, vertices=None, colors=None, record=False, solver=None):
        colors = self.mesh.colors if colors is None else colors
        return render_blur(self.motion(vertices), colors, self.config, solver=solver or self.solver,
                           record=record)

    def with_overrides(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, data, base_dir=None):
        data = dict(data)
        data.pop("schema_version", None)
        data.pop("seed", None)
        try:
            mesh = mesh_from_spec(data.pop("mesh"), base_dir)
        except KeyError:
            raise ConfigError("scene needs a 'mesh' entry") from None
        if data.pop("normalize", False):
            mesh = normalize_unit(mesh)
        rot = float(data.pop("rotate_x_deg", 0.0))
        if rot:
            mesh = mesh.with_vertices(mesh.vertices @ rotation_x(math.radians(rot)).T)
        camera = camera_from_spec(data.pop("camera", {}))
        tr = data.pop("trajectory", {"kind": "static"})
        try:
            trajectory = MotionTrajectory(tr.get("kind", "static"), tr.get("params", {}))
        except (ValueError, AttributeError) as e:
            raise ConfigError(str(e)) from None
        known = {"n_segments", "samples_per_segment", "delta", "solver", "use_cutoff"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown scene keys {sorted(extra)}")
        try:
            return cls(mesh, camera, trajectory, **data)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_dict(load_json(path), base_dir=path.parent)


# ---------------------------------------------------------------------------
# recovery problems
#
# Problem JSON, schema_version 1:
#
#   template    mesh spec (default icosphere, 3 subdivisions, radius 0.5)
#   targets     {"images": [paths]} or {"mesh": spec, "normalize": bool, "scale": s};
#               a mesh target is rendered through the same cameras and motion
#   cameras     list of camera specs, or {"views": n, "width": w, "height": h,
#               "elevations": [...]} for the standard translation ring
#   trajectory  as in scene files (default translation-x)
#   weights     {"lambda_s": ..., "lambda_l": ...}
#   iterations, batch_size, n_segments, samples_per_segment, delta, solver,
#   seed, checkpoint_every


@dataclass
class ProblemConfig:
    problem: object
    weights: object
    target_mesh: Mesh | None
    checkpoint_every: int

    @classmethod
    def from_dict(cls, data, base_dir=None, **overrides):
        from .image_io import read_image
        from .optim import LossWeights, RecoveryProblem, default_cameras

        data = dict(data)
        data.pop("schema_version", None)
        known = {"template", "targets", "cameras", "trajectory", "weights", "iterations", "batch_size",
                 "n_segments", "samples_per_segment", "delta", "solver", "seed", "checkpoint_every"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown problem keys {sorted(extra)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        template = mesh_from_spec(data.get("template", {"builtin": "icosphere", "subdivisions": 3,
                                                       "radius": 0.5}), base_dir)
        cams = data.get("cameras", {})
        if isinstance(cams, dict):
            try:
                cameras = default_cameras(int(cams.get("width", 128)), int(cams.get("height", 128)),
                                          int(cams.get("views", 8)),
                                          tuple(cams.get("elevations", (30.0, -30.0))))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad cameras: {e}") from None
        else:
            cameras = [camera_from_spec(c) for c in cams]
        if not cameras:
            raise ConfigError("problem needs at least one camera")
        tr = data.get("trajectory", {"kind": "translation-x"})
        try:
            trajectory = MotionTrajectory(tr.get("kind", "translation-x"), tr.get("params", {}))
            weights = LossWeights(**data.get("weights", {}))
        except (TypeError, ValueError, AttributeError) as e:
            raise ConfigError(str(e)) from None
        n_seg = int(data.get("n_segments", 1))
        spp = int(data.get("samples_per_segment", 10))
        delta = float(data.get("delta", 1e-4))
        solver = data.get("solver", "fast")
        tspec = data.get("targets")
        target_mesh = None
        if not isinstance(tspec, dict):
            raise ConfigError("problem needs a 'targets' object")
        if "images" in tspec:
            paths = [Path(p) if base_dir is None or Path(p).is_absolute() else Path(base_dir) / p
                     for p in tspec["images"]]
            missing = [str(p) for p in paths if not p.exists()]
            if missing:
                raise ConfigError(f"target image not found: {missing[0]}")
            targets = [read_image(p) for p in paths]
        elif "mesh" in tspec:
            target_mesh = mesh_from_spec(tspec["mesh"], base_dir)
            if tspec.get("normalize", False):
                target_mesh = normalize_unit(target_mesh)
            scale = float(tspec.get("scale", 1.0))
            if scale != 1.0:
                target_mesh = target_mesh.with_vertices(target_mesh.vertices * scale)
            targets = []
            for cam in cameras:
                sm = segment(trajectory, target_mesh, cam, n_seg, spp)
                cfg = RasterConfig.for_camera(cam, delta=delta)
                targets.append(render_blur(sm, target_mesh.colors, cfg, solver=solver).rgba())
        else:
            raise ConfigError("targets needs 'images' or 'mesh'")
        try:
            problem = RecoveryProblem(targets, cameras, trajectory, template,
                                      int(data.get("iterations", 500)), int(data.get("batch_size", 8)),
                                      n_seg, spp, delta, solver, int(data.get("seed", 0)))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return cls(problem, weights, target_mesh, int(data.get("checkpoint_every", 100)))

    @classmethod
    def load(cls, path, **overrides):
        path = Path(path)
        return cls.from_dict(load_json(path), base_dir=path.parent, **overrides)
