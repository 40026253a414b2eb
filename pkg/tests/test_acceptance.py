"""Acceptance criteria C1-C7 at their stated tolerances.

Each test records one pass/fail line, printed at the end of the run.
"""

import subprocess
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from blurrast.bary import DET_EPS, TrianglePair, eval_bary, naive_weights, precompute_coeffs
from blurrast.bench import BenchScenario, random_rotate_scene, run_bench
from blurrast.geometry import (Camera, MotionTrajectory, cow_proxy, normalize_unit, pose_at, project,
                               sample_times, segment, uv_sphere)
from blurrast.grad import finite_diff_check
from blurrast.optim import psnr, recover_translation, voxel_iou
from blurrast.raster import RasterConfig, render_blur, render_poses
from blurrast.scene import ProblemConfig, Scene

DATA = resources.files("blurrast") / "data"
TESTS = Path(__file__).parent


def test_c1_solver_matches_direct_solve(criterion):
    rng = np.random.default_rng(2024)
    ts = np.linspace(0.0, 1.0, 101)
    t0 = time.perf_counter()
    worst, worst_rel, n_eval = 0.0, 0.0, 0
    for _ in range(1000):
        start = rng.uniform(0, 128, (3, 2))
        end = start + rng.normal(0, 20, (3, 2))
        p = rng.uniform(0, 128, 2)
        pair = TrianglePair.from_points(start, end)
        co = precompute_coeffs(pair, p)
        for t in ts:
            if abs(co.denominator(t)) <= DET_EPS:
                continue
            F = pair.at(t)
            w0, w1, w2, det = naive_weights(F[0, 0], F[1, 0], F[0, 1], F[1, 1], F[0, 2], F[1, 2], *p)
            if abs(det) <= DET_EPS:
                continue
            w = np.array([w0, w1, w2])
            err = float(np.abs(eval_bary(co, t) - w).max())
            worst = max(worst, err)
            worst_rel = max(worst_rel, err / max(1.0, float(np.abs(w).max())))
            n_eval += 1
    wall = time.perf_counter() - t0
    ok = worst < 1e-6 and wall < 5.0
    criterion("C1", ok, f"max |eval - naive| {worst:.2e} (relative to max(1, |w|): {worst_rel:.1e}) "
                        f"over {n_eval} evaluations, {wall:.2f}s")
    assert worst < 1e-6
    assert wall < 5.0


def test_c2_fast_blur_matches_sample_average(criterion):
    mesh = uv_sphere(11, 25)
    assert mesh.n_faces == 500
    scene = random_rotate_scene(7, mesh, 128, 128, 50)
    sm = scene.motion()
    cfg = RasterConfig.for_camera(scene.camera)
    t0 = time.perf_counter()
    fast = render_blur(sm, scene.mesh.colors, cfg, solver="fast")
    poses = [project(pose_at(scene.trajectory, scene.mesh, t), scene.camera) for t in sample_times(50)]
    ref = render_poses(poses, scene.mesh.faces, scene.mesh.colors, cfg)
    wall = time.perf_counter() - t0
    # rgb is premultiplied by coverage, so it is zero off the foreground in both
    d_rgb = float(np.abs(fast.rgb - ref.rgb).max())
    d_alpha = float(np.abs(fast.alpha - ref.alpha).max())
    ok = d_rgb < 1e-6 and d_alpha < 1e-2 and wall < 60
    criterion("C2", ok, f"max |d rgb| {d_rgb:.2e}, max |d alpha| {d_alpha:.3e} "
                        f"(mean {np.abs(fast.alpha - ref.alpha).mean():.2e}), {wall:.1f}s")
    assert d_rgb < 1e-6
    assert d_alpha < 1e-2
    assert wall < 60


def test_c3_gradients_match_finite_differences(criterion):
    scene = Scene.load(DATA / "gradcheck_icosahedron.json")
    assert scene.mesh.n_faces == 20
    t0 = time.perf_counter()
    report = finite_diff_check(scene, h=1e-3, threshold=1e-3)
    wall = time.perf_counter() - t0
    frac = report.skipped_fraction
    ok = report.passed and frac < 0.05 and wall < 120
    criterion("C3", ok, f"max rel err {report.max_rel_err:.2e} over {report.n_checked} coords, "
                        f"{100 * frac:.1f}% skipped, {wall:.1f}s")
    assert frac < 0.05
    assert wall < 120
    assert report.max_rel_err < 1e-3


@pytest.mark.slow
def test_c4_fast_solver_scales_better(criterion):
    scenario = BenchScenario.load(DATA / "bench.json")
    scenario.reps, scenario.warmup = 3, 1
    assert scenario.meshes[0].n_faces == 5120
    t0 = time.perf_counter()
    res = run_bench(scenario)
    wall = time.perf_counter() - t0
    ks = scenario.samples
    speed = res.speedup[50]
    local = {s: [(res.median(s, b) - res.median(s, a)) / (b - a) for a, b in zip(ks, ks[1:])]
             for s in ("fast", "naive")}
    slope_ok = all(f < n for f, n in zip(local["fast"], local["naive"]))
    ok = speed >= 2.0 and slope_ok and wall < 600
    slopes = ", ".join(f"{a}-{b}: {f:.1f}/{n:.1f}"
                       for a, b, f, n in zip(ks, ks[1:], local["fast"], local["naive"]))
    criterion("C4", ok, f"naive/fast at K=50 {speed:.2f}x, ms per sample fast/naive [{slopes}], {wall:.0f}s")
    assert slope_ok
    assert wall < 600
    assert speed >= 2.0


def test_c5_segments_beat_samples_at_equal_budget(criterion):
    mesh = normalize_unit(cow_proxy(3))
    cam = Camera.from_spherical(elevation=30, width=128, height=128)
    traj = MotionTrajectory("rotation-y")
    cfg = RasterConfig.for_camera(cam)
    t0 = time.perf_counter()
    ref = render_poses([project(pose_at(traj, mesh, t), cam) for t in np.arange(240) / 239],
                       mesh.faces, mesh.colors, cfg).rgba()
    many = psnr(render_blur(segment(traj, mesh, cam, 12, 20), mesh.colors, cfg).rgba(), ref)
    few = psnr(render_blur(segment(traj, mesh, cam, 6, 40), mesh.colors, cfg).rgba(), ref)
    wall = time.perf_counter() - t0
    ok = many > few and many > 30.0
    criterion("C5", ok, f"PSNR 12x20 {many:.2f} dB vs 6x40 {few:.2f} dB, {wall:.1f}s")
    assert many > few
    assert many > 30.0


@pytest.fixture(scope="module")
def recoveries():
    out = {}
    t0 = time.perf_counter()
    for name in ("cube", "cow"):
        cfg = ProblemConfig.load(DATA / f"recover_{name}.json")
        prob = cfg.problem
        res = recover_translation(prob, cfg.weights)
        scores = [psnr(prob.render(res.mesh.vertices, res.mesh.colors, v).rgba(), t)
                  for v, t in enumerate(prob.targets)]
        out[name] = (voxel_iou(res.mesh, cfg.target_mesh), float(np.mean(scores)), res)
    out["wall"] = time.perf_counter() - t0
    return out


@pytest.mark.slow
def test_c6_recovery_from_blurred_views(criterion, recoveries):
    parts, ok = [], recoveries["wall"] < 1200
    for name in ("cube", "cow"):
        iou, score, _ = recoveries[name]
        ok = ok and iou > 0.6 and score > 25.0
        parts.append(f"{name} IoU {iou:.3f} PSNR {score:.2f} dB")
    drop = recoveries["cube"][2].losses("L_img")
    parts.append(f"cube L_img final/initial {drop[-1] / drop[0]:.2f}")
    criterion("C6", ok, ", ".join(parts) + f", {recoveries['wall']:.0f}s")
    assert recoveries["wall"] < 1200
    for name in ("cube", "cow"):
        iou, score, _ = recoveries[name]
        assert iou > 0.6, name
        assert score > 25.0, name


# frozen from the pilot run (final / initial = 0.39)
LOSS_DROP = 0.45


@pytest.mark.slow
def test_c6_cube_image_loss_drops(recoveries):
    losses = recoveries["cube"][2].losses("L_img")
    assert losses[-1] < LOSS_DROP * losses[0]


def test_c7_property_suite_is_fast(criterion):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           str(TESTS / "test_properties.py")], capture_output=True, text=True)
    wall = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else ""
    ok = proc.returncode == 0 and wall < 60
    criterion("C7", ok, f"{tail}, {wall:.1f}s wall")
    assert proc.returncode == 0, proc.stdout[-2000:]
    assert wall < 60
