"""blurrast command line: render, optimize, bench, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
Command-line flags take precedence over values in the JSON file, and
--threads falls back to the BLURRAST_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numba

from .bench import BenchScenario, OutputMismatchError, run_bench, scenario_dict
from .geometry import BehindCameraError, ObjParseError, save_obj
from .grad import finite_diff_check, grad_image
from .image_io import ImageFormatError, save_frame
from .optim import NonFiniteError, psnr, recover_translation, voxel_iou
from .scene import ConfigError, ProblemConfig, Scene

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


def _set_threads(n):
    if n is None:
        env = os.environ.get("BLURRAST_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError:
                raise UsageError(f"BLURRAST_THREADS must be an integer, got {env!r}") from None
    if n is not None:
        if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
            raise UsageError(f"--threads must lie in [1, {numba.config.NUMBA_NUM_THREADS}], got {n}")
        numba.set_num_threads(n)
    return numba.get_num_threads()


def _load_scene(args):
    scene = Scene.load(args.scene)
    return scene.with_overrides(samples_per_segment=args.samples, n_segments=args.segments,
                                delta=args.delta)


def _emit(paths):
    for p in paths:
        print(p)


def cmd_render(args):
    scene = _load_scene(args)
    out = _out_dir(args.out)
    frame = scene.render()
    paths = save_frame(frame, out / "render")
    if args.grad:
        paths.append(grad_image(scene).write_png(out / "grad.png"))
    _emit(paths)
    return EXIT_OK


def cmd_optimize(args):
    cfg = ProblemConfig.load(args.problem, seed=args.seed, samples_per_segment=args.samples,
                             n_segments=args.segments, delta=args.delta)
    out = _out_dir(args.out)
    problem = cfg.problem
    paths = []
    t0 = time.perf_counter()

    def progress(it, mesh, row):
        done = it + 1
        if done % 10 == 0 or done == problem.iterations:
            print(f"iter {done:5d}  loss {row['total']:.6f}  wall {time.perf_counter() - t0:8.2f}s",
                  file=sys.stderr, flush=True)
        if cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0 and done < problem.iterations:
            paths.append(save_obj(mesh, out / f"checkpoint_{done:05d}.obj"))

    result = recover_translation(problem, cfg.weights, callback=progress)
    paths.append(save_obj(result.mesh, out / "mesh.obj"))
    hist = out / "history.csv"
    with open(hist, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iter", "L_img", "L_s", "L_L", "total", "wall_ms"])
        w.writeheader()
        w.writerows(result.history)
    paths.append(hist)
    summary = {"iterations": len(result.history), "wall_s": result.wall_time,
               "final_loss": result.history[-1]["total"] if result.history else None}
    scores = [psnr(problem.render(result.mesh.vertices, result.mesh.colors, v).rgba(), t)
              for v, t in enumerate(problem.targets)]
    summary["psnr"] = float(sum(scores) / len(scores))
    if cfg.target_mesh is not None:
        summary["iou"] = voxel_iou(result.mesh, cfg.target_mesh)
    js = out / "summary.json"
    js.write_text(json.dumps(summary, indent=2) + "\n")
    paths.append(js)
    _emit(paths)
    return EXIT_OK


def cmd_bench(args):
    scenario = BenchScenario.load(args.bench)
    if args.threads is not None or os.environ.get("BLURRAST_THREADS"):
        scenario.threads = numba.get_num_threads()
    if args.seed is not None:
        scenario.seed = args.seed
    out = _out_dir(args.out)

    def progress(row):
        print(f"{row['solver']:>5}  K={row['samples']:<4d} median {row['median_ms']:9.2f} ms",
              file=sys.stderr, flush=True)

    result = run_bench(scenario, progress)
    csv_path = result.write_csv(out / "bench.csv")
    summary = result.summary()
    summary["scenario"] = scenario_dict(scenario)
    js = out / "bench.json"
    js.write_text(json.dumps(summary, indent=2) + "\n")
    _emit([csv_path, js])
    return EXIT_OK


def cmd_gradcheck(args):
    scene = _load_scene(args)
    report = finite_diff_check(scene, h=args.h, threshold=args.fd_threshold)
    print(f"max relative error {report.max_rel_err:.3e} over {report.n_checked} coordinates "
          f"({report.n_skipped} skipped, {report.n_flat} flat)", file=sys.stderr)
    if args.out is not None:
        _emit([report.write_json(_out_dir(args.out) / "gradcheck.json")])
    if not report.passed:
        print(f"error: gradient check failed, {report.max_rel_err:.3e} >= {args.fd_threshold:g}",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="blurrast", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (overrides the file)")
    common.add_argument("--threads", type=int, help="worker threads (default: BLURRAST_THREADS or all cores)")
    common.add_argument("--samples", type=int, help="samples per segment")
    common.add_argument("--segments", type=int, help="keyframe segments")
    common.add_argument("--delta", type=float, help="soft coverage width")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", parents=[common], help="render a blurred image")
    r.add_argument("scene")
    r.add_argument("--out", default=".", help="output directory")
    r.add_argument("--grad", action="store_true", help="also write a gradient visualization")
    r.set_defaults(func=cmd_render)

    o = sub.add_parser("optimize", parents=[common], help="recover a mesh from blurred views")
    o.add_argument("problem")
    o.add_argument("--out", default=".", help="output directory")
    o.set_defaults(func=cmd_optimize)

    b = sub.add_parser("bench", parents=[common], help="time fast vs naive solvers")
    b.add_argument("bench")
    b.add_argument("--out", default=".", help="output directory")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("scene")
    g.add_argument("--out", help="write gradcheck.json here")
    g.add_argument("--fd-threshold", type=float, default=1e-3, help="max relative error (default 1e-3)")
    g.add_argument("--h", type=float, default=1e-3, help="central-difference step")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
        return args.func(args)
    except (UsageError, ConfigError, ObjParseError, ImageFormatError, BehindCameraError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError, OutputMismatchError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
