import csv
import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import pytest

from blurrast.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from blurrast.geometry import load_obj

DATA = resources.files("blurrast") / "data"


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


@pytest.fixture
def tiny_scene(tmp_path):
    return write_json(tmp_path / "scene.json", {
        "schema_version": 1,
        "mesh": {"builtin": "icosphere", "subdivisions": 1, "radius": 0.6},
        "camera": {"elevation": 20, "width": 24, "height": 24},
        "trajectory": {"kind": "rotation-y"},
        "n_segments": 4,
        "samples_per_segment": 2,
    })


def test_render(tmp_path, tiny_scene, capsys):
    out = tmp_path / "out"
    assert main(["render", str(tiny_scene), "--out", str(out), "--grad", "--samples", "3"]) == EXIT_OK
    printed = capsys.readouterr().out.split()
    assert {Path(p).name for p in printed} == {"render.png", "render.rfi", "grad.png"}
    assert all(Path(p).exists() for p in printed)


def test_render_bundled(tmp_path):
    scene = DATA / "translation_cube.json"
    assert main(["render", str(scene), "--out", str(tmp_path), "--samples", "4"]) == EXIT_OK


def test_config_errors(tmp_path, tiny_scene, capsys):
    assert main(["render", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["render", str(bad)]) == EXIT_CONFIG
    assert main(["render", str(tiny_scene), "--out", str(tmp_path), "--threads", "0"]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_env_threads(monkeypatch, tiny_scene, tmp_path):
    monkeypatch.setenv("BLURRAST_THREADS", "x")
    assert main(["render", str(tiny_scene), "--out", str(tmp_path)]) == EXIT_CONFIG
    monkeypatch.setenv("BLURRAST_THREADS", "1")
    assert main(["render", str(tiny_scene), "--out", str(tmp_path)]) == EXIT_OK


def test_gradcheck_exit_codes(tmp_path, capsys):
    scene = str(DATA / "gradcheck_icosahedron.json")
    assert main(["gradcheck", scene, "--h", "2e-6", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["max_rel_err"] < 1e-3
    # an impossible threshold is a numerical failure
    assert main(["gradcheck", scene, "--h", "2e-6", "--fd-threshold", "1e-12"]) == EXIT_NUMERIC


def test_bench_cli(tmp_path):
    cfg = write_json(tmp_path / "bench.json", {
        "schema_version": 1, "mesh": {"builtin": "icosphere", "subdivisions": 1},
        "samples": [1, 2, 3], "width": 24, "height": 24, "reps": 3, "warmup": 0})
    assert main(["bench", str(cfg), "--out", str(tmp_path), "--threads", "1"]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert len(rows) == 6 and {r["threads"] for r in rows} == {"1"}
    summary = json.loads((tmp_path / "bench.json").read_text())
    assert summary["scenario"]["reps"] == 3


def test_bench_rejects_one_rep(tmp_path):
    cfg = write_json(tmp_path / "bench.json", {"reps": 1})
    assert main(["bench", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_optimize(tmp_path):
    prob = write_json(tmp_path / "prob.json", {
        "schema_version": 1,
        "template": {"builtin": "icosphere", "subdivisions": 1, "radius": 0.4},
        "targets": {"mesh": {"builtin": "cube"}, "normalize": True, "scale": 0.5},
        "cameras": {"views": 2, "width": 20, "height": 20},
        "trajectory": {"kind": "translation-x", "params": {"span": 0.5}},
        "iterations": 4, "batch_size": 2, "samples_per_segment": 2, "checkpoint_every": 2,
    })
    out = tmp_path / "run"
    assert main(["optimize", str(prob), "--out", str(out)]) == EXIT_OK
    assert (out / "checkpoint_00002.obj").exists()
    assert load_obj(out / "mesh.obj").n_faces == 80
    hist = list(csv.DictReader(open(out / "history.csv")))
    assert len(hist) == 4
    summary = json.loads((out / "summary.json").read_text())
    assert {"psnr", "iou", "iterations"} <= set(summary)


def test_optimize_image_targets(tmp_path):
    from blurrast.image_io import write_rfi
    import numpy as np
    write_rfi(tmp_path / "t0.rfi", np.zeros((12, 12, 4)))
    prob = write_json(tmp_path / "prob.json", {
        "targets": {"images": ["t0.rfi"]},
        "cameras": [{"width": 12, "height": 12}],
        "template": {"builtin": "icosahedron", "radius": 0.3},
        "iterations": 2, "samples_per_segment": 1,
    })
    assert main(["optimize", str(prob), "--out", str(tmp_path / "o")]) == EXIT_OK
    missing = write_json(tmp_path / "p2.json", {"targets": {"images": ["nope.png"]}})
    assert main(["optimize", str(missing)]) == EXIT_CONFIG


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "blurrast.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("render", "optimize", "bench", "gradcheck"):
        assert cmd in r.stdout
