import json
import subprocess
import sys

import numpy as np
import pytest

from anisdf.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY = [
    "--steps", "4", "--batch-rays", "16",
    "--set", "grid.table_size=1024", "--set", "geometry.hidden_width=16",
    "--set", "appearance.view_width=8", "--set", "appearance.ref_width=8",
    "--set", "appearance.weight_width=8", "--set", "appearance.fpar_width=8",
    "--set", "render.n_uniform=12", "--set", "render.n_importance=4", "--set", "render.importance_rounds=1",
    "--progress", "0",
]  # fmt: skip


def test_exit_codes_of_installed_script():
    run = lambda *a: subprocess.run([sys.executable, "-m", "anisdf.cli", *a], capture_output=True, text=True)
    assert run("--help").returncode == 0
    assert run().returncode == 1
    assert run("frobnicate").returncode == 1
    assert run("render", "--checkpoint", "/nonexistent.ckpt", "--out", "/tmp/x").returncode == 2


def test_help_lists_commands(capsys):
    assert main(["--help"]) == EXIT_OK
    out = capsys.readouterr().out
    for cmd in ("gen-scene", "train", "render", "extract-mesh", "eval-nvs", "eval-geom", "grad-check"):
        assert cmd in out


def test_print_config_reflects_overrides(capsys, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("steps = 9\nbatch_rays = 32\n")
    assert main(["train", "--config", str(cfg), "--batch-rays", "8", "--seed", "5", "--print-config"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "steps = 9" in out and "batch_rays = 8" in out and "seed = 5" in out


def test_usage_errors(tmp_path, capsys):
    assert main(["train", "--set", "nope=1", "--dataset", "x"]) == EXIT_USAGE
    assert main(["train", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["gen-scene", "teapot", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["eval-geom", "--mesh", "m.obj"]) == EXIT_USAGE


def test_runtime_errors(tmp_path):
    assert main(["extract-mesh", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "m.obj")]) == EXIT_RUNTIME
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 20)
    assert main(["render", "--checkpoint", str(bad), "--out", str(tmp_path)]) == EXIT_RUNTIME


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert main(["gen-scene", "sphere", "--views", "6", "--res", "12", "--supersample", "1", "--out", str(data)]) == EXIT_OK
    assert main(["train", "--dataset", str(data), "--out", str(run), *TINY]) == EXIT_OK
    return root, data, run


def test_train_outputs(pipeline):
    _, _, run = pipeline
    assert (run / "checkpoint.ckpt").exists()
    header = (run / "train_log.csv").read_text().splitlines()[0]
    assert header == "step,rgb,eik,curv,orient,alpha,total,s"


def test_render_writes_png_and_raw(pipeline):
    root, data, run = pipeline
    out = root / "renders"
    assert main(["render", "--checkpoint", str(run / "checkpoint.ckpt"), "--split", "test", "--views", "0", "--out", str(out)]) == EXIT_OK
    depth = np.fromfile(out / "test_000_depth.f32", dtype="<f4")
    normal = np.fromfile(out / "test_000_normal.f32", dtype="<f4")
    assert depth.size == 144 and normal.size == 432
    assert (out / "test_000.png").exists() and (out / "test_000_normal.png").exists()
    assert main(["render", "--checkpoint", str(run / "checkpoint.ckpt"), "--views", "7", "--out", str(out)]) == EXIT_USAGE


def test_mesh_and_metric_reports(pipeline, capsys):
    root, _, run = pipeline
    mesh = root / "m.ply"
    assert main(["extract-mesh", "--checkpoint", str(run / "checkpoint.ckpt"), "--resolution", "32", "--out", str(mesh)]) == EXIT_OK
    rep = root / "geom.json"
    args = ["eval-geom", "--mesh", str(mesh), "--analytic-scene", "sphere", "--reference-resolution", "48", "--samples", "2000", "--out", str(rep)]
    assert main(args) == EXIT_OK
    doc = json.loads(rep.read_text())
    docs = doc if isinstance(doc, list) else [doc]
    for d in docs:
        assert set(d) >= {"metric", "value", "variant", "n_samples", "seed"}
    assert docs[0]["metric"] == "chamfer" and docs[0]["value"] < 0.1
    nvs = root / "nvs.json"
    assert main(["eval-nvs", "--checkpoint", str(run / "checkpoint.ckpt"), "--out", str(nvs)]) == EXIT_OK
    reports = json.loads(nvs.read_text())
    assert {r["metric"] for r in reports} == {"psnr", "normal_mae"}


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seed", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "max relative error" in out
