import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from anisdf.autodiff import DTYPE
from anisdf.renderer import Camera, look_at
from anisdf.scenegen import (
    SCENE_KINDS,
    DatasetError,
    analytic_normals,
    analytic_sdf,
    emit_dataset,
    environment,
    ground_truth_render,
    load_dataset,
    make_scene,
    sphere_trace,
    split_indices,
    to_uint8,
)


def test_sdf_examples():
    assert analytic_sdf(make_scene("sphere"), [[1.0, 0, 0]])[0] == 0.5
    assert analytic_sdf(make_scene("torus"), [[0.4, 0, 0], [0, -0.4, 0]]).tolist() == pytest.approx([-0.1, -0.1], abs=1e-15)
    with pytest.raises(ValueError):
        make_scene("teapot")


@pytest.mark.parametrize("kind", ["sphere", "torus", "mirror_sphere"])
def test_exact_primitives_have_unit_gradient(kind):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (1000, 3))
    x = x[np.abs(np.linalg.norm(x[:, :2], axis=1) - 0.4) > 1e-3] if kind == "torus" else x
    n = torch.as_tensor(x, dtype=DTYPE).requires_grad_(True)
    (g,) = torch.autograd.grad(make_scene(kind).sdf(n).sum(), n)
    assert (g.norm(dim=-1) - 1).abs().max() < 1e-9


def test_analytic_normals_are_unit():
    n = analytic_normals(make_scene("torus"), np.random.default_rng(1).uniform(-1, 1, (50, 3)))
    assert np.abs(np.linalg.norm(n, axis=1) - 1).max() < 1e-12


def test_miss_shows_background_and_env():
    scene = make_scene("sphere")
    cam = Camera(look_at([0.0, -2.5, 0.0], target=(3.0, -2.5, 0.0)), 0.5, 8, 8)
    gt = ground_truth_render(scene, cam, supersample=1, background=(0.1, 0.2, 0.3))
    assert not gt["mask"].any()
    assert np.allclose(gt["rgb"], [0.1, 0.2, 0.3])
    env = ground_truth_render(scene, cam, supersample=1, background="environment")
    from anisdf.renderer import image_rays

    _, d = image_rays(cam)
    np.testing.assert_allclose(env["rgb"].reshape(-1, 3), environment(d).numpy(), atol=1e-15)


def test_mirror_center_pixel_reflects_back():
    scene = make_scene("mirror_sphere")
    cam = Camera(look_at([0.0, -2.5, 0.0]), 0.5, 33, 33)
    gt = ground_truth_render(scene, cam, supersample=1)
    expect = environment(torch.tensor([0.0, -1.0, 0.0], dtype=DTYPE)).numpy()
    np.testing.assert_allclose(gt["rgb"][16, 16], expect, atol=1e-9)


def test_silhouette_radius_matches_projection():
    scene = make_scene("sphere")
    dist, res, fov = 2.5, 101, 0.6
    cam = Camera(look_at([0.0, -dist, 0.0]), fov, res, res)
    gt = ground_truth_render(scene, cam, supersample=1)
    measured = math.sqrt(gt["mask"].sum() / math.pi)
    expect = cam.focal * math.tan(math.asin(0.5 / dist))
    assert abs(measured - expect) < 1.0


def test_sphere_trace_converges_fast():
    scene = make_scene("sphere")
    rng = np.random.default_rng(2)
    o = rng.normal(size=(500, 3))
    o = 2.5 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = -o / np.linalg.norm(o, axis=1, keepdims=True)
    hit, t, steps = sphere_trace(scene, o, d)
    assert hit.all() and steps.max() <= 64
    np.testing.assert_allclose(t, 2.0, atol=1e-5)


def test_split_ratios():
    s = split_indices(20)
    assert (len(s["train"]), len(s["val"]), len(s["test"])) == (16, 2, 2)
    assert sorted(s["train"] + s["val"] + s["test"]) == list(range(20))


def test_scene_kinds_construct():
    for k in SCENE_KINDS:
        sc = make_scene(k)
        assert np.isfinite(sc.sdf_numpy(np.zeros((1, 3)))).all()
    assert len(make_scene("thin_rods").rods) == 4


@pytest.fixture(scope="module")
def emitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("emit")
    return root, emit_dataset("sphere", 10, 12, root, seed=3, supersample=1)


def test_emit_and_round_trip(emitted):
    root, splits = emitted
    for split, ds in splits.items():
        doc = json.loads((root / f"transforms_{split}.json").read_text())
        again = load_dataset(root, split)
        assert len(again.frames) == len(doc["frames"])
        for fr, raw in zip(again.frames, doc["frames"]):
            assert np.array_equal(fr.c2w, np.asarray(raw["transform_matrix"]))
            r = fr.c2w[:3, :3]
            assert np.abs(r.T @ r - np.eye(3)).max() < 1e-6
        assert np.array_equal(again.images, ds.images)
        assert again.meta["scene"] == "sphere"


def test_rerender_gives_identical_png_bytes(emitted, tmp_path):
    root, splits = emitted
    ds = splits["train"]
    cam = ds.camera(0)
    gt = ground_truth_render(make_scene("sphere"), cam, supersample=1)
    rgba = np.concatenate([gt["rgb_fg"], gt["alpha"][..., None]], -1)
    p = tmp_path / "again.png"
    Image.fromarray(to_uint8(rgba), "RGBA").save(p)
    assert p.read_bytes() == ds.frames[0].image_path.read_bytes()


def test_loader_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "train")
    (tmp_path / "transforms_train.json").write_text("{not json")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "train")
    (tmp_path / "transforms_train.json").write_text(json.dumps({"camera_angle_x": 0.5, "frames": [{"file_path": "./x"}]}))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "train")


def test_nerf_synthetic_layout(tmp_path):
    """The public layout: extension-less file_path, 4x4 matrices, 100 train frames."""
    frames = []
    (tmp_path / "train").mkdir()
    for i in range(100):
        Image.fromarray(np.zeros((4, 4, 4), np.uint8), "RGBA").save(tmp_path / "train" / f"r_{i}.png")
        frames.append({"file_path": f"./train/r_{i}", "rotation": 0.0, "transform_matrix": np.eye(4).tolist()})
    (tmp_path / "transforms_train.json").write_text(json.dumps({"camera_angle_x": 0.69, "frames": frames}))
    ds = load_dataset(tmp_path, "train")
    assert len(ds.frames) == 100 and ds.images.shape == (100, 4, 4, 4)


@pytest.mark.skipif(not os.environ.get("ANISDF_LEGO"), reason="set ANISDF_LEGO to a nerf_synthetic/lego directory")
def test_real_lego_parses():
    ds = load_dataset(Path(os.environ["ANISDF_LEGO"]), "train", load_images=False)
    assert len(ds.frames) == 100
