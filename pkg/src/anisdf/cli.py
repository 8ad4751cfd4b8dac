"""``anisdf`` command line: scene generation, training, rendering, meshing, evaluation, gradient checks.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("anisdf")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        p = Path(out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_scene(a) -> int:
    from .scenegen import SCENE_KINDS, emit_dataset

    if a.kind not in SCENE_KINDS:
        raise UsageError(f"unknown scene kind {a.kind!r}; choose from {', '.join(SCENE_KINDS)}")
    sets = emit_dataset(a.kind, a.views, a.res, a.out, seed=a.seed or 0, supersample=a.supersample)
    for split, ds in sets.items():
        print(f"{split}: {len(ds.frames)} views -> {Path(a.out) / f'transforms_{split}.json'}")
    return EXIT_OK


def _train_config(a):
    from .trainer import load_config, parse_override

    overrides: list[str] = list(a.set or [])
    flags = {
        "dataset": a.dataset,
        "out_dir": a.out,
        "steps": a.steps,
        "batch_rays": a.batch_rays,
        "lr": a.lr,
        "seed": a.seed,
    }
    for key, val in flags.items():
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    for item in overrides:
        parse_override(item)  # surface malformed items before reading the file
    return load_config(a.config, overrides)


def cmd_train(a) -> int:
    from .trainer import dump_config, train

    cfg = _train_config(a)
    if a.print_config:
        print(dump_config(cfg), end="")
        return EXIT_OK
    if not cfg.dataset and not a.resume:
        raise UsageError("train needs --dataset (or dataset = ... in the config)")
    res = train(cfg, resume=a.resume, progress_every=a.progress)
    doc = {"checkpoint": str(res.checkpoint), "log": str(res.log), "steps": res.steps, "seconds": round(res.seconds, 3), "cpu_seconds": round(res.cpu_seconds, 3)}
    doc.update(res.metrics)
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_render(a) -> int:
    from PIL import Image

    from .renderer import render_image
    from .scenegen import load_dataset, to_uint8
    from .trainer import load_model

    model, cfg = load_model(a.checkpoint)
    ds = load_dataset(a.dataset or cfg.dataset, a.split, downscale=a.downscale or cfg.downscale)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    views = a.views if a.views else range(len(ds.frames))
    for i in views:
        if not 0 <= i < len(ds.frames):
            raise UsageError(f"view {i} out of range (split has {len(ds.frames)})")
        r = render_image(model, ds.camera(i), cfg.render)
        stem = f"{a.split}_{i:03d}"
        Image.fromarray(to_uint8(r["rgb"])).save(out / f"{stem}.png")
        Image.fromarray(to_uint8(0.5 * (r["normal"] + 1.0))).save(out / f"{stem}_normal.png")
        r["depth"].astype("<f4").tofile(out / f"{stem}_depth.f32")
        r["normal"].astype("<f4").tofile(out / f"{stem}_normal.f32")
        print(f"{stem}: {r['rgb'].shape[1]}x{r['rgb'].shape[0]}")
    return EXIT_OK


def cmd_extract_mesh(a) -> int:
    from .meshing import boundary_edges, export_mesh, extract_mesh
    from .trainer import load_model

    model, _ = load_model(a.checkpoint)
    mesh = extract_mesh(model.field, a.resolution, model.aabb, iso=a.iso)
    export_mesh(mesh, a.out)
    print(json.dumps({"out": a.out, "vertices": len(mesh.vertices), "faces": len(mesh.faces), "boundary_edges": boundary_edges(mesh)}))
    return EXIT_OK


def cmd_eval_nvs(a) -> int:
    import torch

    from .evalkit import normal_mae, psnr, report
    from .renderer import render_image
    from .scenegen import SCENE_KINDS, ground_truth_render, load_dataset, make_scene
    from .trainer import load_model

    model, cfg = load_model(a.checkpoint)
    ds = load_dataset(a.dataset or cfg.dataset, a.split, downscale=a.downscale or cfg.downscale)
    gt = ds.rgb_over(cfg.render.background)
    kind = ds.meta.get("scene")
    scene = make_scene(kind) if kind in SCENE_KINDS else None
    scores, angles, n_px = [], [], 0
    with torch.no_grad():
        for i in range(len(ds.frames)):
            cam = ds.camera(i)
            r = render_image(model, cam, cfg.render)
            scores.append(psnr(np.clip(r["rgb"], 0, 1), gt[i]))
            if scene is not None:
                ref = ground_truth_render(scene, cam, supersample=1)
                mask = (r["opacity"] > 0.5) & ref["mask"]
                if mask.any():
                    angles.append(normal_mae(r["normal"], ref["normal"], mask) * mask.sum())
                    n_px += int(mask.sum())
    reports = [report("psnr", float(np.mean(scores)), f"{a.split}-mean-over-views", len(scores), cfg.seed)]
    if n_px:
        reports.append(report("normal_mae", float(np.sum(angles) / n_px), "degrees-opacity>0.5-and-analytic-hit", n_px, cfg.seed))
    _write_json(reports, a.out)
    return EXIT_OK


def cmd_eval_geom(a) -> int:
    from .evalkit import CHAMFER_VARIANT, chamfer, report, sample_surface
    from .meshing import extract_mesh, read_mesh
    from .scenegen import make_scene

    seed = a.seed or 0
    mesh = read_mesh(a.mesh)
    pts = sample_surface(mesh.vertices, mesh.faces, a.samples, seed)
    if a.reference_mesh:
        ref = read_mesh(a.reference_mesh)
        label = Path(a.reference_mesh).name
    else:
        scene = make_scene(a.analytic_scene)
        ref = extract_mesh(scene, a.reference_resolution, scene.aabb)
        label = f"analytic-{a.analytic_scene}@{a.reference_resolution}"
    ref_pts = sample_surface(ref.vertices, ref.faces, a.samples, seed + 1)
    doc = report("chamfer", chamfer(pts, ref_pts), CHAMFER_VARIANT, a.samples, seed, reference=label)
    _write_json(doc, a.out)
    return EXIT_OK


def cmd_grad_check(a) -> int:
    from .gradcheck import TOLERANCE, run_suite

    seeds = range(a.seed or 0, (a.seed or 0) + a.count)
    worst: dict[str, float] = {}
    for s in seeds:
        for r in run_suite(s):
            worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    for name, err in worst.items():
        print(f"{name:24s} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    top = max(worst.values())
    print(f"max relative error {top:.3e} over {len(seeds)} seed(s)")
    return EXIT_OK if top < TOLERANCE else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker cap (else ANISDF_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="anisdf", description="Anisotropic SDF reconstruction toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    g = sub.add_parser("gen-scene", parents=[common], help="render an analytic scene to a NeRF-synthetic dataset")
    g.add_argument("kind", help="sphere, torus, thin_rods, mirror_sphere or composite")
    g.add_argument("--views", type=int, default=20)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--supersample", type=int, default=2)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_scene)

    t = sub.add_parser("train", parents=[common], help="optimize a model on a dataset")
    t.add_argument("--config", help="TOML config file")
    t.add_argument("--dataset")
    t.add_argument("--out", help="output directory (checkpoint, train_log.csv)")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-rays", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. loss.eikonal=0.1")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--print-config", action="store_true", help="print the merged config and exit")
    t.add_argument("--progress", type=int, default=500, help="log progress every N steps (0: quiet)")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render views: PNG plus raw float32 depth/normal")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset")
    r.add_argument("--split", default="test")
    r.add_argument("--downscale", type=int)
    r.add_argument("--views", type=int, nargs="*")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)

    m = sub.add_parser("extract-mesh", parents=[common], help="marching cubes on the fused SDF")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--resolution", type=int, default=256)
    m.add_argument("--iso", type=float, default=0.0)
    m.add_argument("--out", required=True, help="mesh path (.obj or .ply)")
    m.set_defaults(fn=cmd_extract_mesh)

    e = sub.add_parser("eval-nvs", parents=[common], help="novel-view PSNR and normal MAE")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.add_argument("--split", default="test")
    e.add_argument("--downscale", type=int)
    e.add_argument("--out", help="JSON report path")
    e.set_defaults(fn=cmd_eval_nvs)

    q = sub.add_parser("eval-geom", parents=[common], help="Chamfer distance to a reference surface")
    q.add_argument("--mesh", required=True)
    ref = q.add_mutually_exclusive_group(required=True)
    ref.add_argument("--reference-mesh")
    ref.add_argument("--analytic-scene")
    q.add_argument("--reference-resolution", type=int, default=256)
    q.add_argument("--samples", type=int, default=100_000)
    q.add_argument("--out", help="JSON report path")
    q.set_defaults(fn=cmd_eval_geom)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference suite over the trainable graphs")
    c.add_argument("--count", type=int, default=1, help="number of consecutive seeds starting at --seed")
    c.set_defaults(fn=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    from .checkpoint import CheckpointError
    from .scenegen import DatasetError
    from .trainer import ConfigError, TrainingDiverged, set_threads

    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if a.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    for key in ("seed", "threads", "verbose"):
        if not hasattr(a, key):
            setattr(a, key, None)
    logging.basicConfig(level=logging.INFO if a.verbose or a.command == "train" else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        set_threads(a.threads)
        return a.fn(a)
    except (UsageError, ConfigError) as e:
        print(f"anisdf {a.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DatasetError, TrainingDiverged, OSError, ValueError, RuntimeError) as e:
        print(f"anisdf {a.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
