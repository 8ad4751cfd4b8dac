"""Analytic ground-truth scenes, a sphere-tracing oracle renderer and NeRF-synthetic dataset I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from .appearance import reflect
from .autodiff import DTYPE, as_tensor
from .geometry import AnalyticField, FieldSample
from .renderer import Camera, image_rays, look_at, ray_aabb

SCENE_KINDS = ("sphere", "torus", "thin_rods", "mirror_sphere", "composite")

ROD_RADIUS = 0.004

_LIGHTS = (
    (np.array([1.0, 1.0, 2.0]) / math.sqrt(6.0), 0.6),
    (np.array([-1.0, -0.5, 0.5]) / math.sqrt(1.5), 0.35),
)
_AMBIENT = 0.25
_SUNS = (
    (np.array([0.5, 0.3, 0.8]) / np.linalg.norm([0.5, 0.3, 0.8]), 40.0, np.array([1.0, 0.85, 0.6])),
    (np.array([-0.6, 0.5, 0.4]) / np.linalg.norm([-0.6, 0.5, 0.4]), 15.0, np.array([0.35, 0.55, 0.9])),
)


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# primitives (torch, so that the oracle can be plugged into the renderer)
# ---------------------------------------------------------------------------


def sdf_sphere(x, radius=0.5, center=(0.0, 0.0, 0.0)):
    return torch.linalg.vector_norm(x - torch.tensor(center, dtype=DTYPE), dim=-1) - radius


def sdf_torus(x, major=0.4, minor=0.1):
    q = torch.linalg.vector_norm(x[..., :2], dim=-1) - major
    return torch.sqrt(q * q + x[..., 2] ** 2) - minor


def sdf_capsule(x, a, b, radius):
    a = torch.tensor(a, dtype=DTYPE)
    b = torch.tensor(b, dtype=DTYPE)
    pa, ba = x - a, b - a
    h = ((pa * ba).sum(-1) / (ba * ba).sum()).clamp(0.0, 1.0)
    return torch.linalg.vector_norm(pa - h.unsqueeze(-1) * ba, dim=-1) - radius


def environment(omega) -> torch.Tensor:
    """Procedural sky: smooth ground/horizon/zenith gradient plus two Gaussian suns."""
    omega = as_tensor(omega)
    z = omega[..., 2:3]
    ground = torch.tensor([0.35, 0.3, 0.25], dtype=DTYPE)
    horizon = torch.tensor([0.85, 0.85, 0.9], dtype=DTYPE)
    zenith = torch.tensor([0.25, 0.45, 0.85], dtype=DTYPE)
    up = z.clamp(0.0, 1.0)
    down = (-z).clamp(0.0, 1.0)
    sky = horizon + (zenith - horizon) * (up * (2.0 - up))
    sky = sky + (ground - horizon) * (down * (2.0 - down))
    for direction, sharp, color in _SUNS:
        cosang = omega @ torch.tensor(direction, dtype=DTYPE)
        sky = sky + torch.tensor(color, dtype=DTYPE) * torch.exp(sharp * (cosang - 1.0)).unsqueeze(-1)
    return sky.clamp(0.0, 1.0)


def lambert(albedo, n) -> torch.Tensor:
    shade = torch.full(n.shape[:-1], _AMBIENT, dtype=DTYPE)
    for direction, intensity in _LIGHTS:
        shade = shade + intensity * (n @ torch.tensor(direction, dtype=DTYPE)).clamp_min(0.0)
    return (albedo * shade.unsqueeze(-1)).clamp(0.0, 1.0)


def smooth_albedo(x, base) -> torch.Tensor:
    base = torch.tensor(base, dtype=DTYPE)
    var = 0.12 * torch.stack(
        [torch.sin(3.0 * x[..., 0] + 1.0), torch.sin(3.0 * x[..., 1] + 2.0), torch.sin(3.0 * x[..., 2] + 3.0)], -1
    )
    return (base + var).clamp(0.0, 1.0)


@dataclass
class AnalyticScene:
    """Closed-form SDF plus deterministic shading ``shade(x, d, n) -> rgb``."""

    kind: str
    sdf: Callable[[torch.Tensor], torch.Tensor]
    shade: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]
    mirror: Callable[[torch.Tensor], torch.Tensor]
    aabb: tuple[tuple[float, ...], tuple[float, ...]] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    rods: list[tuple[tuple[float, float, float], tuple[float, float, float]]] = field(default_factory=list)
    exact: bool = True

    def sdf_numpy(self, x: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.sdf(as_tensor(x)).numpy()

    def field(self, feature_dim: int = 15) -> AnalyticField:
        return AnalyticField(self.sdf, feature_dim)


def make_scene(kind: str) -> AnalyticScene:
    if kind == "sphere":
        return AnalyticScene(
            kind,
            lambda x: sdf_sphere(x, 0.5),
            lambda x, d, n: lambert(smooth_albedo(x, (0.75, 0.45, 0.3)), n),
            lambda x: torch.zeros(x.shape[:-1], dtype=DTYPE),
        )
    if kind == "torus":
        return AnalyticScene(
            kind,
            lambda x: sdf_torus(x, 0.4, 0.1),
            lambda x, d, n: lambert(smooth_albedo(x, (0.35, 0.6, 0.4)), n),
            lambda x: torch.zeros(x.shape[:-1], dtype=DTYPE),
        )
    if kind == "mirror_sphere":
        return AnalyticScene(
            kind,
            lambda x: sdf_sphere(x, 0.5),
            lambda x, d, n: environment(reflect(d, n)),
            lambda x: torch.ones(x.shape[:-1], dtype=DTYPE),
        )
    if kind == "thin_rods":
        rods = []
        for px, py in ((0.45, 0.0), (-0.45, 0.0), (0.0, 0.45), (0.0, -0.45)):
            rods.append(((px, py, -0.45), (px, py, 0.45)))

        def sdf(x):
            d = sdf_sphere(x, 0.25)
            for a, b in rods:
                d = torch.minimum(d, sdf_capsule(x, a, b, ROD_RADIUS))
            return d

        return AnalyticScene(
            kind,
            sdf,
            lambda x, d, n: lambert(smooth_albedo(x, (0.6, 0.55, 0.5)), n),
            lambda x: torch.zeros(x.shape[:-1], dtype=DTYPE),
            rods=rods,
            exact=False,
        )
    if kind == "composite":
        def sdf(x):
            return torch.minimum(sdf_sphere(x, 0.25), sdf_torus(x, 0.5, 0.1))

        def mirror(x):
            return (sdf_sphere(x, 0.25) < sdf_torus(x, 0.5, 0.1)).to(DTYPE)

        def shade(x, d, n):
            m = mirror(x).unsqueeze(-1)
            return m * environment(reflect(d, n)) + (1 - m) * lambert(smooth_albedo(x, (0.35, 0.6, 0.4)), n)

        return AnalyticScene(kind, sdf, shade, mirror, exact=False)
    raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")


def analytic_sdf(scene: AnalyticScene, x) -> np.ndarray:
    return scene.sdf_numpy(np.asarray(x, dtype=np.float64))


def analytic_normals(scene: AnalyticScene, x) -> np.ndarray:
    with torch.enable_grad():
        xt = as_tensor(x).detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(scene.sdf(xt).sum(), xt)
    g = g.numpy()
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


class OracleModel:
    """Adapter that plugs an analytic scene into the volume renderer."""

    def __init__(self, scene: AnalyticScene, sharpness: float = 2000.0):
        self.scene = scene
        self.field = scene.field()
        self._s = torch.tensor(sharpness, dtype=DTYPE)
        self.aabb = scene.aabb

    def sharpness(self):
        return self._s

    def radiance(self, x, d, sample: FieldSample):
        c = self.scene.shade(x, d, sample.normal)
        w = 1.0 - self.scene.mirror(x)
        return {"color": c, "c_view": c, "c_ref": c, "w": w}


# ---------------------------------------------------------------------------
# sphere tracing oracle
# ---------------------------------------------------------------------------


@torch.no_grad()
def sphere_trace(scene: AnalyticScene, o: np.ndarray, d: np.ndarray, eps: float = 1e-6, max_steps: int = 256):
    """Returns (hit mask, t, steps taken)."""
    ot, dt = as_tensor(o), as_tensor(d)
    near, far, inside = ray_aabb(ot, dt, *scene.aabb)
    t = near.clone()
    active = inside.clone()
    hit = torch.zeros_like(active)
    steps = torch.zeros(len(t), dtype=torch.int64)
    for _ in range(max_steps):
        if not bool(active.any()):
            break
        idx = torch.nonzero(active).reshape(-1)
        f = scene.sdf(ot[idx] + dt[idx] * t[idx, None])
        steps[idx] += 1
        done = f.abs() < eps
        hit[idx[done]] = True
        t[idx] = t[idx] + torch.where(done, torch.zeros_like(f), f)
        escaped = t[idx] > far[idx]
        active[idx[done | escaped]] = False
    return hit.numpy(), t.numpy(), steps.numpy()


def ground_truth_render(scene: AnalyticScene, cam: Camera, supersample: int = 2, background=(1.0, 1.0, 1.0)) -> dict[str, np.ndarray]:
    """Oracle image.  ``background`` is an RGB triple or "environment".

    Returns rgb (composited), rgb_fg (unpremultiplied), alpha, normal, depth and
    hit mask; normal/depth come from the pixel-center ray.
    """
    h, w = cam.height, cam.width
    k = supersample * supersample
    o, d = image_rays(cam, supersample)
    hit, t, _ = sphere_trace(scene, o, d)
    x = o + d * t[:, None]
    color = np.zeros((len(o), 3))
    if hit.any():
        n = analytic_normals(scene, x[hit])
        with torch.no_grad():
            color[hit] = scene.shade(as_tensor(x[hit]), as_tensor(d[hit]), as_tensor(n)).numpy()
    if isinstance(background, str):
        with torch.no_grad():
            bg = environment(as_tensor(d)).numpy()
    else:
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (len(o), 3))
    rgb = np.where(hit[:, None], color, bg).reshape(h, w, k, 3).mean(2)
    hits = hit.reshape(h, w, k)
    alpha = hits.mean(2)
    fg = (color * hit[:, None]).reshape(h, w, k, 3).sum(2) / np.maximum(hits.sum(2), 1)[..., None]

    oc, dc = image_rays(cam, 1)
    hc, tc, _ = sphere_trace(scene, oc, dc)
    normal = np.zeros((h * w, 3))
    if hc.any():
        normal[hc] = analytic_normals(scene, oc[hc] + dc[hc] * tc[hc, None])
    depth = np.where(hc, tc, 0.0)
    return {
        "rgb": rgb,
        "rgb_fg": fg,
        "alpha": alpha,
        "normal": normal.reshape(h, w, 3),
        "depth": depth.reshape(h, w),
        "mask": hc.reshape(h, w),
    }


# ---------------------------------------------------------------------------
# dataset I/O (NeRF-synthetic layout)
# ---------------------------------------------------------------------------


@dataclass
class Frame:
    file_path: str
    image_path: Path
    c2w: np.ndarray


@dataclass
class SceneDataset:
    root: Path
    split: str
    camera_angle_x: float
    frames: list[Frame]
    images: np.ndarray | None = None  # (N, H, W, 4) in [0, 1]
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        if self.images is None:
            raise DatasetError("images not loaded")
        return self.images.shape[1], self.images.shape[2]

    def camera(self, i: int) -> Camera:
        h, w = self.shape
        return Camera(self.frames[i].c2w, self.camera_angle_x, w, h)

    def rgb_over(self, background=(1.0, 1.0, 1.0)) -> np.ndarray:
        a = self.images[..., 3:4]
        return self.images[..., :3] * a + (1.0 - a) * np.asarray(background)


def split_indices(n_views: int) -> dict[str, list[int]]:
    """Fixed 80/10/10 split; held-out views evenly spread over the orbit."""
    n_hold = int(round(0.1 * n_views)) if n_views >= 10 else int(n_views >= 3)
    step = n_views / max(n_hold, 1)
    val = [int(step * k + 0.25 * step) for k in range(n_hold)]
    test = [int(step * k + 0.75 * step) for k in range(n_hold)]
    train = [i for i in range(n_views) if i not in val and i not in test]
    return {"train": train, "val": val, "test": test}


def view_cameras(n_views: int, radius: float = 2.5, elevations_deg=(30.0, -20.0), seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0.0, 2.0 * math.pi / n_views)
    mats = []
    for i in range(n_views):
        az = offset + 2.0 * math.pi * i / n_views
        el = math.radians(elevations_deg[i % len(elevations_deg)])
        eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        mats.append(look_at(eye))
    return mats


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def emit_dataset(
    scene: AnalyticScene | str,
    n_views: int,
    resolution: int,
    out_dir: str | Path,
    seed: int = 0,
    fov_x: float = 0.6,
    radius: float = 2.5,
    supersample: int = 2,
) -> dict[str, SceneDataset]:
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if isinstance(scene, str):
        scene = make_scene(scene)
    out = Path(out_dir)
    mats = view_cameras(n_views, radius, seed=seed)
    splits = split_indices(n_views)
    try:
        for split, idxs in splits.items():
            (out / split).mkdir(parents=True, exist_ok=True)
            frames = []
            for j, i in enumerate(idxs):
                cam = Camera(mats[i], fov_x, resolution, resolution)
                gt = ground_truth_render(scene, cam, supersample)
                rgba = np.concatenate([gt["rgb_fg"], gt["alpha"][..., None]], -1)
                name = f"r_{j:03d}"
                Image.fromarray(to_uint8(rgba), "RGBA").save(out / split / f"{name}.png")
                frames.append({"file_path": f"./{split}/{name}", "transform_matrix": mats[i].tolist(), "view_index": i})
            doc = {"camera_angle_x": fov_x, "frames": frames, "scene": scene.kind, "seed": seed}
            (out / f"transforms_{split}.json").write_text(json.dumps(doc, indent=2))
    except OSError as e:
        raise DatasetError(f"cannot write dataset under {out}: {e}") from e
    return {s: load_dataset(out, s) for s in splits}


def load_dataset(path: str | Path, split: str = "train", load_images: bool = True, downscale: int = 1) -> SceneDataset:
    root = Path(path)
    jpath = root / f"transforms_{split}.json"
    try:
        doc = json.loads(jpath.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing {jpath}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"malformed {jpath}: {e}") from e
    if "camera_angle_x" not in doc or "frames" not in doc:
        raise DatasetError(f"{jpath}: needs camera_angle_x and frames")
    frames = []
    for k, fr in enumerate(doc["frames"]):
        try:
            fp = fr["file_path"]
            m = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"{jpath}: frame {k} malformed: {e}") from e
        if m.shape != (4, 4):
            raise DatasetError(f"{jpath}: frame {k} transform_matrix shape {m.shape}")
        ip = root / fp
        if ip.suffix.lower() != ".png":
            ip = ip.with_name(ip.name + ".png")
        frames.append(Frame(fp, ip, m))
    ds = SceneDataset(root, split, float(doc["camera_angle_x"]), frames, meta={k: v for k, v in doc.items() if k != "frames"})
    if load_images and frames:
        imgs = []
        for fr in frames:
            try:
                im = Image.open(fr.image_path).convert("RGBA")
            except (OSError, FileNotFoundError) as e:
                raise DatasetError(f"cannot read image {fr.image_path}: {e}") from e
            if downscale > 1:
                im = im.resize((im.width // downscale, im.height // downscale), Image.LANCZOS)
            imgs.append(np.asarray(im, dtype=np.float64) / 255.0)
        shapes = {a.shape for a in imgs}
        if len(shapes) != 1:
            raise DatasetError(f"{root}/{split}: images differ in size {shapes}")
        ds.images = np.stack(imgs)
    return ds
