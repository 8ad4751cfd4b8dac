"""Finite-difference suite over the trainable graphs (losses, hash grid, render pixel).

Each seed draws fresh parameter values, points and rays.  Configurations are
rejected and redrawn when a piecewise-linear kink (ReLU, max(0, .)) or a hash-cell
face sits within reach of the FD step, since a central difference straddling a
kink measures an average of two slopes rather than the derivative.  Parameter
tensors are subsampled per seed; across seeds every tensor gets covered.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from . import appearance as _appearance
from . import autodiff as _autodiff
from . import renderer as _renderer
from .appearance import AppearanceConfig
from .autodiff import DTYPE, Graph, ParameterStore, finite_difference_check
from .geometry import GeometryConfig, GeometryField
from .hashgrid import GridConfig, HashGrid, level_resolution
from .losses import alpha_entropy_loss, curvature_loss, eikonal_loss, orientation_loss, rgb_loss
from .model import AniSDFModel, ModelConfig
from .renderer import RenderConfig, render_rays

TOLERANCE = 1e-4
CELL_MARGIN = 0.01  # distance to the nearest cell face, in cell units, on every level
KINK_MARGIN = 2e-3  # minimum |z| at every ReLU / max(0, .) input
PARAM_STEP = 1e-4
TENSORS_PER_GRAPH = 6
# float64 roundoff in an O(1) output is ~1e-16, so a central difference at
# PARAM_STEP resolves a partial only to ~1e-12 absolute; sampled coordinates
# must sit well above that for a 1e-4 relative comparison to mean anything
MIN_PARTIAL = 1e-6

SMALL_GRID = GridConfig(table_size=2**12)
SMALL_GEOMETRY = GeometryConfig(hidden_width=16)
SMALL_MODEL = ModelConfig(
    grid=SMALL_GRID,
    geometry=SMALL_GEOMETRY,
    appearance=AppearanceConfig(view_width=8, ref_width=8, weight_width=8, fpar_width=8),
)


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


# ---------------------------------------------------------------------------
# configuration guards
# ---------------------------------------------------------------------------


def off_faces_mask(grid_cfg: GridConfig, pts: np.ndarray, margin: float = CELL_MARGIN) -> np.ndarray:
    lo, hi = np.asarray(grid_cfg.aabb_min), np.asarray(grid_cfg.aabb_max)
    u = (pts - lo) / (hi - lo)
    ok = np.ones(len(pts), dtype=bool)
    for lv in range(grid_cfg.coarse_range[0], grid_cfg.total_levels + 1):
        c = u * level_resolution(lv, grid_cfg)
        ok &= np.min(np.abs(c - np.round(c)), axis=1) >= margin
    return ok


def points_off_faces(grid_cfg: GridConfig, rng, n: int) -> np.ndarray:
    out = np.zeros((0, 3))
    while len(out) < n:
        p = rng.uniform(-0.8, 0.8, (4 * n, 3))
        out = np.concatenate([out, p[off_faces_mask(grid_cfg, p)]])
    return out[:n]


@contextlib.contextmanager
def kink_monitor():
    """Record min |z| over every ReLU / max(0, z) evaluated inside the block."""
    seen = [np.inf]
    relu, m0 = _autodiff.ACTIVATIONS["relu"], _autodiff.maximum0

    def watch(z):
        if z.numel():
            seen[0] = min(seen[0], float(z.detach().abs().min()))

    def relu_w(z):
        watch(z)
        return relu(z)

    def m0_w(z):
        watch(z)
        return m0(z)

    _autodiff.ACTIVATIONS["relu"] = relu_w
    saved = (_appearance.maximum0, _renderer.maximum0)
    _appearance.maximum0 = _renderer.maximum0 = m0_w
    try:
        yield seen
    finally:
        _autodiff.ACTIVATIONS["relu"] = relu
        _appearance.maximum0, _renderer.maximum0 = saved


def _subset(ids, rng, k: int = TENSORS_PER_GRAPH) -> tuple[str, ...]:
    ids = list(ids)
    if len(ids) <= k:
        return tuple(ids)
    return tuple(sorted(rng.choice(ids, k, replace=False)))


_SPREAD: dict[str, float] = {}


def _spread(pid: str, v: np.ndarray) -> float:
    if pid not in _SPREAD:
        sd = float(v.std()) if v.size > 1 else 0.0
        _SPREAD[pid] = sd if sd > 0 else 0.1
    return _SPREAD[pid]


def _jitter(store: ParameterStore, base: dict, rng, grid_scale: float, rel: float = 0.05) -> None:
    """Reset to ``base`` plus seeded noise: tables ~ N(0, grid_scale), weights perturbed by rel * std."""
    for pid, v in base.items():
        if pid.startswith("grid."):
            store.set_values(pid, rng.normal(0.0, grid_scale, v.shape))
        elif pid.startswith(("geo.", "app.")):
            s = _spread(pid, v)
            store.set_values(pid, v + rng.normal(0.0, rel * s, v.shape))
        else:
            store.set_values(pid, v)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


@lru_cache(maxsize=1)
def _geometry() -> tuple[GeometryField, dict]:
    store = ParameterStore()
    field = GeometryField(store, SMALL_GRID, SMALL_GEOMETRY, np.random.default_rng(0))
    return field, store.snapshot()


def check_losses(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    res = []
    c, cg = rng.uniform(0, 1, (4, 3)), rng.uniform(0, 1, (4, 3))
    g = Graph(lambda st, a, b: rgb_loss(a, b), (3, 3), name="rgb")
    res.append(CheckResult("loss.rgb", finite_difference_check(g, ParameterStore(), [c, cg], step=1e-5)))

    d = rng.normal(size=(3, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    n = rng.normal(size=(3, 5, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    dots = (n * d[:, None]).sum(-1)
    # push n.d at least 0.1 away from the max(0, .) kink
    n = n + np.where(np.abs(dots) < 0.1, np.sign(dots + 1e-12) * 0.2, 0.0)[..., None] * d[:, None]
    w = rng.uniform(0, 0.3, (3, 5))
    g = Graph(lambda st, a, b, e: orientation_loss(a, b, e), (5, 3, 3), name="orient")
    res.append(CheckResult("loss.orient", finite_difference_check(g, ParameterStore(), [w, n, d], step=1e-5)))

    a = rng.uniform(0.05, 0.95, (4, 6))
    g = Graph(lambda st, x: alpha_entropy_loss(x), (6,), name="alpha")
    res.append(CheckResult("loss.alpha", finite_difference_check(g, ParameterStore(), [a], step=1e-5)))

    field, base = _geometry()
    store = field.store
    _jitter(store, base, rng, 1e-2)
    field.fine_scale = float(rng.uniform(0.2, 1.0))
    pts = points_off_faces(SMALL_GRID, rng, 3)
    px = torch.as_tensor(pts, dtype=DTYPE)
    g = Graph(lambda st: eikonal_loss(field, px), (), _subset(store.ids(), rng), "eikonal")
    err = finite_difference_check(g, store, [], step=PARAM_STEP, max_coords=3, zero_coords=1, seed=seed, order=4, min_partial=MIN_PARTIAL)
    res.append(CheckResult("loss.eikonal", err))

    eps = 0.01
    while True:  # perturbed points must avoid cell faces too
        tau = rng.normal(size=(3, 3))
        tau /= np.linalg.norm(tau, axis=1, keepdims=True)
        if off_faces_mask(SMALL_GRID, pts + eps * tau).all():
            break
    tt = torch.as_tensor(tau, dtype=DTYPE)
    # the loss is O(1e-7) on a near-sphere; scaling up keeps partials above the 1e-8 floor
    g = Graph(lambda st: 1e4 * curvature_loss(field, px, eps, tangents=tt), (), _subset(store.ids(), rng), "curvature")
    err = finite_difference_check(g, store, [], step=PARAM_STEP, max_coords=3, zero_coords=1, seed=seed, order=4, min_partial=MIN_PARTIAL)
    res.append(CheckResult("loss.curvature", err))
    return res


@lru_cache(maxsize=2)
def _grid(which: str) -> HashGrid:
    return HashGrid(ParameterStore(), SMALL_GRID, which, np.random.default_rng(0))


def check_hashgrid(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    res = []
    for which in ("coarse", "fine"):
        grid = _grid(which)
        store = grid.store
        for pid in store.ids():
            store.set_values(pid, rng.normal(0.0, 0.1, store[pid].shape))
        pts = points_off_faces(SMALL_GRID, rng, 2)
        wts = torch.as_tensor(rng.normal(size=(2, grid.dim)), dtype=DTYPE)
        ids = tuple(store.ids())
        # w.r.t. x: step 1e-6 moves at most 1e-3 cells at the finest level (< CELL_MARGIN)
        g = Graph(lambda st, x: (grid.encode(x)[0] * wts).sum(), (3,), ids, f"grid.{which}")
        err = finite_difference_check(g, store, [pts], step=1e-6, include_params=False)
        # w.r.t. entries (the encoding is linear in them)
        err = max(err, finite_difference_check(g, store, [pts], step=1e-3, max_coords=4, zero_coords=1, seed=seed, include_inputs=False))
        res.append(CheckResult(f"hashgrid.{which}", err))
        # fused kernel: value and spatial Jacobian, w.r.t. entries
        wj = torch.as_tensor(rng.normal(size=(3, 2, grid.dim)), dtype=DTYPE)
        px = torch.as_tensor(pts, dtype=DTYPE)

        def fused(st):
            e, j = grid.encode_with_jacobian(px)
            return (e * wts).sum() + 1e-3 * (j * wj).sum()

        g = Graph(fused, (), ids, f"grid.{which}.fused")
        err = finite_difference_check(g, store, [], step=1e-3, max_coords=4, zero_coords=1, seed=seed)
        res.append(CheckResult(f"hashgrid.{which}.fused", err))
    return res


@lru_cache(maxsize=1)
def _pixel_model() -> tuple[AniSDFModel, dict]:
    model = AniSDFModel(SMALL_MODEL, seed=0)
    return model, model.store.snapshot()


PIXEL_RENDER = RenderConfig(background=(0.0, 0.0, 0.0))


def pixel_setup(seed: int, max_tries: int = 200):
    """Seeded model + 4-sample ray through the initial sphere surface, kink- and face-free."""
    rng = np.random.default_rng(seed)
    model, base = _pixel_model()
    for attempt in range(max_tries):
        if attempt % 8 == 0:  # redraw parameters now and then, rays every try
            _jitter(model.store, base, rng, 1e-3)
            model.field.fine_scale = float(rng.uniform(0.2, 1.0))
        target = rng.normal(size=3)
        target *= 0.5 / np.linalg.norm(target)
        d = -target / np.linalg.norm(target) + rng.normal(0, 0.3, 3)
        d /= np.linalg.norm(d)
        o = target - 1.2 * d
        t = np.sort(1.2 + rng.uniform(-0.06, 0.06, 4))
        if not off_faces_mask(SMALL_GRID, o + d * t[:, None]).all():
            continue
        with kink_monitor() as seen, torch.no_grad():
            render_rays(model, o[None], d[None], PIXEL_RENDER, t=t[None])
        if seen[0] > KINK_MARGIN:
            return model, o[None], d[None], t[None], rng
    raise RuntimeError(f"no kink-free pixel configuration for seed {seed}")


def check_render_pixel(seed: int) -> list[CheckResult]:
    model, o, d, t, rng = pixel_setup(seed)
    wts = torch.as_tensor(rng.uniform(0.2, 1.0, 3), dtype=DTYPE)
    ids = _subset(model.store.ids(), rng) + ("render.log_s",)
    g = Graph(lambda st: (render_rays(model, o, d, PIXEL_RENDER, t=t).color[0] * wts).sum(), (), ids, "render.pixel")
    err = finite_difference_check(g, model.store, [], step=PARAM_STEP, max_coords=3, zero_coords=1, seed=seed, order=4, min_partial=MIN_PARTIAL)
    return [CheckResult("render.pixel", err)]


def run_suite(seed: int) -> list[CheckResult]:
    torch.manual_seed(seed)
    return check_losses(seed) + check_hashgrid(seed) + check_render_pixel(seed)


def max_errors(seeds) -> dict[str, float]:
    worst: dict[str, float] = {}
    for s in seeds:
        for r in run_suite(s):
            worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    return worst
