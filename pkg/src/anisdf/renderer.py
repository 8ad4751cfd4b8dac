"""Pinhole rays, NeuS-style SDF-to-opacity conversion and front-to-back compositing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as tF

from .autodiff import DTYPE, as_tensor, maximum0, normalize
from .geometry import FieldSample, SDFField


class PixelOutOfBounds(ValueError):
    pass


@dataclass
class Camera:
    c2w: np.ndarray
    fov_x: float
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        rot = self.c2w[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.fov_x)

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3].copy()


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target`` (OpenGL: -z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd.dot(up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, -fwd, eye
    return m


def generate_ray(cam: Camera, pixel, offset=(0.5, 0.5)) -> tuple[np.ndarray, np.ndarray]:
    u, v = pixel
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise PixelOutOfBounds(f"pixel {pixel} outside {cam.width}x{cam.height}")
    o, d = pixel_rays(cam, np.array([[u + offset[0], v + offset[1]]], dtype=np.float64))
    return o[0], d[0]


def pixel_rays(cam: Camera, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rays through continuous image coordinates ``uv`` (N,2), u right / v down."""
    f = cam.focal
    dc = np.stack(
        [(uv[:, 0] - 0.5 * cam.width) / f, -(uv[:, 1] - 0.5 * cam.height) / f, -np.ones(len(uv))], axis=1
    )
    d = dc @ cam.c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.c2w[:3, 3], d.shape).copy()
    return o, d


def image_rays(cam: Camera, supersample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All rays of an image, shape (H*W*ss*ss, 3), pixel-major then subpixel order."""
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss
    vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    sv, su = np.meshgrid(offs, offs, indexing="ij")
    u = (uu[:, :, None] + su.reshape(-1)[None, None]).reshape(-1)
    v = (vv[:, :, None] + sv.reshape(-1)[None, None]).reshape(-1)
    return pixel_rays(cam, np.stack([u, v], axis=1))


def ray_aabb(o: torch.Tensor, d: torch.Tensor, lo, hi) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab test -> (near, far, hit mask); near clamped to >= 0."""
    lo = torch.as_tensor(lo, dtype=DTYPE)
    hi = torch.as_tensor(hi, dtype=DTYPE)
    inv = 1.0 / torch.where(d.abs() < 1e-12, torch.full_like(d, 1e-12), d)
    t0 = (lo - o) * inv
    t1 = (hi - o) * inv
    near = torch.minimum(t0, t1).amax(-1).clamp_min(0.0)
    far = torch.maximum(t0, t1).amin(-1)
    return near, far, far > near + 1e-9


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_uniform(near, far, count: int, stratified: bool = False, rng: np.random.Generator | None = None) -> torch.Tensor:
    near = as_tensor(near).reshape(-1, 1)
    far = as_tensor(far).reshape(-1, 1)
    if torch.any(near >= far):
        raise ValueError("sample_uniform needs near < far")
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        jitter = torch.as_tensor(rng.uniform(size=(near.shape[0], count)), dtype=DTYPE)
    else:
        jitter = torch.full((near.shape[0], count), 0.5, dtype=DTYPE)
    frac = (torch.arange(count, dtype=DTYPE) + jitter) / count
    return near + (far - near) * frac


def importance_resample(t: torch.Tensor, weights: torch.Tensor, count: int, rng: np.random.Generator | None = None) -> torch.Tensor:
    """Draw ``count`` samples per ray from the piecewise-constant pdf over bins [t_i, t_{i+1}].

    ``weights`` has one entry per bin (shape (R, S-1)); all-zero rows fall back to
    uniform.  Returns the merged, sorted t.  With an rng the quantiles are random,
    otherwise evenly spaced.
    """
    t = as_tensor(t)
    merged, _ = torch.sort(torch.cat([t, draw_from_bins(t, weights, count, rng)], -1), -1)
    return merged


def draw_from_bins(t: torch.Tensor, weights: torch.Tensor, count: int, rng: np.random.Generator | None = None) -> torch.Tensor:
    t = as_tensor(t)
    weights = as_tensor(weights).clamp_min(0.0)
    r, s = t.shape
    if weights.shape != (r, s - 1):
        raise ValueError(f"weights shape {tuple(weights.shape)} != {(r, s - 1)}")
    total = weights.sum(-1, keepdim=True)
    uniform = torch.full_like(weights, 1.0 / (s - 1))
    pdf = torch.where(total > 0, weights / torch.where(total > 0, total, torch.ones_like(total)), uniform)
    cdf = torch.cat([torch.zeros((r, 1), dtype=DTYPE), torch.cumsum(pdf, -1)], -1)
    cdf[:, -1] = 1.0
    if rng is not None:
        q = torch.as_tensor(rng.uniform(size=(r, count)), dtype=DTYPE)
    else:
        q = ((torch.arange(count, dtype=DTYPE) + 0.5) / count).expand(r, count).contiguous()
    idx = torch.searchsorted(cdf, q, right=True).clamp(1, s - 1)
    lo_c = cdf.gather(1, idx - 1)
    hi_c = cdf.gather(1, idx)
    lo_t = t.gather(1, idx - 1)
    hi_t = t.gather(1, idx)
    denom = hi_c - lo_c
    frac = torch.where(denom > 0, (q - lo_c) / torch.where(denom > 0, denom, torch.ones_like(denom)), torch.full_like(q, 0.5))
    return lo_t + frac.clamp(0.0, 1.0) * (hi_t - lo_t)


# ---------------------------------------------------------------------------
# opacity and compositing
# ---------------------------------------------------------------------------


def sdf_to_alpha(f0, f1, s):
    """max((Phi_s(f0) - Phi_s(f1)) / Phi_s(f0), 0), evaluated in log space."""
    f0, f1, s = as_tensor(f0), as_tensor(f1), as_tensor(s)
    delta = tF.logsigmoid(s * f1) - tF.logsigmoid(s * f0)
    return maximum0(-torch.expm1(delta))


def composite(alphas, colors):
    """Front-to-back: returns (C, w, T) with T_1 = 1 and w_i = T_i alpha_i."""
    alphas, colors = as_tensor(alphas), as_tensor(colors)
    one = torch.ones_like(alphas[..., :1])
    trans = torch.cumprod(torch.cat([one, 1.0 - alphas[..., :-1]], -1), -1)
    w = trans * alphas
    return (w.unsqueeze(-1) * colors).sum(-2), w, trans


# ---------------------------------------------------------------------------
# full rendering
# ---------------------------------------------------------------------------


class RadianceModel(Protocol):
    field: SDFField

    def sharpness(self) -> torch.Tensor: ...

    def radiance(self, x, d, sample: FieldSample) -> dict[str, torch.Tensor]: ...


@dataclass
class RenderConfig:
    n_uniform: int = 64
    n_importance: int = 16
    importance_rounds: int = 2
    stratified: bool = True
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blend_mode: str = "sample"
    upsample_sharpness: float = 64.0
    chunk: int = 2048

    def __post_init__(self):
        if self.blend_mode not in ("sample", "pixel"):
            raise ValueError(f"blend_mode must be 'sample' or 'pixel', got {self.blend_mode!r}")


@dataclass
class RaySampleSet:
    origins: torch.Tensor
    dirs: torch.Tensor
    t: torch.Tensor
    delta: torch.Tensor
    sample: FieldSample
    alpha: torch.Tensor
    trans: torch.Tensor
    weights: torch.Tensor


@dataclass
class RenderOutput:
    color: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor
    normal: torch.Tensor
    weights: torch.Tensor
    hit: torch.Tensor
    samples: RaySampleSet | None = None
    aux: dict[str, torch.Tensor] = field(default_factory=dict)


def _sample_ts(model: RadianceModel, o, d, near, far, cfg: RenderConfig, rng) -> torch.Tensor:
    t = sample_uniform(near, far, cfg.n_uniform, cfg.stratified and rng is not None, rng)
    if cfg.n_importance <= 0 or cfg.importance_rounds <= 0:
        return t
    with torch.no_grad():
        x = o[:, None] + d[:, None] * t[..., None]
        sdf = model.field.sample(x.reshape(-1, 3), with_grad=False).sdf.reshape(t.shape)
        for k in range(cfg.importance_rounds):
            s = cfg.upsample_sharpness * 2.0**k
            alpha = sdf_to_alpha(sdf[:, :-1], sdf[:, 1:], s)
            _, w, _ = composite(alpha, torch.zeros(alpha.shape + (1,), dtype=DTYPE))
            new_t = draw_from_bins(t, w, cfg.n_importance, rng if cfg.stratified else None)
            xn = o[:, None] + d[:, None] * new_t[..., None]
            sdf_new = model.field.sample(xn.reshape(-1, 3), with_grad=False).sdf.reshape(new_t.shape)
            t, order = torch.sort(torch.cat([t, new_t], -1), -1)
            sdf = torch.cat([sdf, sdf_new], -1).gather(1, order)
        return t


def render_rays(
    model: RadianceModel,
    origins,
    dirs,
    cfg: RenderConfig = RenderConfig(),
    rng: np.random.Generator | None = None,
    create_graph: bool = False,
    t: torch.Tensor | None = None,
    aabb=None,
) -> RenderOutput:
    """Render a batch of rays.  ``t`` (R,S) fixes the sample distances (skips sampling)."""
    o = as_tensor(origins).reshape(-1, 3)
    d = as_tensor(dirs).reshape(-1, 3)
    r = o.shape[0]
    bg = torch.tensor(cfg.background, dtype=DTYPE)
    if t is None:
        lo, hi = aabb if aabb is not None else model.aabb
        near, far, hit = ray_aabb(o, d, lo, hi)
        if not bool(hit.any()):
            z = torch.zeros(r, dtype=DTYPE)
            return RenderOutput(bg.expand(r, 3).clone(), z, z.clone(), torch.zeros(r, 3, dtype=DTYPE), torch.zeros(r, 0, dtype=DTYPE), hit)
        idx = torch.nonzero(hit).reshape(-1)
        sub = render_rays(model, o[idx], d[idx], cfg, rng, create_graph, t=_sample_ts(model, o[idx], d[idx], near[idx], far[idx], cfg, rng))
        return _scatter(sub, idx, r, bg)
    t = as_tensor(t)
    x = o[:, None] + d[:, None] * t[..., None]
    s_count = t.shape[1]
    flat = model.field.sample(x.reshape(-1, 3), with_grad=True, create_graph=create_graph)
    sdf = flat.sdf.reshape(r, s_count)
    s = model.sharpness()
    alpha = sdf_to_alpha(sdf[:, :-1], sdf[:, 1:], s)
    n_front = s_count - 1
    xs = x[:, :-1].reshape(-1, 3)
    grads = flat.gradient.reshape(r, s_count, 3)[:, :-1].reshape(-1, 3)
    feats = flat.feature.reshape(r, s_count, -1)[:, :-1].reshape(r * n_front, -1)
    enc = None
    if flat.encoding is not None:
        enc = flat.encoding.reshape(r, s_count, -1)[:, :-1].reshape(r * n_front, -1)
    front = FieldSample(xs, sdf[:, :-1].reshape(-1), feats, grads, enc)
    normals = front.normal
    dd = d[:, None].expand(r, n_front, 3).reshape(-1, 3)
    rad = model.radiance(xs, dd, front)
    one = torch.ones_like(alpha[..., :1])
    trans = torch.cumprod(torch.cat([one, 1.0 - alpha[..., :-1]], -1), -1)
    w = trans * alpha
    opacity = w.sum(-1)
    aux = {k: v.reshape((r, n_front) + tuple(v.shape[1:])) for k, v in rad.items()}
    if cfg.blend_mode == "sample" or "c_view" not in aux:
        color = (w.unsqueeze(-1) * aux["color"]).sum(-2)
    else:
        cv = (w.unsqueeze(-1) * aux["c_view"]).sum(-2)
        cr = (w.unsqueeze(-1) * aux["c_ref"]).sum(-2)
        wb = (w * aux["w"]).sum(-1) / opacity.clamp_min(1e-12)
        color = wb.unsqueeze(-1) * cv + (1.0 - wb.unsqueeze(-1)) * cr
    color = color + (1.0 - opacity).unsqueeze(-1) * bg
    depth = (w * t[:, :-1]).sum(-1)
    nrm = normalize((w.unsqueeze(-1) * normals.reshape(r, n_front, 3)).sum(-2))
    aux["normals"] = normals.reshape(r, n_front, 3)
    aux["grad"] = grads.reshape(r, n_front, 3)
    samples = RaySampleSet(o, d, t, torch.diff(t, dim=-1, prepend=t[:, :1]), flat, alpha, trans, w)
    return RenderOutput(color, depth, opacity, nrm, w, torch.ones(r, dtype=torch.bool), samples, aux)


def _scatter(sub: RenderOutput, idx: torch.Tensor, r: int, bg: torch.Tensor) -> RenderOutput:
    color = bg.expand(r, 3).clone()
    color = color.index_copy(0, idx, sub.color)
    z = torch.zeros(r, dtype=DTYPE)
    depth = z.index_copy(0, idx, sub.depth)
    opacity = z.index_copy(0, idx, sub.opacity)
    nrm = torch.zeros(r, 3, dtype=DTYPE).index_copy(0, idx, sub.normal)
    hit = torch.zeros(r, dtype=torch.bool)
    hit[idx] = True
    out = RenderOutput(color, depth, opacity, nrm, sub.weights, hit, sub.samples, sub.aux)
    out.aux["ray_index"] = idx
    return out


def render_image(
    model: RadianceModel,
    cam: Camera,
    cfg: RenderConfig = RenderConfig(),
    supersample: int = 1,
    chunk: int | None = None,
) -> dict[str, np.ndarray]:
    """Deterministic (non-stratified) render -> rgb (H,W,3), depth, opacity, normal (H,W,3)."""
    cfg = RenderConfig(**{**cfg.__dict__, "stratified": False})
    o, d = image_rays(cam, supersample)
    chunk = chunk or cfg.chunk
    cols, deps, ops, nrms = [], [], [], []
    for s in range(0, len(o), chunk):
        out = render_rays(model, o[s : s + chunk], d[s : s + chunk], cfg)
        cols.append(out.color.detach().numpy())
        deps.append(out.depth.detach().numpy())
        ops.append(out.opacity.detach().numpy())
        nrms.append(out.normal.detach().numpy())
    k = supersample * supersample
    h, w = cam.height, cam.width

    def pool(a):
        a = np.concatenate(a)
        return a.reshape((h, w, k) + a.shape[1:]).mean(axis=2)

    rgb, depth, opacity, nrm = pool(cols), pool(deps), pool(ops), pool(nrms)
    nlen = np.linalg.norm(nrm, axis=-1, keepdims=True)
    nrm = np.where(nlen > 1e-9, nrm / np.maximum(nlen, 1e-12), 0.0)
    return {"rgb": rgb, "depth": depth, "opacity": opacity, "normal": nrm}
