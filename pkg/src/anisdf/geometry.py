"""Fused-granularity SDF: coarse and fine branch MLPs whose outputs are summed."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .autodiff import DTYPE, DimensionError, MLPSpec, ParameterStore, as_tensor, mlp_forward, normalize
from .hashgrid import GridConfig, HashGrid


@dataclass(frozen=True)
class GeometryConfig:
    feature_dim: int = 15
    hidden_layers: int = 2
    hidden_width: int = 64
    init_radius: float = 0.5
    use_fine: bool = True
    softplus_beta: float = 100.0


@dataclass
class EncodedFeature:
    values: torch.Tensor
    which: str
    points: torch.Tensor


@dataclass
class BranchOutput:
    sdf: torch.Tensor
    feature: torch.Tensor


@dataclass
class FieldSample:
    position: torch.Tensor
    sdf: torch.Tensor
    feature: torch.Tensor
    gradient: torch.Tensor | None = None
    encoding: torch.Tensor | None = None  # coarse grid features, reused by the appearance net

    @property
    def normal(self) -> torch.Tensor:
        return normalize(self.gradient)


def _with_gradient(x: torch.Tensor, sdf_fn, create_graph: bool):
    """Evaluate ``sdf_fn`` and d sdf / d x by backprop."""
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        sdf, feat = sdf_fn(x)
        (g,) = torch.autograd.grad(sdf.sum(), x, create_graph=create_graph)
    if not create_graph:
        sdf, feat = sdf.detach(), feat.detach()
    return x, sdf, feat, g


class SDFField:
    """Common interface: ``sample(x, with_grad, create_graph) -> FieldSample``."""

    feature_dim: int = 0

    def sdf_and_feature(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def sample(self, x, with_grad: bool = True, create_graph: bool = False) -> FieldSample:
        x = as_tensor(x)
        if not with_grad:
            with torch.no_grad():
                sdf, feat = self.sdf_and_feature(x)
            return FieldSample(x, sdf, feat, None)
        x, sdf, feat, g = _with_gradient(x, self.sdf_and_feature, create_graph)
        return FieldSample(x, sdf, feat, g)

    # numpy conveniences for meshing / evaluation
    def sdf_numpy(self, pts: np.ndarray, chunk: int = 65536) -> np.ndarray:
        out = np.empty(len(pts))
        for s in range(0, len(pts), chunk):
            with torch.no_grad():
                out[s : s + chunk] = self.sdf_and_feature(as_tensor(pts[s : s + chunk]))[0].numpy()
        return out

    def gradient_numpy(self, pts: np.ndarray, chunk: int = 32768) -> np.ndarray:
        out = np.empty((len(pts), 3))
        for s in range(0, len(pts), chunk):
            out[s : s + chunk] = self.sample(pts[s : s + chunk]).gradient.detach().numpy()
        return out


class AnalyticField(SDFField):
    """Closed-form SDF (torch expression) with an all-zero feature vector."""

    def __init__(self, fn: Callable[[torch.Tensor], torch.Tensor], feature_dim: int = 15, scale: float = 1.0):
        self.fn = fn
        self.feature_dim = feature_dim
        self.scale = scale

    def sdf_and_feature(self, x):
        sdf = self.scale * self.fn(x)
        return sdf, torch.zeros(x.shape[:-1] + (self.feature_dim,), dtype=DTYPE)


def sphere_field(radius: float = 0.5, center=(0.0, 0.0, 0.0), **kw) -> AnalyticField:
    c = torch.tensor(center, dtype=DTYPE)
    return AnalyticField(lambda x: torch.linalg.vector_norm(x - c, dim=-1) - radius, **kw)


def plane_field(a, c: float, **kw) -> AnalyticField:
    a = torch.tensor(a, dtype=DTYPE)
    return AnalyticField(lambda x: x @ a - c, **kw)


def fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly uniform unit vectors (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


class GeometryField(SDFField):
    """SDF = SDF^c + k * SDF^f and F = F^c + k * F^f with fine scale k in [0, 1].

    ``mode="fused"`` (default) evaluates the grids with the numba kernels and pushes
    spatial tangents forward through the MLPs, so gradients come out without double
    backprop.  ``mode="autograd"`` is the plain reference path.
    """

    mode: str = "fused"

    def __init__(
        self,
        store: ParameterStore,
        grid_cfg: GridConfig,
        cfg: GeometryConfig = GeometryConfig(),
        rng: np.random.Generator | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = store
        self.grid_cfg = grid_cfg
        self.cfg = cfg
        self.feature_dim = cfg.feature_dim
        self.fine_scale = 1.0
        self.grids = {"coarse": HashGrid(store, grid_cfg, "coarse", rng)}
        if cfg.use_fine:
            self.grids["fine"] = HashGrid(store, grid_cfg, "fine", rng)
        self.specs = {
            k: MLPSpec(3 + g.dim, cfg.hidden_layers, cfg.hidden_width, 1 + cfg.feature_dim, "softplus100")
            for k, g in self.grids.items()
        }
        self._init_coarse(rng)
        if cfg.use_fine:
            self._init_fine(rng)

    @property
    def branches(self) -> list[str]:
        return list(self.grids)

    def _dims(self, which):
        return self.specs[which].layer_dims()

    def _init_coarse(self, rng):
        # sphere initialization: first-layer rows are evenly spread unit directions,
        # deeper hidden layers near identity, output row fitted to |x - c| - r
        dims = self._dims("coarse")
        n = len(dims)
        for i, (din, dout) in enumerate(dims):
            b = np.zeros(dout)
            if i == 0:
                w = np.zeros((dout, din))
                w[:, :3] = fibonacci_sphere(dout)
            elif i < n - 1:
                w = np.eye(dout, din) + rng.normal(0.0, 1e-3, (dout, din))
            else:
                w = rng.normal(0.0, 1e-4, (dout, din))
                b[0] = -self.cfg.init_radius
            self.store.add(f"geo.coarse.l{i}.weight", w)
            self.store.add(f"geo.coarse.l{i}.bias", b)
        self._refit_sphere(rng)

    def _hidden(self, x: torch.Tensor, which: str) -> torch.Tensor:
        n = len(self._dims(which))
        h = torch.cat([x - self._center(), self.grids[which].encode(x)[0]], dim=-1)
        for i in range(n - 1):
            h = torch.nn.functional.linear(h, self.store[f"geo.{which}.l{i}.weight"], self.store[f"geo.{which}.l{i}.bias"])
            h = torch.nn.functional.softplus(h, beta=self.cfg.softplus_beta)
        return h

    def _refit_sphere(self, rng, n_points: int = 4096):
        """Least-squares fit of the SDF output row to |x - c| - r and to its gradient.

        Both targets are linear in the last layer, so one regularized solve suffices.
        """
        n = len(self._dims("coarse"))
        lo = np.asarray(self.grid_cfg.aabb_min)
        hi = np.asarray(self.grid_cfg.aabb_max)
        center = 0.5 * (lo + hi)
        pts = rng.uniform(lo, hi, (n_points, 3))
        rel = pts - center
        dist = np.linalg.norm(rel, axis=1)
        keep = dist > 0.05
        pts, rel, dist = pts[keep], rel[keep], dist[keep]
        x = torch.tensor(pts, dtype=DTYPE)
        with torch.no_grad():
            hv = self._hidden(x, "coarse").numpy()
        cols = []
        for k in range(3):
            tangent = torch.zeros_like(x)
            tangent[:, k] = 1.0
            _, jk = torch.func.jvp(lambda y: self._hidden(y, "coarse"), (x,), (tangent,))
            cols.append(jk.detach().numpy())
        width = hv.shape[1]
        jv = np.stack(cols, axis=1).reshape(-1, width)  # rows: (point, axis)
        a = np.vstack([np.hstack([hv, np.ones((len(hv), 1))]), np.hstack([jv, np.zeros((len(jv), 1))])])
        b = np.concatenate([dist - self.cfg.init_radius, (rel / dist[:, None]).reshape(-1)])
        sol = np.linalg.solve(a.T @ a + 1e-8 * np.eye(a.shape[1]), a.T @ b)
        w = self.store[f"geo.coarse.l{n - 1}.weight"].detach().numpy().copy()
        bias = self.store[f"geo.coarse.l{n - 1}.bias"].detach().numpy().copy()
        w[0], bias[0] = sol[:-1], sol[-1]
        self.store.set_values(f"geo.coarse.l{n - 1}.weight", w)
        self.store.set_values(f"geo.coarse.l{n - 1}.bias", bias)

    def _init_fine(self, rng):
        dims = self._dims("fine")
        n = len(dims)
        for i, (din, dout) in enumerate(dims):
            if i == n - 1:
                w = np.zeros((dout, din))
            else:
                w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(dout), (dout, din))
                if i == 0:
                    w[:, :3] = 0.0
            self.store.add(f"geo.fine.l{i}.weight", w)
            self.store.add(f"geo.fine.l{i}.bias", np.zeros(dout))

    def _center(self) -> torch.Tensor:
        return 0.5 * (torch.tensor(self.grid_cfg.aabb_min, dtype=DTYPE) + torch.tensor(self.grid_cfg.aabb_max, dtype=DTYPE))

    def encode(self, x, which: str) -> EncodedFeature:
        if which not in self.grids:
            raise ValueError(f"branch {which!r} not enabled")
        x = as_tensor(x) if not torch.is_tensor(x) else x
        return EncodedFeature(self.grids[which].encode(x)[0], which, x)

    def branch_eval(self, enc: EncodedFeature, which: str) -> BranchOutput:
        if enc.which != which:
            raise DimensionError(f"{enc.which} encoding passed to {which} branch")
        spec = self.specs[which]
        if enc.values.shape[-1] != spec.input_dim - 3:
            raise DimensionError(f"{which} branch expects {spec.input_dim - 3} features, got {enc.values.shape[-1]}")
        inp = torch.cat([enc.points - self._center(), enc.values], dim=-1)
        out = mlp_forward(spec, self.store, inp, f"geo.{which}")
        return BranchOutput(out[..., 0], out[..., 1:])

    def _branch_fused(self, x: torch.Tensor, which: str, want_jac: bool):
        enc, jenc = self.grids[which].encode_with_jacobian(x, want_jac)
        h = torch.cat([x - self._center(), enc], dim=-1)
        jh = None
        if want_jac:
            eye = torch.eye(3, dtype=DTYPE).unsqueeze(1).expand(3, x.shape[0], 3)
            jh = torch.cat([eye, jenc], dim=-1)  # (3, P, D)
        n = len(self._dims(which))
        beta = self.cfg.softplus_beta
        for i in range(n):
            w = self.store[f"geo.{which}.l{i}.weight"]
            h = torch.nn.functional.linear(h, w, self.store[f"geo.{which}.l{i}.bias"])
            if jh is not None:
                jh = jh @ w.T
            if i < n - 1:
                if jh is not None:
                    jh = jh * torch.sigmoid(beta * h)
                h = torch.nn.functional.softplus(h, beta=beta)
        grad = jh[..., 0].T if jh is not None else None
        return h[..., 0], h[..., 1:], grad, enc

    def _fused(self, x: torch.Tensor, want_jac: bool) -> FieldSample:
        shape = x.shape[:-1]
        xf = x.detach().reshape(-1, 3)
        sdf, feat, grad, enc = self._branch_fused(xf, "coarse", want_jac)
        if "fine" in self.grids and self.fine_scale != 0.0:
            k = self.fine_scale
            fs, ff, fg, _ = self._branch_fused(xf, "fine", want_jac)
            sdf, feat = sdf + k * fs, feat + k * ff
            if want_jac:
                grad = grad + k * fg
        return FieldSample(
            x,
            sdf.reshape(shape),
            feat.reshape(shape + (-1,)),
            grad.reshape(shape + (3,)) if grad is not None else None,
            enc.reshape(shape + (-1,)),
        )

    def sample(self, x, with_grad: bool = True, create_graph: bool = False) -> FieldSample:
        x = as_tensor(x) if not torch.is_tensor(x) else x
        if self.mode != "fused" or x.requires_grad:
            return super().sample(x, with_grad, create_graph)
        if not with_grad:
            with torch.no_grad():
                return self._fused(x, False)
        return self._fused(x, True)

    def sdf_and_feature(self, x):
        if self.mode == "fused" and not (torch.is_tensor(x) and x.requires_grad):
            out = self._fused(as_tensor(x), False)
            return out.sdf, out.feature
        c = self.branch_eval(self.encode(x, "coarse"), "coarse")
        sdf, feat = c.sdf, c.feature
        if "fine" in self.grids and self.fine_scale != 0.0:
            f = self.branch_eval(self.encode(x, "fine"), "fine")
            if self.fine_scale == 1.0:
                sdf, feat = sdf + f.sdf, feat + f.feature
            else:
                sdf, feat = sdf + self.fine_scale * f.sdf, feat + self.fine_scale * f.feature
        return sdf, feat

    def coarse_encoding(self, x) -> torch.Tensor:
        return self.grids["coarse"].encode(x)[0]


def fused_sdf(field: SDFField, x, create_graph: bool = False) -> FieldSample:
    return field.sample(x, with_grad=True, create_graph=create_graph)


def normal(field: SDFField, x) -> torch.Tensor:
    return field.sample(x).normal


def eikonal_residual(field: SDFField, x, create_graph: bool = False) -> torch.Tensor:
    g = field.sample(x, create_graph=create_graph).gradient
    return (torch.linalg.vector_norm(g, dim=-1) - 1.0) ** 2
