"""Multiresolution hash-grid encodings for the coarse and fine level sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numba
import numpy as np
import torch
from torch.autograd.function import once_differentiable

from .autodiff import DTYPE, ParameterStore, as_tensor

PRIMES = (1, 2654435761, 805459861)

_CORNERS = torch.tensor(
    [[(i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=torch.int64
)


@dataclass(frozen=True)
class GridConfig:
    total_levels: int = 16
    coarse_range: tuple[int, int] = (4, 10)
    fine_range: tuple[int, int] = (10, 16)
    base_resolution: int = 16
    max_resolution: int = 2048
    features_per_level: int = 2
    table_size: int = 2**19
    aabb_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    aabb_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    init_scale: float = 1e-4

    def __post_init__(self):
        lmin, m = self.coarse_range
        m2, L = self.fine_range
        if not (1 <= lmin < m == m2 < L <= self.total_levels):
            raise ValueError(f"need 1 <= l_min < m < L <= total_levels, got {self.coarse_range}, {self.fine_range}")
        if not self.base_resolution < self.max_resolution:
            raise ValueError("base_resolution must be below max_resolution")
        if self.features_per_level < 1 or self.table_size < 1:
            raise ValueError("features_per_level and table_size must be positive")
        if any(a >= b for a, b in zip(self.aabb_min, self.aabb_max)):
            raise ValueError("degenerate AABB")

    def levels(self, which: str) -> list[int]:
        lo, hi = self.coarse_range if which == "coarse" else self.fine_range
        return list(range(lo, hi + 1))

    def encoding_dim(self, which: str) -> int:
        return len(self.levels(which)) * self.features_per_level

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def level_resolution(level: int, cfg: GridConfig) -> int:
    """floor(N_min * b^(l-1)), b = (N_max/N_min)^(1/(L_total-1))."""
    if not 1 <= level <= cfg.total_levels:
        raise ValueError(f"level {level} outside [1, {cfg.total_levels}]")
    growth = math.log(cfg.max_resolution / cfg.base_resolution) / (cfg.total_levels - 1)
    n = cfg.base_resolution * math.exp(growth * (level - 1))
    # exact endpoints despite exp/log round-off
    return int(math.floor(n * (1.0 + 1e-12)))


def is_dense(level: int, cfg: GridConfig) -> bool:
    n = level_resolution(level, cfg)
    return (n + 1) ** 3 <= cfg.table_size


def table_entries(level: int, cfg: GridConfig) -> int:
    n = level_resolution(level, cfg)
    return (n + 1) ** 3 if is_dense(level, cfg) else cfg.table_size


def hash_index(cell, level: int, cfg: GridConfig):
    """Table index of an integer lattice corner (works on ints, numpy or torch int64 arrays)."""
    n = level_resolution(level, cfg)
    if torch.is_tensor(cell):
        x, y, z = cell[..., 0], cell[..., 1], cell[..., 2]
    else:
        c = np.asarray(cell, dtype=np.int64)
        x, y, z = c[..., 0], c[..., 1], c[..., 2]
    if (n + 1) ** 3 <= cfg.table_size:
        idx = x + y * (n + 1) + z * (n + 1) ** 2
    else:
        idx = (x * PRIMES[0]) ^ (y * PRIMES[1]) ^ (z * PRIMES[2])
        idx = idx % cfg.table_size
    if not torch.is_tensor(idx) and np.ndim(idx) == 0:
        return int(idx)
    return idx


def to_unit_cube(x: torch.Tensor, cfg: GridConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Map scene points to [0,1]^3; returns (clamped coords, outside flag per point)."""
    lo = torch.tensor(cfg.aabb_min, dtype=DTYPE)
    hi = torch.tensor(cfg.aabb_max, dtype=DTYPE)
    u = (x - lo) / (hi - lo)
    outside = ((u < 0) | (u > 1)).any(-1)
    return u.clamp(0.0, 1.0), outside


def encode_level(u: torch.Tensor, table: torch.Tensor, level: int, cfg: GridConfig) -> torch.Tensor:
    """Trilinear blend of the 8 corner entries around ``u`` (in [0,1]^3)."""
    n = level_resolution(level, cfg)
    p = u * n
    base = torch.floor(p.detach()).clamp(0, n - 1)
    frac = p - base
    corners = base.to(torch.int64).unsqueeze(-2) + _CORNERS  # (..., 8, 3)
    idx = hash_index(corners, level, cfg)
    sel = _CORNERS.to(DTYPE)
    f = frac.unsqueeze(-2)
    w = (sel * f + (1 - sel) * (1 - f)).prod(-1)  # (..., 8)
    feats = table[idx]  # (..., 8, F)
    return (w.unsqueeze(-1) * feats).sum(-2)


# ---------------------------------------------------------------------------
# Fused kernels: encoding plus its exact spatial Jacobian in one pass.  Used by
# the training path; ``encode_level`` above stays the autograd reference.
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _level_forward(u, table, res, tsize, dense, scale, want_jac, enc, jac, idx, w, dw):
    n_pts = u.shape[0]
    n_feat = table.shape[1]
    r1 = res + 1
    for p in range(n_pts):
        b0 = min(max(np.floor(u[p, 0] * res), 0.0), res - 1.0)
        b1 = min(max(np.floor(u[p, 1] * res), 0.0), res - 1.0)
        b2 = min(max(np.floor(u[p, 2] * res), 0.0), res - 1.0)
        f0 = u[p, 0] * res - b0
        f1 = u[p, 1] * res - b1
        f2 = u[p, 2] * res - b2
        ib0, ib1, ib2 = np.int64(b0), np.int64(b1), np.int64(b2)
        for c in range(8):
            s0 = c & 1
            s1 = (c >> 1) & 1
            s2 = (c >> 2) & 1
            cx, cy, cz = ib0 + s0, ib1 + s1, ib2 + s2
            if dense:
                i = cx + cy * r1 + cz * r1 * r1
            else:
                i = (cx ^ (cy * np.int64(2654435761)) ^ (cz * np.int64(805459861))) % tsize
            wx = f0 if s0 else 1.0 - f0
            wy = f1 if s1 else 1.0 - f1
            wz = f2 if s2 else 1.0 - f2
            wc = wx * wy * wz
            idx[p, c] = i
            w[p, c] = wc
            for f in range(n_feat):
                enc[p, f] += wc * table[i, f]
            if want_jac:
                gx = (1.0 if s0 else -1.0) * wy * wz * res * scale[0]
                gy = (1.0 if s1 else -1.0) * wx * wz * res * scale[1]
                gz = (1.0 if s2 else -1.0) * wx * wy * res * scale[2]
                dw[p, c, 0] = gx
                dw[p, c, 1] = gy
                dw[p, c, 2] = gz
                for f in range(n_feat):
                    t = table[i, f]
                    jac[0, p, f] += gx * t
                    jac[1, p, f] += gy * t
                    jac[2, p, f] += gz * t


@numba.njit(cache=True)
def _level_backward(idx, w, dw, g_enc, g_jac, has_jac, grad):
    n_pts = idx.shape[0]
    n_feat = grad.shape[1]
    for p in range(n_pts):
        for c in range(8):
            i = idx[p, c]
            wc = w[p, c]
            for f in range(n_feat):
                v = wc * g_enc[p, f]
                if has_jac:
                    v += dw[p, c, 0] * g_jac[0, p, f] + dw[p, c, 1] * g_jac[1, p, f] + dw[p, c, 2] * g_jac[2, p, f]
                grad[i, f] += v


class _LevelEncode(torch.autograd.Function):
    """(table, u) -> (features (P,F), d features / d x (3,P,F)); differentiable in the table only."""

    @staticmethod
    def forward(ctx, table, u, res, tsize, dense, scale, want_jac):
        un = u.detach().numpy()
        tn = table.detach().numpy()
        n_pts, n_feat = un.shape[0], tn.shape[1]
        enc = np.zeros((n_pts, n_feat))
        jac = np.zeros((3, n_pts, n_feat) if want_jac else (3, 0, n_feat))
        idx = np.empty((n_pts, 8), dtype=np.int64)
        w = np.empty((n_pts, 8))
        dw = np.empty((n_pts, 8, 3) if want_jac else (0, 8, 3))
        _level_forward(un, tn, res, tsize, dense, scale, want_jac, enc, jac, idx, w, dw)
        ctx.saved = (idx, w, dw, tn.shape, want_jac)
        jt = torch.from_numpy(jac)
        if not want_jac:
            ctx.mark_non_differentiable(jt)
        return torch.from_numpy(enc), jt

    @staticmethod
    @once_differentiable
    def backward(ctx, g_enc, g_jac):
        idx, w, dw, shape, want_jac = ctx.saved
        grad = np.zeros(shape)
        ge = np.ascontiguousarray(g_enc.numpy()) if g_enc is not None else np.zeros((idx.shape[0], shape[1]))
        has_jac = want_jac and g_jac is not None
        gj = np.ascontiguousarray(g_jac.numpy()) if has_jac else np.zeros((3, 0, shape[1]))
        _level_backward(idx, w, dw, ge, gj, has_jac, grad)
        return torch.from_numpy(grad), None, None, None, None, None, None


def encode_level_with_jacobian(u: torch.Tensor, table: torch.Tensor, level: int, cfg: GridConfig, scale, want_jac: bool = True):
    """Fused trilinear encoding of unit-cube points; Jacobian is w.r.t. scene coordinates."""
    res = level_resolution(level, cfg)
    return _LevelEncode.apply(
        table, u.detach().contiguous(), res, cfg.table_size, is_dense(level, cfg), np.asarray(scale, dtype=np.float64), want_jac
    )


class HashGrid:
    """One granularity set (coarse or fine) of level tables registered in a store."""

    def __init__(self, store: ParameterStore, cfg: GridConfig, which: str, rng: np.random.Generator | None = None):
        if which not in ("coarse", "fine"):
            raise ValueError(which)
        self.cfg = cfg
        self.which = which
        self.store = store
        self.levels = cfg.levels(which)
        for lv in self.levels:
            pid = self.param_id(lv)
            if pid in store:
                continue
            shape = (table_entries(lv, cfg), cfg.features_per_level)
            vals = np.zeros(shape) if rng is None else rng.uniform(-cfg.init_scale, cfg.init_scale, shape)
            store.add(pid, vals)

    def param_id(self, level: int) -> str:
        return f"grid.{self.which}.l{level:02d}"

    @property
    def dim(self) -> int:
        return self.cfg.encoding_dim(self.which)

    def encode_unit(self, u: torch.Tensor) -> torch.Tensor:
        feats = [encode_level(u, self.store[self.param_id(lv)], lv, self.cfg) for lv in self.levels]
        return torch.cat(feats, dim=-1)

    def encode_with_jacobian(self, x, want_jac: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """Fast path: features (P,E) and their x-Jacobian (3,P,E); zero rows where x was clamped."""
        x = as_tensor(x).detach()
        u, _ = to_unit_cube(x, self.cfg)
        scale = 1.0 / (np.asarray(self.cfg.aabb_max) - np.asarray(self.cfg.aabb_min))
        feats, jacs = [], []
        for lv in self.levels:
            e, j = encode_level_with_jacobian(u, self.store[self.param_id(lv)], lv, self.cfg, scale, want_jac)
            feats.append(e)
            jacs.append(j)
        enc = torch.cat(feats, -1)
        jac = torch.cat(jacs, -1)
        if want_jac:
            lo = torch.tensor(self.cfg.aabb_min, dtype=DTYPE)
            hi = torch.tensor(self.cfg.aabb_max, dtype=DTYPE)
            inside = ((x >= lo) & (x <= hi)).to(DTYPE).T.unsqueeze(-1)  # (3,P,1)
            jac = jac * inside
        return enc, jac

    def encode(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        """Scene-space points -> (concatenated features, ascending level order; outside flags)."""
        u, outside = to_unit_cube(as_tensor(x), self.cfg)
        return self.encode_unit(u), outside


def encode_coarse(grid: HashGrid, x) -> torch.Tensor:
    assert grid.which == "coarse"
    return grid.encode(x)[0]


def encode_fine(grid: HashGrid, x) -> torch.Tensor:
    assert grid.which == "fine"
    return grid.encode(x)[0]
