"""Blended view/reflection radiance fields with an anisotropic spherical Gaussian encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .autodiff import DTYPE, MLPSpec, ParameterStore, as_tensor, maximum0, mlp_forward, mlp_init, softplus
from .geometry import fibonacci_sphere


@dataclass(frozen=True)
class AppearanceConfig:
    n_lobes: int = 8
    view_layers: int = 2
    view_width: int = 64
    ref_layers: int = 2
    ref_width: int = 128
    weight_layers: int = 1
    weight_width: int = 64
    fpar_layers: int = 1
    fpar_width: int = 64
    dir_bands: int = 4


@dataclass(frozen=True)
class ASGLobe:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    sharp_x: float
    sharp_y: float
    amplitude: np.ndarray


def lobe_frames(n: int) -> np.ndarray:
    """(n, 3, 3) fixed orthonormal frames, rows [x, y, z]; z on a Fibonacci sphere."""
    zs = fibonacci_sphere(n)
    frames = np.empty((n, 3, 3))
    for i, z in enumerate(zs):
        helper = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        x = helper - helper.dot(z) * z
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        frames[i] = (x, y, z)
    return frames


def reflect(d, n):
    """Mirror the camera->scene direction d about the normal n."""
    return 2.0 * (-(d * n).sum(-1, keepdim=True)) * n + d


def asg_eval(frames, sharp_x, sharp_y, amplitude, omega):
    """amplitude * max(omega.z, 0) * exp(-sharp_x (omega.x)^2 - sharp_y (omega.y)^2).

    frames (N,3,3); sharp_x/sharp_y (..., N); amplitude (..., N, 2); omega (..., 3).
    Returns (..., N, 2).
    """
    frames = as_tensor(frames)
    n = frames.shape[0]
    proj = (omega @ frames.reshape(n * 3, 3).T).reshape(omega.shape[:-1] + (n, 3))  # omega . [x, y, z]
    smooth = maximum0(proj[..., 2])
    expo = torch.exp(-sharp_x * proj[..., 0] ** 2 - sharp_y * proj[..., 1] ** 2)
    return amplitude * (smooth * expo).unsqueeze(-1)


def asg_eval_lobe(lobe: ASGLobe, omega) -> np.ndarray:
    frames = np.stack([lobe.x, lobe.y, lobe.z])[None]
    out = asg_eval(
        frames,
        as_tensor([lobe.sharp_x]),
        as_tensor([lobe.sharp_y]),
        as_tensor(np.asarray(lobe.amplitude, dtype=float)[None]),
        as_tensor(omega),
    )
    return out[0].numpy()


def direction_encoding(d: torch.Tensor, bands: int) -> torch.Tensor:
    feats = [d]
    for k in range(bands):
        feats += [torch.sin((2.0**k) * math.pi * d), torch.cos((2.0**k) * math.pi * d)]
    return torch.cat(feats, dim=-1)


class AppearanceField:
    """Psi_v, Psi_r, Psi_w and f_par registered under ``app.*`` ids."""

    def __init__(
        self,
        store: ParameterStore,
        feature_dim: int,
        position_encoding: Callable[[torch.Tensor], torch.Tensor],
        position_dim: int,
        cfg: AppearanceConfig = AppearanceConfig(),
        rng: np.random.Generator | None = None,
        center=(0.0, 0.0, 0.0),
        init: str = "kaiming",
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = store
        self.cfg = cfg
        self.position_encoding = position_encoding
        self.center = torch.tensor(center, dtype=DTYPE)
        self.frames = torch.tensor(lobe_frames(cfg.n_lobes), dtype=DTYPE)
        dir_dim = 3 * (1 + 2 * cfg.dir_bands)
        n = cfg.n_lobes
        self.specs = {
            "fpar": MLPSpec(feature_dim + 3, cfg.fpar_layers, cfg.fpar_width, 4 * n, "relu"),
            "view": MLPSpec(position_dim + dir_dim + 3 + feature_dim, cfg.view_layers, cfg.view_width, 3, "relu", "sigmoid"),
            "ref": MLPSpec(2 * n + 3, cfg.ref_layers, cfg.ref_width, 3, "relu", "sigmoid"),
            "weight": MLPSpec(3 + 3 + feature_dim, cfg.weight_layers, cfg.weight_width, 1, "relu"),
        }
        for k, spec in self.specs.items():
            mlp_init(store, f"app.{k}", spec, rng, scheme=init)

    def asg_params(self, feature, normal):
        raw = mlp_forward(self.specs["fpar"], self.store, torch.cat([feature, normal], -1), "app.fpar")
        n = self.cfg.n_lobes
        sharp_x = softplus(raw[..., :n])
        sharp_y = softplus(raw[..., n : 2 * n])
        amp = torch.sigmoid(raw[..., 2 * n :]).reshape(raw.shape[:-1] + (n, 2))
        return sharp_x, sharp_y, amp

    def asg_feature(self, omega_r, params):
        sharp_x, sharp_y, amp = params
        f = asg_eval(self.frames, sharp_x, sharp_y, amp, omega_r)
        return f.reshape(f.shape[:-2] + (-1,))

    def view_color(self, x, d, normal, feature, pos_enc=None):
        pos_enc = self.position_encoding(x) if pos_enc is None else pos_enc
        inp = torch.cat(
            [pos_enc, direction_encoding(d, self.cfg.dir_bands), normal, feature], -1
        )
        return mlp_forward(self.specs["view"], self.store, inp, "app.view")

    def ref_color(self, f_asg, omega_r):
        return mlp_forward(self.specs["ref"], self.store, torch.cat([f_asg, omega_r], -1), "app.ref")

    def blend_weight(self, x, normal, feature):
        raw = mlp_forward(self.specs["weight"], self.store, torch.cat([x - self.center, normal, feature], -1), "app.weight")
        return torch.sigmoid(raw[..., 0])

    def __call__(self, x, d, normal, feature, pos_enc=None) -> dict[str, torch.Tensor]:
        """``pos_enc`` may carry a precomputed position encoding of ``x``."""
        omega_r = reflect(d, normal)
        c_view = self.view_color(x, d, normal, feature, pos_enc)
        f_asg = self.asg_feature(omega_r, self.asg_params(feature, normal))
        c_ref = self.ref_color(f_asg, omega_r)
        w = self.blend_weight(x, normal, feature)
        return {"c_view": c_view, "c_ref": c_ref, "w": w, "color": blend(c_view, c_ref, w)}


def blend(c_view, c_ref, w):
    w = w.unsqueeze(-1) if torch.is_tensor(w) and w.ndim == c_view.ndim - 1 else w
    return w * c_view + (1.0 - w) * c_ref
