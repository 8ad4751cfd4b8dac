"""Training objectives: photometric, Eikonal, curvature, orientation and alpha-entropy terms."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch

from .autodiff import DTYPE, as_tensor, maximum0, normalize
from .geometry import SDFField

ALPHA_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    eikonal: float = 0.1
    curvature: float = 0.001
    orientation: float = 0.001
    alpha: float = 0.01

    def __post_init__(self):
        if min(self.eikonal, self.curvature, self.orientation, self.alpha) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    rgb: float
    eik: float
    curv: float
    orient: float
    alpha: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def rgb_loss(c, c_gt):
    c, c_gt = as_tensor(c), as_tensor(c_gt)
    if c.shape != c_gt.shape:
        raise ValueError(f"shape mismatch {tuple(c.shape)} vs {tuple(c_gt.shape)}")
    return ((c - c_gt) ** 2).sum(-1).mean()


def eikonal_from_gradients(grad):
    return ((torch.linalg.vector_norm(as_tensor(grad), dim=-1) - 1.0) ** 2).mean()


def eikonal_loss(field: SDFField, points, create_graph: bool = True):
    g = field.sample(points, create_graph=create_graph).gradient
    return eikonal_from_gradients(g)


def random_tangents(normals: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Unit vectors orthogonal to ``normals`` (treated as constants)."""
    n = normals.detach()
    r = torch.as_tensor(rng.normal(size=tuple(n.shape)), dtype=DTYPE)
    tang = r - (r * n).sum(-1, keepdim=True) * n
    return normalize(tang)


def curvature_from_normals(n, n_eps):
    return (((as_tensor(n) * as_tensor(n_eps)).sum(-1) - 1.0) ** 2).mean()


def curvature_loss(field: SDFField, points, epsilon: float = 0.01, rng: np.random.Generator | None = None, tangents=None, create_graph: bool = True):
    """Mean (n(x) . n(x + eps*tau) - 1)^2 with tau a random unit tangent at x."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = as_tensor(points)
    n = field.sample(x, create_graph=create_graph).normal
    if tangents is None:
        tangents = random_tangents(n, rng if rng is not None else np.random.default_rng(0))
    n_eps = field.sample(x.detach() + epsilon * as_tensor(tangents), create_graph=create_graph).normal
    return curvature_from_normals(n, n_eps)


def orientation_loss(weights, normals, dirs):
    """Mean over rays of sum_i w_i max(0, n_i . d)^2 (d camera->scene)."""
    w, n, d = as_tensor(weights), as_tensor(normals), as_tensor(dirs)
    if d.ndim == n.ndim - 1:
        d = d.unsqueeze(-2)
    back = maximum0((n * d).sum(-1)) ** 2
    per_ray = (w * back).sum(-1) if w.ndim >= 1 else w * back
    return per_ray.mean()


def alpha_entropy_loss(alphas):
    """Mean binary self-entropy -[a ln a + (1-a) ln(1-a)], a clamped to [1e-7, 1-1e-7]."""
    a = as_tensor(alphas).clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP)
    return (-(a * torch.log(a) + (1.0 - a) * torch.log(1.0 - a))).mean()


def total_loss(rgb, eik, curv, orient, alpha, weights: LossWeights = LossWeights()):
    """Weighted sum; returns (tensor, LossReport) with the identity holding on the floats."""
    parts = [as_tensor(v) if not torch.is_tensor(v) else v for v in (rgb, eik, curv, orient, alpha)]
    lam = (1.0, weights.eikonal, weights.curvature, weights.orientation, weights.alpha)
    total = parts[0] * lam[0]
    for p, l in zip(parts[1:], lam[1:]):
        total = total + l * p
    vals = [float(p.detach()) for p in parts]
    tot = vals[0] + lam[1] * vals[1] + lam[2] * vals[2] + lam[3] * vals[3] + lam[4] * vals[4]
    return total, LossReport(*vals, total=tot)
