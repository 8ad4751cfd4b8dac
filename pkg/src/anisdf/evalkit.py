"""Rendering and geometry metrics: PSNR, Chamfer distance, normal mean angular error."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

PSNR_CAP = 99.0
CHAMFER_VARIANT = "mean-of-means-L2"


def psnr(img_a, img_b, max_value: float = 1.0) -> float:
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_value**2 / mse))


def chamfer(points_a, points_b) -> float:
    """0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|)  (unsquared distances)."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def normal_mae(normals_pred, normals_gt, mask=None) -> float:
    """Mean angle in degrees between unit normals over ``mask``."""
    p = np.asarray(normals_pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(normals_gt, dtype=np.float64).reshape(-1, 3)
    m = np.ones(len(p), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if not m.any():
        raise ValueError("normal_mae: empty mask")
    cos = np.clip((p[m] * g[m]).sum(-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def sample_surface(vertices, faces, n: int = 100_000, seed: int = 0) -> np.ndarray:
    """Uniform-by-area points on a triangle mesh."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if len(f) == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    tri = v[f]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    pick = rng.choice(len(f), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    t = tri[pick]
    return (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]


def mean_blend_weight(weights, blend, mask=None) -> float:
    """Average over rays of the compositing-weighted blend weight, sum_i w_i b_i / sum_i w_i."""
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(blend, dtype=np.float64).reshape(w.shape)
    tot = w.sum(-1)
    m = tot > 0 if mask is None else np.asarray(mask, dtype=bool) & (tot > 0)
    if not m.any():
        raise ValueError("mean_blend_weight: no ray carries weight")
    return float(((w * b).sum(-1)[m] / tot[m]).mean())


def rod_coverage(vertices, labels, a, b, tol: float = 0.03, bins: int = 20) -> float:
    """Best single-component coverage of segment a-b.

    A component covers a length bin when one of its vertices lies within ``tol``
    of the axis there; the score is the largest covered fraction over components.
    """
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        return 0.0
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ab = b - a
    h = (v - a) @ ab / (ab @ ab)
    dist = np.linalg.norm(v - a - h[:, None] * ab, axis=1)
    near = (h >= 0) & (h <= 1) & (dist <= tol)
    labels = np.asarray(labels)
    best = 0.0
    for k in np.unique(labels[near]):
        sel = near & (labels == k)
        hit = np.unique(np.minimum((h[sel] * bins).astype(int), bins - 1))
        best = max(best, len(hit) / bins)
    return best


def report(metric: str, value: float, variant: str = "", n_samples: int = 0, seed: int = 0, **extra) -> dict:
    out = {"metric": metric, "value": float(value), "variant": variant, "n_samples": int(n_samples), "seed": int(seed)}
    out.update(extra)
    return out
