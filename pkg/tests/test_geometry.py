import math

import numpy as np
import pytest
import torch

from anisdf.autodiff import DTYPE, DimensionError, Graph, ParameterStore, finite_difference_check
from anisdf.geometry import (
    AnalyticField,
    GeometryConfig,
    GeometryField,
    eikonal_residual,
    fused_sdf,
    normal,
    plane_field,
    sphere_field,
)
from anisdf.gradcheck import points_off_faces
from anisdf.hashgrid import GridConfig

GRID = GridConfig(table_size=2**12)


@pytest.fixture(scope="module")
def field():
    return GeometryField(ParameterStore(), GRID, GeometryConfig(hidden_width=32), np.random.default_rng(0))


def randomize(field, rng, scale=1e-2):
    for pid in field.store.ids("grid."):
        field.store.set_values(pid, rng.normal(0, scale, field.store[pid].shape))
    for pid in field.store.ids("geo.fine"):
        v = field.store[pid].detach().numpy()
        field.store.set_values(pid, v + rng.normal(0, 0.05, v.shape))


def test_geometric_init_is_a_sphere(field):
    pts = np.random.default_rng(1).uniform(-1, 1, (4000, 3))
    err = np.abs(field.sdf_numpy(pts) - (np.linalg.norm(pts, axis=1) - 0.5))
    assert err.max() < 0.05


def test_geometric_init_normal(field):
    n = normal(field, torch.tensor([[0.5, 0.0, 0.0]], dtype=DTYPE))[0].detach().numpy()
    assert math.degrees(math.acos(min(1.0, n @ [1.0, 0, 0]))) < 5


def test_zero_weight_branch_gives_bias():
    store = ParameterStore()
    f = GeometryField(store, GRID, GeometryConfig(hidden_width=8), np.random.default_rng(0))
    for pid in store.ids("geo.coarse"):
        store.set_values(pid, np.zeros(store[pid].shape))
    b = store["geo.coarse.l2.bias"].detach().numpy().copy()
    b[0] = 0.25
    store.set_values("geo.coarse.l2.bias", b)
    out = f.branch_eval(f.encode(torch.rand(7, 3, dtype=DTYPE), "coarse"), "coarse")
    assert torch.all(out.sdf == 0.25)


def test_branch_mismatch_rejected(field):
    enc = field.encode(torch.zeros(1, 3, dtype=DTYPE), "coarse")
    with pytest.raises(DimensionError):
        field.branch_eval(enc, "fine")


def test_fusion_is_sum_of_branches(field):
    rng = np.random.default_rng(2)
    randomize(field, rng)
    x = torch.as_tensor(rng.uniform(-1, 1, (50, 3)), dtype=DTYPE)
    c = field.branch_eval(field.encode(x, "coarse"), "coarse")
    f = field.branch_eval(field.encode(x, "fine"), "fine")
    field.mode = "autograd"
    try:
        sdf, feat = field.sdf_and_feature(x)
    finally:
        field.mode = "fused"
    assert torch.equal(sdf, c.sdf + f.sdf)
    assert torch.equal(feat, c.feature + f.feature)
    s2, f2 = field.sdf_and_feature(x)
    assert torch.allclose(s2, sdf, rtol=0, atol=1e-13)
    assert torch.allclose(f2, feat, rtol=0, atol=1e-13)


def test_fine_perturbation_leaves_coarse_unchanged(field):
    rng = np.random.default_rng(3)
    x = torch.as_tensor(rng.uniform(-1, 1, (20, 3)), dtype=DTYPE)
    before = field.branch_eval(field.encode(x, "coarse"), "coarse").sdf.clone()
    randomize(field, rng, scale=0.1)
    assert torch.equal(before, field.branch_eval(field.encode(x, "coarse"), "coarse").sdf)


def test_fine_branch_at_zero_reduces_to_coarse():
    rng = np.random.default_rng(4)
    s1, s2 = ParameterStore(), ParameterStore()
    full = GeometryField(s1, GRID, GeometryConfig(hidden_width=8), np.random.default_rng(5))
    coarse = GeometryField(s2, GRID, GeometryConfig(hidden_width=8, use_fine=False), np.random.default_rng(5))
    s2.load_snapshot({k: v for k, v in s1.snapshot().items() if k in s2})
    full.fine_scale = 0.0
    x = torch.as_tensor(rng.uniform(-1, 1, (30, 3)), dtype=DTYPE)
    a, b = full.sample(x), coarse.sample(x)
    assert torch.equal(a.sdf, b.sdf)
    assert torch.equal(a.gradient, b.gradient)


def test_fused_gradient_matches_autograd(field):
    rng = np.random.default_rng(6)
    randomize(field, rng)
    field.fine_scale = 0.7
    x = torch.as_tensor(points_off_faces(GRID, rng, 64), dtype=DTYPE)
    fused = field.sample(x)
    ref = field.sample(x.clone().requires_grad_(True))
    field.fine_scale = 1.0
    assert torch.allclose(fused.sdf, ref.sdf.detach(), rtol=0, atol=1e-12)
    # torch's softplus turns exactly linear above beta*h = 20 while the pushforward uses
    # sigmoid(beta*h) there; each such unit contributes an error below e^-20 (~2e-9)
    assert torch.allclose(fused.gradient, ref.gradient.detach(), rtol=1e-8, atol=1e-8)


def test_fused_gradient_matches_finite_differences(field):
    rng = np.random.default_rng(7)
    randomize(field, rng)
    x = points_off_faces(GRID, rng, 3)
    g = Graph(lambda st, p: field.sdf_and_feature(p)[0].sum(), (3,))
    assert finite_difference_check(g, field.store, [x], step=1e-6, include_params=False) < 1e-4
    analytic = field.sample(torch.as_tensor(x, dtype=DTYPE)).gradient.detach().numpy()
    h = 1e-6
    fd = np.stack([(field.sdf_numpy(x + h * e) - field.sdf_numpy(x - h * e)) / (2 * h) for e in np.eye(3)], 1)
    np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-8)


def test_analytic_normals():
    n = normal(sphere_field(), torch.tensor([[0.5, 0.0, 0.0]], dtype=DTYPE))
    assert torch.allclose(n, torch.tensor([[1.0, 0, 0]], dtype=DTYPE))
    a = np.array([1.0, -2.0, 0.5])
    pts = torch.as_tensor(np.random.default_rng(0).normal(size=(10, 3)), dtype=DTYPE)
    n = normal(plane_field(a, 0.3), pts).numpy()
    np.testing.assert_allclose(n, np.broadcast_to(a / np.linalg.norm(a), (10, 3)), atol=1e-15)


def test_unit_normals(field):
    pts = np.random.default_rng(8).uniform(-1, 1, (200, 3))
    n = fused_sdf(field, pts).normal.detach().numpy()
    assert np.abs(np.linalg.norm(n, axis=1) - 1).max() < 1e-6


def test_eikonal_residual_oracles(field):
    pts = torch.as_tensor(np.random.default_rng(9).uniform(-1, 1, (100, 3)), dtype=DTYPE)
    assert eikonal_residual(sphere_field(), pts).abs().max() < 1e-20
    assert torch.allclose(eikonal_residual(sphere_field(scale=2.0), pts), torch.ones(100, dtype=DTYPE), atol=1e-12)
    g = field.sample(pts).gradient
    expect = (torch.sqrt((g * g).sum(-1)) - 1) ** 2
    assert torch.allclose(eikonal_residual(field, pts), expect, rtol=1e-14, atol=0)


def test_normal_invariant_to_positive_scaling():
    fn = lambda x: torch.sin(3 * x[..., 0]) + x[..., 1] ** 2 - 0.3 * x[..., 2]
    pts = torch.as_tensor(np.random.default_rng(10).uniform(-1, 1, (100, 3)), dtype=DTYPE)
    a = normal(AnalyticField(fn), pts)
    b = normal(AnalyticField(fn, scale=3.7), pts)
    assert (a - b).abs().max() < 1e-9
