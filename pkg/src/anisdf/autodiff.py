"""Reverse-mode differentiation on top of torch (float64), parameter storage and MLPs.

Every trainable scalar in the model lives in a :class:`ParameterStore` under a
stable string id.  Computations are plain python callables built from the
primitives below; :class:`Graph` bundles such a callable with its declared
input dimensions so it can be evaluated, differentiated and checked against
central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as tF

DTYPE = torch.float64
NORMALIZE_EPS = 1e-9


class MissingParameterError(KeyError):
    pass


class DimensionError(ValueError):
    pass


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    id: str
    values: torch.Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    def numpy(self) -> np.ndarray:
        return self.values.detach().numpy().copy()


class ParameterStore:
    """Map from id to trainable float64 tensor plus a monotone version counter."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}
        self.version = 0

    def add(self, pid: str, values) -> torch.Tensor:
        if pid in self._params:
            raise ValueError(f"duplicate parameter id {pid!r}")
        t = as_tensor(values).detach().clone().contiguous().requires_grad_(True)
        self._params[pid] = Parameter(pid, t)
        return t

    def __getitem__(self, pid: str) -> torch.Tensor:
        try:
            return self._params[pid].values
        except KeyError:
            raise MissingParameterError(pid) from None

    def __contains__(self, pid: str) -> bool:
        return pid in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def ids(self, prefix: str = "") -> list[str]:
        return [k for k in self._params if k.startswith(prefix)]

    def parameter(self, pid: str) -> Parameter:
        try:
            return self._params[pid]
        except KeyError:
            raise MissingParameterError(pid) from None

    def tensors(self, prefix: str = "") -> dict[str, torch.Tensor]:
        return {k: p.values for k, p in self._params.items() if k.startswith(prefix)}

    def num_scalars(self) -> int:
        return sum(p.values.numel() for p in self._params.values())

    def set_values(self, pid: str, values) -> None:
        p = self[pid]
        v = as_tensor(values).reshape(p.shape)
        with torch.no_grad():
            p.copy_(v)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.numpy() for k, p in self._params.items()}

    def load_snapshot(self, snap: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(snap) != set(self._params):
            missing = sorted(set(self._params) - set(snap))
            extra = sorted(set(snap) - set(self._params))
            raise MissingParameterError(f"snapshot mismatch: missing={missing[:5]} extra={extra[:5]}")
        for k, v in snap.items():
            if k in self._params:
                if tuple(np.shape(v)) != self._params[k].shape:
                    raise DimensionError(f"{k}: shape {np.shape(v)} != {self._params[k].shape}")
                self.set_values(k, v)

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(p.values).all()) for p in self._params.values())


# ---------------------------------------------------------------------------
# Primitives.  Thin wrappers so model code reads as a recorded op list; torch's
# tape does the recording.
# ---------------------------------------------------------------------------


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def matmul(a, b):
    return a @ b


def sigmoid(x):
    return torch.sigmoid(x)


def softplus(x, beta: float = 1.0):
    return tF.softplus(x, beta=beta)


def relu(x):
    return torch.relu(x)


def exp(x):
    return torch.exp(x)


def dot(a, b, dim: int = -1, keepdim: bool = False):
    return (a * b).sum(dim=dim, keepdim=keepdim)


def vsum(x, dim=None):
    return x.sum() if dim is None else x.sum(dim=dim)


def concat(xs: Sequence[torch.Tensor], dim: int = -1):
    return torch.cat(list(xs), dim=dim)


def maximum0(x):
    """max(x, 0) with subgradient 0 at the kink."""
    return torch.where(x > 0, x, torch.zeros_like(x))


def normalize(v: torch.Tensor) -> torch.Tensor:
    """Unit vector along the last axis; (0, 0, 1) with zero gradient when |v| < 1e-9."""
    sq = (v * v).sum(-1, keepdim=True)
    ok = sq > NORMALIZE_EPS**2
    safe = torch.where(ok, sq, torch.ones_like(sq))
    unit = v / torch.sqrt(safe)
    axis = torch.zeros_like(v)
    axis[..., -1] = 1.0
    return torch.where(ok, unit, axis)


ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "identity": lambda x: x,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softplus100": lambda x: softplus(x, beta=100.0),
    "exp": exp,
}


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """A differentiable computation ``fn(store, *inputs) -> tensor``.

    ``input_dims`` lists the trailing dimension of each input (None = unchecked).
    ``param_ids`` restricts which store entries are treated as variables; empty
    means every parameter in the store.
    """

    fn: Callable[..., torch.Tensor]
    input_dims: tuple[int | None, ...] = ()
    param_ids: tuple[str, ...] = ()
    name: str = "graph"

    def variables(self, store: ParameterStore) -> list[str]:
        ids = list(self.param_ids) if self.param_ids else store.ids()
        for pid in ids:
            if pid not in store:
                raise MissingParameterError(pid)
        return ids

    def _prepare(self, inputs: Sequence) -> list[torch.Tensor]:
        if len(self.input_dims) and len(inputs) != len(self.input_dims):
            raise DimensionError(f"{self.name}: expected {len(self.input_dims)} inputs, got {len(inputs)}")
        out = []
        for i, x in enumerate(inputs):
            t = as_tensor(x)
            if i < len(self.input_dims) and self.input_dims[i] is not None:
                if t.ndim == 0 or t.shape[-1] != self.input_dims[i]:
                    raise DimensionError(
                        f"{self.name}: input {i} has trailing dim {tuple(t.shape)}, expected {self.input_dims[i]}"
                    )
            out.append(t)
        return out


def evaluate(graph: Graph, store: ParameterStore, inputs: Sequence) -> np.ndarray:
    """Forward evaluation without recording gradients."""
    graph.variables(store)
    xs = graph._prepare(inputs)
    with torch.no_grad():
        y = graph.fn(store, *xs)
    return y.detach().numpy().copy()


@dataclass
class Gradients:
    output: float
    params: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: list[np.ndarray] = field(default_factory=list)


def gradient(
    graph: Graph,
    store: ParameterStore,
    inputs: Sequence,
    select: Callable[[torch.Tensor], torch.Tensor] | int | None = None,
) -> Gradients:
    """Partials of a scalar output w.r.t. every graph parameter and every input.

    ``select`` picks the scalar: None means the output must already be scalar,
    an int indexes the flattened output, a callable maps output -> scalar.
    Parameters the output does not depend on get exact zeros.
    """
    ids = graph.variables(store)
    xs = [x.detach().clone().requires_grad_(True) for x in graph._prepare(inputs)]
    y = graph.fn(store, *xs)
    if select is None:
        s = y
    elif isinstance(select, int):
        s = y.reshape(-1)[select]
    else:
        s = select(y)
    if s.numel() != 1:
        raise DimensionError(f"{graph.name}: selected output has {s.numel()} elements, expected a scalar")
    s = s.reshape(())
    wrt = [store[k] for k in ids] + xs
    grads = torch.autograd.grad(s, wrt, allow_unused=True)
    out = Gradients(output=float(s.detach()))
    for k, g in zip(ids, grads[: len(ids)]):
        out.params[k] = np.zeros(store[k].shape) if g is None else g.detach().numpy().copy()
    for x, g in zip(xs, grads[len(ids):]):
        out.inputs.append(np.zeros(tuple(x.shape)) if g is None else g.detach().numpy().copy())
    return out


def _scalar(graph: Graph, store: ParameterStore, xs: list[torch.Tensor], select) -> float:
    with torch.no_grad():
        y = graph.fn(store, *xs)
    if select is None:
        return float(y.reshape(()))
    if isinstance(select, int):
        return float(y.reshape(-1)[select])
    return float(select(y).reshape(()))


def finite_difference_check(
    graph: Graph,
    store: ParameterStore,
    inputs: Sequence,
    step: float = 1e-4,
    select=None,
    max_coords: int | None = None,
    seed: int = 0,
    include_inputs: bool = True,
    include_params: bool = True,
    zero_coords: int = 16,
    order: int = 2,
    min_partial: float = 0.0,
) -> float:
    """Max over coordinates of |analytic - central| / max(1e-8, |central|).

    ``order=4`` uses the Richardson combination (4 D(h) - D(2h)) / 3, which
    removes the h^2 truncation term for strongly curved graphs.
    With ``max_coords`` set, large parameter tensors are subsampled: coordinates
    with |analytic| >= ``min_partial`` are drawn (up to the cap) plus a few zero
    ones; small tensors are always checked in full.  Coordinates where both the
    analytic and numeric partial fall below ``min_partial`` are not scored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    ids = graph.variables(store)
    grads = gradient(graph, store, inputs, select)
    xs = graph._prepare(inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0

    def check(tensor: torch.Tensor, analytic: np.ndarray) -> float:
        flat_a = analytic.reshape(-1)
        coords = np.arange(flat_a.size)
        if max_coords is not None and flat_a.size > max_coords:
            nz = np.flatnonzero(np.abs(flat_a) >= max(min_partial, np.finfo(float).tiny))
            if nz.size > max_coords:
                nz = rng.choice(nz, max_coords, replace=False)
            zeros = rng.choice(flat_a.size, min(zero_coords, flat_a.size), replace=False)
            coords = np.unique(np.concatenate([nz, zeros]))
        err = 0.0
        flat = tensor.data.view(-1)
        def central(c, orig, h):
            flat[c] = orig + h
            fp = _scalar(graph, store, xs, select)
            flat[c] = orig - h
            fm = _scalar(graph, store, xs, select)
            flat[c] = orig
            return (fp - fm) / (2.0 * h)

        for c in coords:
            orig = flat[c].item()
            num = central(c, orig, step)
            if order == 4:
                num = (4.0 * num - central(c, orig, 2.0 * step)) / 3.0
            if max(abs(flat_a[c]), abs(num)) < min_partial:
                continue  # both below the resolvable floor
            err = max(err, abs(flat_a[c] - num) / max(1e-8, abs(num)))
        return err

    if include_params:
        for k in ids:
            worst = max(worst, check(store[k], grads.params[k]))
    if include_inputs:
        for x, g in zip(xs, grads.inputs):
            worst = max(worst, check(x, g))
    return worst


# ---------------------------------------------------------------------------
# MLPs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_layers: int
    hidden_width: int
    output_dim: int
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if self.hidden_layers < 1 or min(self.input_dim, self.hidden_width, self.output_dim) < 1:
            raise ValueError(f"invalid MLP shape {self}")
        for a in (self.activation, self.output_activation):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


def mlp_param_ids(prefix: str, spec: MLPSpec) -> list[str]:
    ids = []
    for i in range(len(spec.layer_dims())):
        ids += [f"{prefix}.l{i}.weight", f"{prefix}.l{i}.bias"]
    return ids


def mlp_init(store: ParameterStore, prefix: str, spec: MLPSpec, rng: np.random.Generator, scheme: str = "kaiming") -> None:
    """Register weights as ``{prefix}.l{i}.weight`` (out, in) and ``.bias``.

    ``scheme``: "kaiming" (uniform, fan-in), or "zero".
    """
    for i, (din, dout) in enumerate(spec.layer_dims()):
        if scheme == "zero":
            w = np.zeros((dout, din))
        else:
            bound = math.sqrt(6.0 / din) if spec.activation == "relu" else math.sqrt(3.0 / din)
            w = rng.uniform(-bound, bound, size=(dout, din))
        store.add(f"{prefix}.l{i}.weight", w)
        store.add(f"{prefix}.l{i}.bias", np.zeros(dout))


def mlp_forward(spec: MLPSpec, store: ParameterStore, x: torch.Tensor, prefix: str) -> torch.Tensor:
    x = as_tensor(x)
    if x.shape[-1] != spec.input_dim:
        raise DimensionError(f"{prefix}: input dim {x.shape[-1]} != {spec.input_dim}")
    act = ACTIVATIONS[spec.activation]
    n = len(spec.layer_dims())
    h = x
    for i in range(n):
        h = tF.linear(h, store[f"{prefix}.l{i}.weight"], store[f"{prefix}.l{i}.bias"])
        h = act(h) if i < n - 1 else ACTIVATIONS[spec.output_activation](h)
    return h


def mlp_graph(spec: MLPSpec, prefix: str) -> Graph:
    return Graph(
        fn=lambda store, x: mlp_forward(spec, store, x, prefix),
        input_dims=(spec.input_dim,),
        param_ids=tuple(mlp_param_ids(prefix, spec)),
        name=prefix,
    )


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive moment estimation over a ParameterStore (single writer)."""

    def __init__(self, store: ParameterStore, betas=(0.9, 0.99), eps: float = 1e-15):
        self.store = store
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, torch.Tensor] = {k: torch.zeros_like(v) for k, v in store.tensors().items()}
        self.v: dict[str, torch.Tensor] = {k: torch.zeros_like(v) for k, v in store.tensors().items()}

    @torch.no_grad()
    def step(self, grads: Mapping[str, torch.Tensor | None], lr: float | Mapping[str, float]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.store.tensors().items():
            g = grads.get(k)
            if g is None:
                g = torch.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            rate = lr[k] if isinstance(lr, Mapping) else lr
            if rate == 0.0:
                continue
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(self.eps), value=-rate)
        self.store.version += 1

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam.m/{k}"] = self.m[k].numpy().copy()
            out[f"adam.v/{k}"] = self.v[k].numpy().copy()
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.m:
            self.m[k].copy_(torch.as_tensor(arrays[f"adam.m/{k}"]))
            self.v[k].copy_(torch.as_tensor(arrays[f"adam.v/{k}"]))


def iter_chunks(n: int, size: int) -> Iterable[slice]:
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))
