"""Zero-level-set extraction by marching cubes, plus OBJ / PLY export.

The 256-case triangle table is generated at import time by walking the sign
changes around each cube face.  Faces with four crossings always cut off the
inside corners separately, a rule that depends only on the face's own corner
signs, so neighbouring cubes agree and closed level sets give watertight meshes.
Vertex positions are interpolated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

SNAP_TOL = 1e-9
DEGENERATE_AREA = 1e-12

# corner c = dx + 2 dy + 4 dz
_CORNER_XYZ = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)
# edges as (corner a, corner b) with b = a + 2^axis
_EDGES = [(a, a | (1 << ax)) for ax in range(3) for a in range(8) if not a & (1 << ax)]
_EDGE_AXIS = np.array([int(np.log2(b - a)) for a, b in _EDGES])
_EDGE_BASE = np.array([_CORNER_XYZ[a] for a, _ in _EDGES])
_EDGE_ID = {frozenset(e): i for i, e in enumerate(_EDGES)}


def _face_cycles() -> list[list[int]]:
    """Corner cycles of the 6 faces, counter-clockwise seen from outside the cube."""
    faces = []
    for ax in range(3):
        for side in (0, 1):
            cs = [c for c in range(8) if _CORNER_XYZ[c, ax] == side]
            p = _CORNER_XYZ[cs].astype(float)
            centre = p.mean(0)
            u, v = [a for a in range(3) if a != ax]
            ang = np.arctan2(p[:, v] - centre[v], p[:, u] - centre[u])
            cyc = [cs[i] for i in np.argsort(ang)]
            q = _CORNER_XYZ[cyc].astype(float)
            nrm = np.cross(q[1] - q[0], q[2] - q[1])
            outward = np.zeros(3)
            outward[ax] = 1.0 if side else -1.0
            if nrm @ outward < 0:
                cyc = cyc[::-1]
            faces.append(cyc)
    return faces


def _build_table() -> np.ndarray:
    faces = _face_cycles()
    tables = []
    for case in range(256):
        inside = [(case >> c) & 1 == 1 for c in range(8)]
        nxt: dict[int, int] = {}
        for cyc in faces:
            crossings = []  # (edge, kind) in ccw order; kind 1: out->in, 0: in->out
            for i in range(4):
                a, b = cyc[i], cyc[(i + 1) % 4]
                if inside[a] != inside[b]:
                    crossings.append((_EDGE_ID[frozenset((a, b))], int(inside[b])))
            if not crossings:
                continue
            # rotate so the list starts with an entering crossing; pair enter with the next exit
            k = next(i for i, (_, kind) in enumerate(crossings) if kind == 1)
            crossings = crossings[k:] + crossings[:k]
            for j in range(0, len(crossings), 2):
                enter, exit_ = crossings[j][0], crossings[j + 1][0]
                nxt[exit_] = enter
        tris = []
        seen = set()
        for start in nxt:
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            e = nxt[start]
            while e != start:
                loop.append(e)
                seen.add(e)
                e = nxt[e]
            # fan from the smallest edge id so the triangles depend only on the loop,
            # not its direction: a sign flip then yields the same triangles reversed
            k = loop.index(min(loop))
            loop = loop[k:] + loop[:k]
            # loops run clockwise seen from outside the inside region; emit them reversed
            for i in range(1, len(loop) - 1):
                tris.append((loop[0], loop[i + 1], loop[i]))
        tables.append(tris)
    width = max(len(t) for t in tables)
    out = -np.ones((256, width, 3), dtype=np.int64)
    for c, tris in enumerate(tables):
        if tris:
            out[c, : len(tris)] = tris
    return out


_TRI_TABLE = _build_table()


@dataclass
class ScalarGrid:
    values: np.ndarray  # (R, R, R), index order x, y, z
    origin: np.ndarray
    spacing: np.ndarray

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def points(self) -> np.ndarray:
        r = self.values.shape
        axes = [self.origin[a] + self.spacing[a] * np.arange(r[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    normals: np.ndarray | None = None  # (V, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.faces)


def _sdf_fn(field) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(field, "sdf_numpy"):
        return field.sdf_numpy
    return lambda p: np.asarray(field(p), dtype=np.float64)


def sample_grid(field, resolution: int, aabb=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), slab: int = 1 << 18) -> ScalarGrid:
    """Evaluate the field on a resolution^3 lattice spanning the closed AABB."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    lo = np.asarray(aabb[0], dtype=np.float64)
    hi = np.asarray(aabb[1], dtype=np.float64)
    spacing = (hi - lo) / (resolution - 1)
    grid = ScalarGrid(np.empty((resolution,) * 3), lo, spacing)
    pts = grid.points()
    fn = _sdf_fn(field)
    flat = np.empty(len(pts))
    for s in range(0, len(pts), slab):
        flat[s : s + slab] = fn(pts[s : s + slab])
    grid.values = flat.reshape((resolution,) * 3)
    if not np.all(np.isfinite(grid.values)):
        raise ValueError("field produced non-finite samples")
    return grid


def marching_cubes(grid: ScalarGrid, iso: float = 0.0, field=None) -> TriangleMesh:
    """Triangulate {f = iso}; corners with f <= iso count as inside.

    Normals come from ``field.gradient_numpy`` when a field is given, else from
    central differences of the grid.
    """
    f = np.asarray(grid.values, dtype=np.float64)
    inside = f <= iso
    nx, ny, nz = f.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(_CORNER_XYZ):
        case |= inside[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz].astype(np.int64) << c
    active = np.nonzero((case != 0) & (case != 255))
    if len(active[0]) == 0:
        return TriangleMesh.empty()
    cube = np.stack(active, 1)  # (A, 3)
    tri = _TRI_TABLE[case[active]]  # (A, W, 3) local edge ids
    valid = tri[..., 0] >= 0
    cube_of = np.broadcast_to(np.arange(len(cube))[:, None], valid.shape)[valid]
    local = tri[valid]  # (T, 3)
    # global edge key: (axis, base lattice point)
    base = cube[cube_of][:, None, :] + _EDGE_BASE[local]  # (T, 3, 3)
    axis = _EDGE_AXIS[local]
    key = ((axis * nx + base[..., 0]) * ny + base[..., 1]) * nz + base[..., 2]
    uniq, inv = np.unique(key.reshape(-1), return_inverse=True)
    faces = inv.reshape(-1, 3)
    ax = uniq // (nx * ny * nz)
    rem = uniq % (nx * ny * nz)
    i0, rem = np.divmod(rem, ny * nz)
    j0, k0 = np.divmod(rem, nz)
    p0 = np.stack([i0, j0, k0], 1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), ax] += 1
    f0 = f[p0[:, 0], p0[:, 1], p0[:, 2]]
    f1 = f[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (iso - f0) / (f1 - f0)
    t = np.where(np.isfinite(t), np.clip(t, 0.0, 1.0), 0.0)
    idx = p0 + t[:, None] * (p1 - p0)
    verts = grid.origin + idx * grid.spacing
    mesh = TriangleMesh(verts, faces)
    mesh = clean(mesh)
    if field is not None and hasattr(field, "gradient_numpy") and len(mesh.vertices):
        g = field.gradient_numpy(mesh.vertices)
    else:
        g = _grid_gradient(grid, mesh.vertices)
    n = np.linalg.norm(g, axis=1, keepdims=True)
    mesh.normals = np.where(n > 1e-12, g / np.maximum(n, 1e-300), 0.0)
    return mesh


def _grid_gradient(grid: ScalarGrid, pts: np.ndarray) -> np.ndarray:
    if len(pts) == 0:
        return np.zeros((0, 3))
    g = np.stack(np.gradient(grid.values, *grid.spacing), -1)
    idx = np.rint((pts - grid.origin) / grid.spacing).astype(np.int64)
    idx = np.clip(idx, 0, np.array(grid.values.shape) - 1)
    return g[idx[:, 0], idx[:, 1], idx[:, 2]]


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    t = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)


def clean(mesh: TriangleMesh, snap: float = SNAP_TOL, min_area: float = DEGENERATE_AREA) -> TriangleMesh:
    """Weld vertices closer than ``snap``, collapse the shortest edge of slivers, drop collapsed faces."""
    v, f = mesh.vertices, mesh.faces
    if len(f) == 0:
        return TriangleMesh.empty()
    keyed = np.round(v / snap).astype(np.int64)
    _, first, inv = np.unique(keyed, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    v = v[first]
    f = inv[f]
    for _ in range(8):
        f = f[(f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])]
        thin = np.nonzero(triangle_areas(v, f) < min_area)[0]
        if len(thin) == 0:
            break
        parent = np.arange(len(v))
        for ti in thin:
            a, b, c = (int(parent[x]) for x in f[ti])
            pairs = [(a, b), (b, c), (c, a)]
            lens = [np.linalg.norm(v[p] - v[q]) for p, q in pairs]
            p, q = pairs[int(np.argmin(lens))]
            if p != q:
                parent[parent == max(p, q)] = min(p, q)
        f = parent[f]
    used = np.unique(f)
    remap = -np.ones(len(v), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(v[used], remap[f])


def extract_mesh(field, resolution: int = 256, aabb=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), iso: float = 0.0) -> TriangleMesh:
    grid = sample_grid(field, resolution, aabb)
    return marching_cubes(grid, iso, field if hasattr(field, "gradient_numpy") else None)


# ---------------------------------------------------------------------------
# topology helpers
# ---------------------------------------------------------------------------


def edge_counts(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


def boundary_edges(mesh: TriangleMesh) -> int:
    if len(mesh.faces) == 0:
        return 0
    _, counts = edge_counts(mesh.faces)
    return int((counts == 1).sum())


def components(mesh: TriangleMesh) -> np.ndarray:
    """Connected-component label per vertex (shared-edge connectivity)."""
    n = len(mesh.vertices)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def signed_volume(mesh: TriangleMesh) -> float:
    t = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def export_mesh(mesh: TriangleMesh, path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "obj":
            lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
            lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
            path.write_text("\n".join(lines) + ("\n" if lines else ""))
        elif fmt == "ply":
            path.write_bytes(_ply_bytes(mesh))
        else:
            raise ValueError(f"unknown mesh format {fmt!r} (obj or ply)")
    except OSError as e:
        raise OSError(f"cannot write mesh {path}: {e}") from e


def _ply_bytes(mesh: TriangleMesh) -> bytes:
    has_n = mesh.normals is not None and len(mesh.normals) == len(mesh.vertices)
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}"]
    head += [f"property double {c}" for c in "xyz"]
    if has_n:
        head += [f"property double {c}" for c in ("nx", "ny", "nz")]
    head += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    out = ("\n".join(head) + "\n").encode("ascii")
    vcols = np.hstack([mesh.vertices, mesh.normals]) if has_n else mesh.vertices
    out += np.ascontiguousarray(vcols, dtype="<f8").tobytes()
    if len(mesh.faces):
        rec = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
        rec["n"] = 3
        rec["i"] = mesh.faces
        out += rec.tobytes()
    return out


def read_obj(path: str | Path) -> TriangleMesh:
    vs, fs = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vs.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            fs.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(vs, dtype=np.float64).reshape(-1, 3), np.array(fs, dtype=np.int64).reshape(-1, 3))


def read_ply(path: str | Path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[1] != "format binary_little_endian 1.0":
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    nv = nf = 0
    props = []
    for line in header:
        p = line.split()
        if p[:2] == ["element", "vertex"]:
            nv = int(p[2])
        elif p[:2] == ["element", "face"]:
            nf = int(p[2])
        elif p[0] == "property" and p[1] == "double":
            props.append(p[2])
    k = len(props)
    vbytes = nv * k * 8
    vals = np.frombuffer(data[end : end + vbytes], dtype="<f8").reshape(nv, k)
    rec = np.frombuffer(data[end + vbytes : end + vbytes + nf * 13], dtype=[("n", "u1"), ("i", "<i4", (3,))])
    normals = vals[:, 3:6].copy() if k >= 6 else None
    return TriangleMesh(vals[:, :3].copy(), rec["i"].astype(np.int64).reshape(-1, 3), normals)


def read_mesh(path: str | Path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise ValueError(f"unknown mesh format {suffix!r}")
