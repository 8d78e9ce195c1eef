"""Differentiable dual marching cubes over a FlexiField.

Topology (which edges cross, which cubes are active, how faces connect) is
decided once from the raw numbers and frozen; positions stay on the autodiff
graph: crossing points are linear interpolations along deformed grid edges,
and each active cube's dual vertex is the weight-normalized average of its
crossing points, with per-edge weights being the product of the two endpoint
weights.  One quad is emitted around every interior crossing edge and split
into two triangles along its shorter diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import FlexiField, grid_vertices
from .errors import ShapeError
from .tensor import core, ops
from .tensor.core import Tensor, astensor

SDF_ZERO_NUDGE = 1e-8
DEGENERATE_AREA = 1e-12


@dataclass
class SurfaceMesh:
    vertices: Tensor  # [M,3], autodiff-connected to the field
    faces: np.ndarray  # [F,3] int64, counterclockwise from outside
    vertex_colors: Tensor | None = None  # [M,3] in (0,1)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.num_faces == 0

    def with_colors(self, colors) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices, self.faces, astensor(colors))


def _empty_mesh() -> SurfaceMesh:
    return SurfaceMesh(Tensor(np.zeros((0, 3))), np.zeros((0, 3), np.int64))


def _grid_edges(n: int):
    """Edge endpoint ids, axis labels, and base node coords for an n^3 lattice.

    Axis-a edges run from node (i,j,k) to its +a neighbor; they are numbered
    axis-major (all x edges, then y, then z), x-major within an axis.
    """
    ids = np.arange(n**3).reshape(n, n, n)
    v0 = np.concatenate([
        ids[:-1].reshape(-1), ids[:, :-1].reshape(-1), ids[:, :, :-1].reshape(-1)
    ])
    v1 = np.concatenate([
        ids[1:].reshape(-1), ids[:, 1:].reshape(-1), ids[:, :, 1:].reshape(-1)
    ])
    g = n - 1
    coords = []
    for a in range(3):
        shape = [n, n, n]
        shape[a] = g
        grids = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
        coords.append(np.stack([c.reshape(-1) for c in grids], axis=1))
    axis = np.repeat(np.arange(3), [g * n * n] * 3)
    return v0, v1, axis, np.concatenate(coords, axis=0)


def _cube_edge_table(g: int, n: int) -> np.ndarray:
    """[g^3, 12] global edge ids per cube (4 per axis)."""
    per_axis = g * n * n
    ci, cj, ck = np.meshgrid(*[np.arange(g)] * 3, indexing="ij")
    ci, cj, ck = ci.reshape(-1), cj.reshape(-1), ck.reshape(-1)
    cols = []
    for dj in (0, 1):
        for dk in (0, 1):
            cols.append((ci * n + (cj + dj)) * n + (ck + dk))
    for di in (0, 1):
        for dk in (0, 1):
            cols.append(per_axis + ((ci + di) * g + cj) * n + (ck + dk))
    for di in (0, 1):
        for dj in (0, 1):
            cols.append(2 * per_axis + ((ci + di) * n + (cj + dj)) * g + ck)
    return np.stack(cols, axis=1)


# ring of the four cubes around an edge, CCW when viewed from the +axis side
_RING = ((-1, -1), (0, -1), (0, 0), (-1, 0))


def extract_mesh(field: FlexiField) -> SurfaceMesh:
    g = field.grid_size
    n = g + 1
    sdf_data = field.sdf.data.copy()
    sdf_data[sdf_data == 0.0] = SDF_ZERO_NUDGE  # deterministic sign for exact zeros
    negative = sdf_data < 0.0

    v0, v1, e_axis, e_coord = _grid_edges(n)
    crossing = negative[v0] != negative[v1]
    ce = np.nonzero(crossing)[0]
    if ce.size == 0:
        return _empty_mesh()
    cross_local = np.full(v0.shape[0], -1, np.int64)
    cross_local[ce] = np.arange(ce.size)

    # crossing points on deformed edges (autodiff)
    cv0, cv1 = v0[ce], v1[ce]
    deformed = Tensor(grid_vertices(g)) + field.deform
    s0, s1 = field.sdf[cv0], field.sdf[cv1]
    t = (s0 / (s0 - s1)).reshape(-1, 1)
    p0, p1 = deformed[cv0], deformed[cv1]
    cross_pts = p0 + t * (p1 - p0)
    edge_w = (field.weight[cv0] * field.weight[cv1]).reshape(-1, 1)

    # dual vertex per cube touching >=1 crossing edge
    cube_edges = _cube_edge_table(g, n)
    cube_cross = crossing[cube_edges]
    active = np.nonzero(cube_cross.any(axis=1))[0]
    cube_local = np.full(g**3, -1, np.int64)
    cube_local[active] = np.arange(active.size)
    pair_cube, slot = np.nonzero(cube_cross[active])
    pair_ce = cross_local[cube_edges[active][pair_cube, slot]]

    w_pair = edge_w[pair_ce]
    p_pair = cross_pts[pair_ce]
    numer = ops.scatter_add((active.size, 3), pair_cube, w_pair * p_pair)
    denom = ops.scatter_add((active.size, 1), pair_cube, w_pair)
    dual = numer / denom

    # one face per crossing edge, connecting the ring of adjacent cubes
    base = e_coord[ce]
    axis = e_axis[ce]
    ring_cubes = np.empty((ce.size, 4), np.int64)
    ring_valid = np.empty((ce.size, 4), bool)
    for slot_i, (db, dc) in enumerate(_RING):
        cc = base.copy()
        b = (axis + 1) % 3
        c = (axis + 2) % 3
        cc[np.arange(ce.size), b] += db
        cc[np.arange(ce.size), c] += dc
        inside = ((cc >= 0) & (cc < g)).all(axis=1)
        flat = (cc[:, 0] * g + cc[:, 1]) * g + cc[:, 2]
        ring_cubes[:, slot_i] = np.where(inside, cube_local[np.clip(flat, 0, g**3 - 1)], -1)
        ring_valid[:, slot_i] = inside

    flip = ~negative[cv0]  # positive at the low end: outside faces -axis
    ring = np.where(flip[:, None], ring_cubes[:, ::-1], ring_cubes)
    valid = np.where(flip[:, None], ring_valid[:, ::-1], ring_valid)

    dual_pos = dual.data
    faces = []

    full = valid.all(axis=1)
    if full.any():
        q = ring[full]  # [Eq,4]
        d02 = ((dual_pos[q[:, 0]] - dual_pos[q[:, 2]]) ** 2).sum(axis=1)
        d13 = ((dual_pos[q[:, 1]] - dual_pos[q[:, 3]]) ** 2).sum(axis=1)
        first_diag = d02 <= d13  # tie -> diagonal through the first vertex
        tri = np.empty((q.shape[0], 2, 3), np.int64)
        tri[first_diag, 0] = q[first_diag][:, (0, 1, 2)]
        tri[first_diag, 1] = q[first_diag][:, (0, 2, 3)]
        tri[~first_diag, 0] = q[~first_diag][:, (1, 2, 3)]
        tri[~first_diag, 1] = q[~first_diag][:, (1, 3, 0)]
        faces.append(tri.reshape(-1, 3))

    three = valid.sum(axis=1) == 3
    if three.any():
        rows = np.nonzero(three)[0]
        tri3 = np.empty((rows.size, 3), np.int64)
        for out_i, e in enumerate(rows):
            tri3[out_i] = ring[e][valid[e]]
        faces.append(tri3)

    if not faces:
        return SurfaceMesh(dual, np.zeros((0, 3), np.int64))
    faces = np.concatenate(faces, axis=0)

    # drop degenerate triangles (repeated dual vertex or ~zero area)
    distinct = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    a = dual_pos[faces[:, 1]] - dual_pos[faces[:, 0]]
    b2 = dual_pos[faces[:, 2]] - dual_pos[faces[:, 0]]
    area2 = np.linalg.norm(np.cross(a, b2), axis=1)
    faces = faces[distinct & (area2 > 2 * DEGENERATE_AREA)]
    return SurfaceMesh(dual, np.ascontiguousarray(faces))


# ---------------------------------------------------------------------------
# Surface sampling and mesh diagnostics


@dataclass
class SurfaceSamples:
    points: Tensor  # [k,3], autodiff-connected to mesh vertices
    face_ids: np.ndarray  # [k]
    barycentrics: np.ndarray  # [k,3], rows sum to 1


def surface_samples(mesh: SurfaceMesh, k: int, rng: np.random.Generator) -> SurfaceSamples:
    """Area-weighted uniform surface points with provenance for recoloring."""
    if mesh.is_empty:
        raise ShapeError("cannot sample the surface of an empty mesh")
    pos = mesh.vertices.data
    a = pos[mesh.faces[:, 1]] - pos[mesh.faces[:, 0]]
    b = pos[mesh.faces[:, 2]] - pos[mesh.faces[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ShapeError("mesh has zero total area")
    fid = rng.choice(mesh.faces.shape[0], size=k, p=areas / total)
    u = rng.random(k)
    v = rng.random(k)
    over = u + v > 1.0
    u[over], v[over] = 1.0 - u[over], 1.0 - v[over]
    bary = np.stack([1.0 - u - v, u, v], axis=1)
    tri = mesh.faces[fid]
    pts = (
        mesh.vertices[tri[:, 0]] * bary[:, 0:1]
        + mesh.vertices[tri[:, 1]] * bary[:, 1:2]
        + mesh.vertices[tri[:, 2]] * bary[:, 2:3]
    )
    return SurfaceSamples(points=pts, face_ids=fid, barycentrics=bary)


def undirected_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges [E,2] of a triangle list."""
    e = np.concatenate([faces[:, (0, 1)], faces[:, (1, 2)], faces[:, (2, 0)]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def edge_face_counts(faces: np.ndarray):
    """(unique undirected edges, number of faces on each)."""
    e = np.concatenate([faces[:, (0, 1)], faces[:, (1, 2)], faces[:, (2, 0)]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


def is_watertight(mesh: SurfaceMesh) -> bool:
    """True when every edge borders exactly two faces."""
    if mesh.is_empty:
        return False
    _, counts = edge_face_counts(mesh.faces)
    return bool((counts == 2).all())


def euler_characteristic(mesh: SurfaceMesh) -> int:
    """V - E + F over the vertices actually referenced by faces."""
    if mesh.is_empty:
        return 0
    used = np.unique(mesh.faces)
    e = undirected_edges(mesh.faces)
    return int(used.size - e.shape[0] + mesh.faces.shape[0])
