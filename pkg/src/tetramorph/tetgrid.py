"""Tetrahedral lattice in the canonical cube and differentiable surface
extraction.

Each cube of a regular grid over [-1, 1]^3 is split into the six
tetrahedra that share the cube's main diagonal; that decomposition is
conforming across cube boundaries, so level-set surfaces come out
watertight. Every tet is stored with positive orientation, which lets one
fixed sign-case table produce consistently outward triangles (normals
toward the positive side of the field).

A field value of exactly zero at a grid node counts as positive
(outside); a crossing therefore needs one strictly negative endpoint, and
the interpolation weight t = s_a / (s_a - s_b) always lies in (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Var

# local edges of a tet, indexing its 4 vertices
TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])

# triangles (as local-edge triples) per sign case; bit i set <=> vertex i
# negative; orientation points toward the positive side for positively
# oriented tets
TRI_TABLE = (
    (),
    ((0, 1, 2),),
    ((0, 4, 3),),
    ((1, 2, 4), (1, 4, 3)),
    ((1, 3, 5),),
    ((0, 5, 2), (0, 3, 5)),
    ((0, 5, 1), (0, 4, 5)),
    ((2, 4, 5),),
    ((2, 5, 4),),
    ((0, 1, 5), (0, 5, 4)),
    ((0, 2, 5), (0, 5, 3)),
    ((1, 5, 3),),
    ((1, 4, 2), (1, 3, 4)),
    ((0, 3, 4),),
    ((0, 2, 1),),
    (),
)

# the six path tetrahedra of a unit cube, as corner bitmasks (x|y<<1|z<<2)
_CUBE_TETS = (
    (0b000, 0b001, 0b011, 0b111),
    (0b000, 0b001, 0b101, 0b111),
    (0b000, 0b010, 0b011, 0b111),
    (0b000, 0b010, 0b110, 0b111),
    (0b000, 0b100, 0b101, 0b111),
    (0b000, 0b100, 0b110, 0b111),
)


@dataclass
class TetGrid:
    """Regular tetrahedral lattice over the canonical cube."""

    resolution: int
    nodes: np.ndarray  # (n_nodes, 3) positions in [-1, 1]^3
    tets: np.ndarray   # (n_tets, 4) node ids, positively oriented

    @property
    def cell_size(self):
        return 2.0 / self.resolution

    @property
    def node_count(self):
        return self.nodes.shape[0]


def build_grid(resolution=16, dtype=np.float64):
    """Build the lattice; six positively-oriented tets per cube."""
    if resolution < 1:
        raise ContractError("grid resolution must be >= 1")
    n = resolution + 1
    axis = np.linspace(-1.0, 1.0, n, dtype=dtype)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    nodes = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def node_id(i, j, k):
        return (i * n + j) * n + k

    ci, cj, ck = np.meshgrid(np.arange(resolution), np.arange(resolution),
                             np.arange(resolution), indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    tets = np.empty((6 * ci.size, 4), dtype=np.int64)
    for t, corners in enumerate(_CUBE_TETS):
        ids = []
        for c in corners:
            ids.append(node_id(ci + (c & 1), cj + ((c >> 1) & 1), ck + ((c >> 2) & 1)))
        tets[t::6] = np.stack(ids, axis=1)

    # enforce positive orientation tet by tet
    p = nodes[tets]
    det = np.linalg.det(p[:, 1:] - p[:, :1])
    flip = det < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return TetGrid(resolution, nodes, tets)


@dataclass
class Mesh:
    """Extracted triangle surface.

    ``vertices`` is a tape Var so losses differentiate through the
    zero-crossing positions; ``vertex_nodes``/``vertex_t`` record each
    vertex's grid edge and interpolation weight (provenance). ``features``
    is filled later by the feature field.
    """

    vertices: Var
    faces: np.ndarray            # (F, 3) vertex ids, outward orientation
    vertex_nodes: np.ndarray     # (N, 2) grid node ids per vertex
    vertex_t: np.ndarray         # (N,) interpolation weights, detached
    features: object = None      # optional (N, D) Var

    @property
    def positions(self):
        return self.vertices.v

    @property
    def vertex_count(self):
        return self.vertices.v.shape[0]

    @property
    def face_count(self):
        return self.faces.shape[0]

    def edges(self):
        return edge_list(self.faces)


def marching_tets(grid: TetGrid, node_values: Var) -> Mesh:
    """Extract the zero level set; differentiable in ``node_values``.

    Each sign-crossing tet edge contributes one shared vertex at the linear
    zero crossing; mixed-sign tets emit one or two triangles from the case
    table. All-positive or all-negative fields yield an empty mesh.
    """
    s = node_values.v
    if s.shape != (grid.node_count,):
        raise ContractError(
            f"need one value per grid node, got {s.shape} for {grid.node_count} nodes")
    neg = s < 0  # zero counts as positive
    tneg = neg[grid.tets]
    case = (tneg[:, 0].astype(np.int64) + 2 * tneg[:, 1]
            + 4 * tneg[:, 2] + 8 * tneg[:, 3])

    tri_edge_local = []   # (n_faces, 3) local edge ids
    tri_tets = []         # tet id per face
    for c in range(1, 15):
        tris = TRI_TABLE[c]
        if not tris:
            continue
        sel = np.nonzero(case == c)[0]
        if sel.size == 0:
            continue
        for tri in tris:
            tri_edge_local.append(np.broadcast_to(np.array(tri), (sel.size, 3)))
            tri_tets.append(sel)
    tape = node_values.tape
    if not tri_edge_local:
        empty = tape.leaf(np.zeros((0, 3)))
        return Mesh(empty, np.zeros((0, 3), np.int64),
                    np.zeros((0, 2), np.int64), np.zeros(0))

    tri_edge_local = np.concatenate(tri_edge_local)
    tri_tets = np.concatenate(tri_tets)
    # deterministic face order: by tet id, then by local edge triple
    order = np.lexsort((tri_edge_local[:, 2], tri_edge_local[:, 1],
                        tri_edge_local[:, 0], tri_tets))
    tri_edge_local = tri_edge_local[order]
    tri_tets = tri_tets[order]

    corner_a = grid.tets[tri_tets[:, None], TET_EDGES[tri_edge_local, 0]]
    corner_b = grid.tets[tri_tets[:, None], TET_EDGES[tri_edge_local, 1]]
    keys = np.stack([np.minimum(corner_a, corner_b),
                     np.maximum(corner_a, corner_b)], axis=-1)  # (F, 3, 2)
    flat = keys.reshape(-1, 2)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    faces = inv.reshape(-1, 3).astype(np.int64)

    sa = node_values.take(uniq[:, 0])
    sb = node_values.take(uniq[:, 1])
    t = sa / (sa - sb)
    pa = grid.nodes[uniq[:, 0]].astype(tape.dtype)
    pb = grid.nodes[uniq[:, 1]].astype(tape.dtype)
    verts = t.reshape(-1, 1) * (pb - pa) + pa

    return Mesh(verts, faces, uniq.astype(np.int64), t.v.copy())


def edge_list(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a triangle list, sorted."""
    if faces.size == 0:
        return np.zeros((0, 2), np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.stack([e.min(axis=1), e.max(axis=1)], axis=1)
    return np.unique(e, axis=0)


def boundary_edge_counts(faces: np.ndarray):
    """Occurrences of each undirected edge across faces (2 == watertight)."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.stack([e.min(axis=1), e.max(axis=1)], axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def is_watertight(faces: np.ndarray) -> bool:
    if faces.size == 0:
        return True
    return bool(np.all(boundary_edge_counts(faces) == 2))


def euler_characteristic(mesh: Mesh) -> int:
    return mesh.vertex_count - edge_list(mesh.faces).shape[0] + mesh.face_count


def export_obj(path, vertices, faces):
    """Wavefront OBJ with v/f records, faces 1-indexed."""
    vertices = np.asarray(vertices)
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for f in np.asarray(faces):
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
