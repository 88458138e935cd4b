"""Surface extraction on the tetrahedral lattice: case table, watertightness,
level-set accuracy, orientation, and differentiability."""

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from tetramorph.autodiff import Tape
from tetramorph import tetgrid
from tetramorph.tetgrid import (
    TetGrid, build_grid, edge_list, euler_characteristic, is_watertight,
    marching_tets,
)


def sphere_vals(grid, r=0.5):
    return np.linalg.norm(grid.nodes, axis=1) - r


def extract(grid, vals, dtype=np.float64):
    t = Tape(dtype=dtype)
    return marching_tets(grid, t.leaf(vals)), t


def test_grid_nodes_and_positive_volumes():
    g = build_grid(4)
    assert g.nodes.min() == -1.0 and g.nodes.max() == 1.0
    assert g.tets.shape == (6 * 4 ** 3, 4)
    p = g.nodes[g.tets]
    det = np.linalg.det(p[:, 1:] - p[:, :1])
    assert np.all(det > 0)
    # tets tile the canonical cube exactly: volumes (det/6) sum to 2^3
    assert np.allclose(det.sum() / 6.0, 8.0)


def test_single_tet_one_negative_gives_one_triangle():
    nodes = np.array([[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [0., 0., 1.]])
    grid = TetGrid(1, nodes, np.array([[0, 1, 2, 3]]))
    mesh, _ = extract(grid, np.array([-1.0, 1.0, 1.0, 1.0]))
    assert mesh.face_count == 1
    assert mesh.vertex_count == 3
    assert np.all((mesh.vertex_t > 0) & (mesh.vertex_t <= 1))


def test_single_tet_two_negative_gives_two_triangles():
    nodes = np.array([[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [0., 0., 1.]])
    grid = TetGrid(1, nodes, np.array([[0, 1, 2, 3]]))
    mesh, _ = extract(grid, np.array([-1.0, -1.0, 1.0, 1.0]))
    assert mesh.face_count == 2
    assert mesh.vertex_count == 4


def test_all_positive_empty_mesh():
    g = build_grid(3)
    mesh, _ = extract(g, np.ones(g.node_count))
    assert mesh.face_count == 0 and mesh.vertex_count == 0


def test_zero_values_count_as_positive():
    nodes = np.array([[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [0., 0., 1.]])
    grid = TetGrid(1, nodes, np.array([[0, 1, 2, 3]]))
    mesh, _ = extract(grid, np.zeros(4))
    assert mesh.face_count == 0


def test_sphere_extraction_level_set_and_watertight():
    g = build_grid(16)
    mesh, _ = extract(g, sphere_vals(g, 0.5))
    assert mesh.face_count > 0
    radii = np.linalg.norm(mesh.positions, axis=1)
    assert np.max(np.abs(radii - 0.5)) < 2 * g.cell_size
    assert is_watertight(mesh.faces)
    assert euler_characteristic(mesh) == 2


def test_box_extraction_watertight_euler():
    g = build_grid(16)
    q = np.abs(g.nodes) - 0.55
    vals = (np.linalg.norm(np.maximum(q, 0), axis=1)
            + np.minimum(np.max(q, axis=1), 0.0))
    mesh, _ = extract(g, vals)
    assert is_watertight(mesh.faces)
    assert euler_characteristic(mesh) == 2


def test_sphere_normals_point_outward():
    g = build_grid(12)
    mesh, _ = extract(g, sphere_vals(g, 0.6))
    v = mesh.positions
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    centroid = v[f].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", n, centroid) > 0)


def test_vertices_dedup_no_duplicates_per_edge():
    g = build_grid(8)
    mesh, _ = extract(g, sphere_vals(g, 0.5))
    keys = {tuple(k) for k in mesh.vertex_nodes}
    assert len(keys) == mesh.vertex_count


def test_deterministic_output_order():
    g = build_grid(8)
    m1, _ = extract(g, sphere_vals(g, 0.5))
    m2, _ = extract(g, sphere_vals(g, 0.5))
    assert np.array_equal(m1.faces, m2.faces)
    assert np.array_equal(m1.positions, m2.positions)


def test_edge_list_examples():
    assert edge_list(np.array([[0, 1, 2]])).shape[0] == 3
    assert edge_list(np.array([[0, 1, 2], [1, 2, 3]])).shape[0] == 5


def test_icosahedron_edges_by_euler():
    phi = (1 + np.sqrt(5)) / 2
    pts = []
    for a in (-1, 1):
        for b in (-phi, phi):
            pts.extend([(0, a, b), (a, b, 0), (b, 0, a)])
    pts = np.array(pts)
    hull = ConvexHull(pts)
    faces = hull.simplices
    e = edge_list(faces)
    assert faces.shape[0] == 20
    assert e.shape[0] == 30
    assert 12 - 30 + 20 == 2


def test_vertex_positions_differentiable_wrt_node_values():
    g = build_grid(3)
    rng = np.random.default_rng(11)
    vals = sphere_vals(g, 0.55)
    vals += rng.normal(size=vals.shape) * 1e-3
    assert np.min(np.abs(vals)) > 1e-4  # keep signs stable under FD probes

    w = rng.normal(size=(1,))  # filled per-vertex below once count known
    mesh, tape = extract(g, vals)
    w = rng.normal(size=mesh.positions.shape)
    loss = (mesh.vertices * w).sum()
    grad = tape.backward(loss).of(tape_leaf(tape))

    h = 1e-6
    idx = rng.choice(g.node_count, size=40, replace=False)
    for i in idx:
        vp = vals.copy(); vp[i] += h
        vm = vals.copy(); vm[i] -= h
        mp, _ = extract(g, vp)
        mm, _ = extract(g, vm)
        assert mp.vertex_count == mesh.vertex_count
        fd = ((mp.positions * w).sum() - (mm.positions * w).sum()) / (2 * h)
        if abs(fd) < 1e-12 and abs(grad[i]) < 1e-12:
            continue
        assert abs(grad[i] - fd) / max(abs(fd), 1e-8) < 1e-4


def tape_leaf(tape):
    """First leaf pushed on the tape (the node values in these tests)."""
    from tetramorph.autodiff import Var
    return Var(tape, 0)


def test_export_obj(tmp_path):
    g = build_grid(6)
    mesh, _ = extract(g, sphere_vals(g, 0.5))
    path = tmp_path / "m.obj"
    tetgrid.export_obj(path, mesh.positions, mesh.faces)
    lines = path.read_text().strip().splitlines()
    nv = sum(1 for ln in lines if ln.startswith("v "))
    nf = sum(1 for ln in lines if ln.startswith("f "))
    assert nv == mesh.vertex_count and nf == mesh.face_count
    first_face = next(ln for ln in lines if ln.startswith("f "))
    assert min(int(p) for p in first_face.split()[1:]) >= 1
