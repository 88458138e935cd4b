"""Soft silhouettes with usable gradients.

Renders a mesh into a soft mask, then uses the mask gradient to translate
the mesh toward a target silhouette by plain gradient descent. Saves the
before/after masks as PGM images.

Run:  python3 demos/02_differentiable_rendering.py
"""

from pathlib import Path

import numpy as np

from tetramorph.autodiff import Tape
from tetramorph.camera import CameraPose
from tetramorph.losses import mask_loss
from tetramorph.render import rasterize, write_pgm
from tetramorph.tetgrid import Mesh, build_grid, marching_tets

out_dir = Path(__file__).parent

grid = build_grid(12)
pose = CameraPose(np.zeros(3), np.array([0.0, 0.0, 3.0]), 48.0, 48.0,
                  24.0, 24.0, 48, 48)

# target: a sphere rendered off-center
target_vals = np.linalg.norm(grid.nodes - [0.25, 0.15, 0.0], axis=1) - 0.45
t0 = Tape(dtype=np.float64)
target_mesh = marching_tets(grid, t0.leaf(target_vals))
target = rasterize(target_mesh, pose).mask.v.copy()
write_pgm(out_dir / "render_target.pgm", target)

# start: the same sphere centered; optimize a global translation
start_vals = np.linalg.norm(grid.nodes, axis=1) - 0.45
t1 = Tape(dtype=np.float64)
start_mesh = marching_tets(grid, t1.leaf(start_vals))
base = start_mesh.positions.copy()
faces = start_mesh.faces

from tetramorph.nets import AdamState, adam_step

params = {"shift": np.zeros(3)}
opt = AdamState(lr=0.03)
print("optimizing a 3D translation from silhouette gradients alone")
for step in range(60):
    tape = Tape(dtype=np.float64)
    sv = tape.leaf(params["shift"])
    verts = sv.reshape(1, 3) * np.ones((len(base), 1)) + base
    mesh = Mesh(verts, faces, start_mesh.vertex_nodes, start_mesh.vertex_t)
    render = rasterize(mesh, pose)
    loss = mask_loss(render.mask, target)
    if step == 0:
        write_pgm(out_dir / "render_start.pgm", render.mask.v)
    g = tape.backward(loss).of(sv)
    adam_step(opt, params, {"shift": g})
    if step % 15 == 0:
        print(f"  step {step:2d}: silhouette mse {float(loss.v):.5f} "
              f"shift {np.round(params['shift'], 3)}")
shift = params["shift"]

tape = Tape(dtype=np.float64)
mesh = Mesh(tape.leaf(base + shift), faces, start_mesh.vertex_nodes,
            start_mesh.vertex_t)
final = rasterize(mesh, pose)
write_pgm(out_dir / "render_final.pgm", final.mask.v)
print(f"recovered shift {np.round(shift, 3)} (true offset was [0.25 0.15 0.0])")
print(f"wrote {out_dir}/render_{{target,start,final}}.pgm")
