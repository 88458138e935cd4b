"""Morphable-model bundle: every trainable array, the lattice, and the
similarity temperature, persisted together in one parameter file.

Architecture metadata rides along as ``meta.*`` fields so a saved model
reloads without external configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .fields import BoundFields, FieldSpec, init_field_params
from .nets import AdamState, adam_step
from .serialize import read_fields, write_fields
from .tetgrid import Mesh, TetGrid, build_grid, marching_tets

_INT_FIELDS = ("feature_dim", "latent_dim", "backbone_channels",
               "sdf_layers", "sdf_hidden", "feat_layers", "feat_hidden",
               "deform_layers", "deform_hidden")
_TUPLE_FIELDS = ("encoder_dims", "encoder_strides", "adapter_dims",
                 "adapter_upsample")


@dataclass
class Model:
    spec: FieldSpec
    params: dict
    grid_resolution: int = 16
    temperature: float = 14.3
    vertex_samples: int = 150
    init_seed: int = 0
    _grid: TetGrid = None

    @property
    def grid(self) -> TetGrid:
        if self._grid is None:
            self._grid = build_grid(self.grid_resolution)
        return self._grid

    def bind(self, tape: Tape, groups=None) -> BoundFields:
        return BoundFields(tape, self.spec, self.params, groups=groups)

    def template_mesh(self, tape: Tape, bound: BoundFields = None):
        """Extract the template surface; differentiable in the shape field."""
        bound = bound or self.bind(tape, groups=("sdf.",))
        vals = bound.sdf_values(self.grid.nodes.astype(tape.dtype))
        return marching_tets(self.grid, vals), bound


def new_model(spec: FieldSpec = None, grid_resolution=16, seed=0,
              temperature=14.3, vertex_samples=150, dtype=np.float32) -> Model:
    spec = spec or FieldSpec()
    rng = np.random.default_rng(seed)
    params = init_field_params(spec, rng, dtype=dtype)
    return Model(spec, params, grid_resolution, temperature, vertex_samples, seed)


def save_model(model: Model, path):
    fields = {}
    for k in _INT_FIELDS:
        fields[f"meta.{k}"] = np.int64(getattr(model.spec, k))
    for k in _TUPLE_FIELDS:
        fields[f"meta.{k}"] = np.asarray(getattr(model.spec, k), dtype=np.int64)
    fields["meta.activation"] = np.frombuffer(
        model.spec.activation.encode(), dtype=np.uint8).copy()
    fields["meta.grid_resolution"] = np.int64(model.grid_resolution)
    fields["meta.temperature"] = np.float64(model.temperature)
    fields["meta.vertex_samples"] = np.int64(model.vertex_samples)
    fields["meta.init_seed"] = np.int64(model.init_seed)
    for name, arr in model.params.items():
        fields[f"param.{name}"] = arr
    write_fields(path, fields)


def load_model(path) -> Model:
    fields = read_fields(path)
    kwargs = {k: int(fields[f"meta.{k}"]) for k in _INT_FIELDS}
    for k in _TUPLE_FIELDS:
        kwargs[k] = tuple(int(v) for v in fields[f"meta.{k}"])
    kwargs["activation"] = bytes(fields["meta.activation"]).decode()
    spec = FieldSpec(**kwargs)
    params = {name[len("param."):]: arr for name, arr in fields.items()
              if name.startswith("param.")}
    return Model(spec, params,
                 grid_resolution=int(fields["meta.grid_resolution"]),
                 temperature=float(fields["meta.temperature"]),
                 vertex_samples=int(fields["meta.vertex_samples"]),
                 init_seed=int(fields["meta.init_seed"]))


def pretrain_template_sphere(model: Model, radius=0.7, steps=800, lr=1e-2,
                             batch=512, seed=0, unit_grad_weight=0.1):
    """Warm-start the shape field toward an analytic sphere.

    A freshly initialized field is near-constant and meshes to nothing, so
    training starts from a sphere of the given radius fit by regression,
    with a small unit-gradient-norm term to keep it distance-like.
    """
    rng = np.random.default_rng(seed)
    adam = AdamState(lr=lr)
    dtype = next(iter(model.params.values())).dtype
    for _ in range(steps):
        pts = rng.uniform(-1, 1, size=(batch, 3)).astype(dtype)
        target = (np.linalg.norm(pts, axis=1) - radius).astype(dtype)
        tape = Tape(dtype=dtype)
        bound = model.bind(tape, groups=("sdf.",))
        vals, grad = bound.sdf_with_grad(pts)
        mse = ((vals - target) ** 2).mean()
        eik = ((((grad * grad).sum(axis=1) + 1e-12).sqrt() - 1.0) ** 2).mean()
        loss = mse + eik * unit_grad_weight
        grads = bound.grads(tape.backward(loss))
        adam_step(adam, model.params, grads)
    return model
