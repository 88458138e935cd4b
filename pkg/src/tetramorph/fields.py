"""Neural fields of the morphable model and their per-tape bindings.

Four trainable parts live here, all keyed by prefix in one flat parameter
dict:

* ``sdf.``     implicit template shape, MLP 3 -> 1
* ``feat.``    semantic feature field, MLP 3 -> D, rows unit-normalized
* ``deform.``  instance deformation, MLP (3 + L) -> 6 split into a
               per-vertex scale in [0.5, 1.5] and offset in [-0.5, 0.5],
               the identity map at zero output
* ``enc.``     latent encoder: strided bottleneck conv stack + spatial mean
* ``adpt.``    feature adapter: bottleneck conv stack with a final 2x
               upsample, per-pixel unit-normalized
* ``beta``     learnable background descriptor, unit-normalized on use

The scale/offset bounds keep early meshes from inverting; with the output
layer zero-initialized the deformed mesh at step 0 equals the template
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Tape, Var, concat, l2_normalize
from . import nets


@dataclass
class FieldSpec:
    """Architecture of every trainable part; defaults follow the engine's
    documented configuration."""

    feature_dim: int = 128
    latent_dim: int = 256
    backbone_channels: int = 128
    sdf_layers: int = 5
    sdf_hidden: int = 256
    feat_layers: int = 5
    feat_hidden: int = 256
    deform_layers: int = 5
    deform_hidden: int = 256
    encoder_dims: tuple = (256, 256, 256, 256)
    encoder_strides: tuple = (2, 2, 2, 2)
    adapter_dims: tuple = (512, 512, 128)
    adapter_upsample: tuple = (1, 1, 2)
    activation: str = "tanh"

    def __post_init__(self):
        if self.encoder_dims[-1] != self.latent_dim:
            raise ContractError("latent dim must equal the encoder's last width")
        if self.adapter_dims[-1] != self.feature_dim:
            raise ContractError("feature dim must equal the adapter's last width")

    def sdf_widths(self):
        return nets.mlp_layer_count(self.sdf_layers, 3, self.sdf_hidden, 1)

    def feat_widths(self):
        return nets.mlp_layer_count(self.feat_layers, 3, self.feat_hidden,
                                    self.feature_dim)

    def deform_widths(self):
        return nets.mlp_layer_count(self.deform_layers, 3 + self.latent_dim,
                                    self.deform_hidden, 6)

    def encoder_spec(self):
        return nets.ConvStackSpec(self.backbone_channels, list(self.encoder_dims),
                                  list(self.encoder_strides),
                                  activation=self.activation)

    def adapter_spec(self):
        return nets.ConvStackSpec(self.backbone_channels, list(self.adapter_dims),
                                  pre_upsample=list(self.adapter_upsample),
                                  activation=self.activation)


def init_field_params(spec: FieldSpec, rng, dtype=np.float32):
    """All trainable arrays in one ordered dict. The deformation output
    layer starts at zero (identity morph); adapter/encoder residual expand
    convs start at zero (identity residuals)."""
    params = {}

    def add_mlp(prefix, mlp):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            params[f"{prefix}w{i}"] = w
            params[f"{prefix}b{i}"] = b

    add_mlp("sdf.", nets.init_mlp(spec.sdf_widths(), rng, spec.activation, dtype=dtype))
    add_mlp("feat.", nets.init_mlp(spec.feat_widths(), rng, spec.activation, dtype=dtype))
    add_mlp("deform.", nets.init_mlp(spec.deform_widths(), rng, spec.activation,
                                     zero_last=True, dtype=dtype))
    for name, arr in nets.init_conv_stack(spec.encoder_spec(), rng, dtype=dtype).items():
        params[f"enc.{name}"] = arr
    for name, arr in nets.init_conv_stack(spec.adapter_spec(), rng, dtype=dtype).items():
        params[f"adpt.{name}"] = arr
    beta = rng.normal(size=spec.feature_dim).astype(dtype)
    params["beta"] = beta / np.linalg.norm(beta)
    return params

PARAM_GROUPS = ("sdf.", "feat.", "deform.", "enc.", "adpt.", "beta")


def group_of(name):
    for g in PARAM_GROUPS:
        if name == g or name.startswith(g):
            return g
    raise KeyError(name)


class BoundFields:
    """Leaves for (a subset of) the parameter dict on one tape, plus the
    forward computations of every field."""

    def __init__(self, tape: Tape, spec: FieldSpec, params: dict, groups=None):
        self.tape = tape
        self.spec = spec
        self.leaves = {}
        for name, arr in params.items():
            if groups is None or group_of(name) in groups:
                self.leaves[name] = tape.leaf(arr)
        self._mlps = {}

    def _mlp(self, prefix, widths):
        if prefix not in self._mlps:
            layers = [(self.leaves[f"{prefix}w{i}"], self.leaves[f"{prefix}b{i}"])
                      for i in range(len(widths) - 1)]
            self._mlps[prefix] = nets.BoundMlp.from_leaves(
                self.tape, layers, widths, self.spec.activation, prefix)
        return self._mlps[prefix]

    def _as_var(self, x):
        return x if isinstance(x, Var) else self.tape.leaf(x)

    # -- implicit shape -------------------------------------------------------

    def sdf_values(self, points) -> Var:
        out = self._mlp("sdf.", self.spec.sdf_widths())(self._as_var(points))
        return out.reshape(out.shape[0])

    def sdf_with_grad(self, points):
        """Field values and their spatial gradient, both in-graph."""
        out, jac = self._mlp("sdf.", self.spec.sdf_widths()).with_input_grad(
            self._as_var(points))
        n = out.shape[0]
        return out.reshape(n), jac.reshape(n, 3)

    # -- morph ----------------------------------------------------------------

    def deform(self, verts, latent) -> Var:
        """Per-vertex scale-and-offset morph conditioned on the latent code."""
        v = self._as_var(verts)
        lat = self._as_var(latent)
        n = v.shape[0]
        rep = lat.reshape(1, self.spec.latent_dim) * np.ones((n, 1), dtype=self.tape.dtype)
        raw = self._mlp("deform.", self.spec.deform_widths())(concat([v, rep], axis=1))
        scale = raw[:, 0:3].tanh() * 0.5 + 1.0
        offset = raw[:, 3:6].tanh() * 0.5
        return scale * v + offset

    def vertex_features(self, verts) -> Var:
        """Semantic descriptor per vertex position, unit rows."""
        raw = self._mlp("feat.", self.spec.feat_widths())(self._as_var(verts))
        norms = np.sqrt((raw.v ** 2).sum(axis=1))
        if raw.v.shape[0] and norms.min() < 1e-12:
            raise ContractError("degenerate feature field: zero-norm output")
        return l2_normalize(raw, axis=1)

    # -- image side -------------------------------------------------------------

    def encode_latent(self, feature_map) -> Var:
        """Image-conditioned latent code from an ingested backbone map."""
        x = self._as_var(feature_map)
        if x.v.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.shape[2] < 16 or x.shape[3] < 16:
            raise ContractError(f"latent encoder needs >= 16x16 input, got {x.shape}")
        h = nets.conv_stack_forward(self.spec.encoder_spec(), self.leaves, x,
                                    prefix="enc.")
        lat = h.mean(axis=(2, 3))
        return lat.reshape(self.spec.latent_dim) if lat.shape[0] == 1 else lat

    def adapt_features(self, feature_map) -> Var:
        """Correspondence-ready per-pixel descriptors: residual stack over the
        ingested map, 2x upsampled, unit per pixel. Returns (D, 2H, 2W) for a
        single map or (B, D, 2H, 2W) for a batch."""
        x = self._as_var(feature_map)
        single = x.v.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ContractError("adapter needs spatial dims >= 2")
        h = nets.conv_stack_forward(self.spec.adapter_spec(), self.leaves, x,
                                    prefix="adpt.")
        h = l2_normalize(h, axis=1, eps=1e-12)
        return h.reshape(h.shape[1:]) if single else h

    def background(self) -> Var:
        """Learnable background descriptor, unit-normalized."""
        b = self.leaves["beta"]
        return b / ((b * b).sum() + 1e-12).sqrt()

    # -- gradient harvesting ----------------------------------------------------

    def grads(self, grad_table, groups=None):
        """Collect parameter gradients by name from a backward sweep."""
        out = {}
        for name, leaf in self.leaves.items():
            if groups is None or group_of(name) in groups:
                out[name] = grad_table.of(leaf)
        return out
