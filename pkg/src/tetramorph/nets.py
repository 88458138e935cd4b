"""Small trainable networks on top of the tape: MLPs, bottleneck conv
stacks, and a bias-corrected adaptive-moment optimizer.

Parameters are plain numpy arrays grouped in ordered dicts; ``bind_*``
creates tape leaves for one forward pass so gradients can be harvested per
parameter name. Initialization is uniform fan-in scaling from a caller-owned
RNG, so a fixed seed reproduces every weight bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ContractError, DimensionError, Tape, Var, where

ACTIVATIONS = ("tanh", "softplus", "relu")


def _act(x: Var, kind: str) -> Var:
    if kind == "tanh":
        return x.tanh()
    if kind == "softplus":
        return x.softplus()
    if kind == "relu":
        return x.relu()
    raise ContractError(f"unknown activation {kind!r}")


def _act_deriv(z: Var, kind: str) -> Var:
    if kind == "tanh":
        t = z.tanh()
        return 1.0 - t * t
    if kind == "softplus":
        return z.sigmoid()
    if kind == "relu":
        return where(z.v > 0, z * 0 + 1.0, z * 0)
    raise ContractError(f"unknown activation {kind!r}")


# -- fully connected ----------------------------------------------------------

@dataclass
class MlpParams:
    """Per-layer weights/biases plus the hidden activation tag."""

    widths: list
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "tanh"

    def param_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_mlp(widths, rng, activation="tanh", zero_last=False, dtype=np.float32):
    """Uniform fan-in init; ``zero_last`` zeroes the output layer (identity
    reparameterizations rely on it)."""
    if len(widths) < 2:
        raise ContractError("mlp needs at least input and output widths")
    weights, biases = [], []
    for i in range(len(widths) - 1):
        fan_in = widths[i]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(widths[i], widths[i + 1])).astype(dtype)
        b = np.zeros(widths[i + 1], dtype=dtype)
        if zero_last and i == len(widths) - 2:
            w[:] = 0.0
        weights.append(w)
        biases.append(b)
    return MlpParams(list(widths), weights, biases, activation)


def mlp_layer_count(widths_spec_layers, in_dim, hidden, out_dim):
    """Widths list for a net described as "N layers, hidden H": N weight
    matrices, N-1 of them feeding hidden units."""
    return [in_dim] + [hidden] * (widths_spec_layers - 1) + [out_dim]


class BoundMlp:
    """MLP with leaves already on a tape; callable on (N, in_dim) Vars."""

    def __init__(self, tape: Tape, params: MlpParams, prefix=""):
        self.tape = tape
        self.activation = params.activation
        self.widths = params.widths
        self.layers = [(tape.leaf(w), tape.leaf(b))
                       for w, b in zip(params.weights, params.biases)]
        self.prefix = prefix

    @classmethod
    def from_leaves(cls, tape, layers, widths, activation, prefix=""):
        """Wrap already-bound (weight, bias) leaf pairs."""
        m = cls.__new__(cls)
        m.tape = tape
        m.activation = activation
        m.widths = widths
        m.layers = list(layers)
        m.prefix = prefix
        return m

    def leaf_names(self):
        names = []
        for i in range(len(self.layers)):
            names.append(f"{self.prefix}w{i}")
            names.append(f"{self.prefix}b{i}")
        return names

    def leaf_vars(self):
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def __call__(self, x: Var) -> Var:
        if x.shape[-1] != self.widths[0]:
            raise DimensionError(
                f"mlp input dim {x.shape[-1]} != first width {self.widths[0]}")
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if i != last:
                h = _act(h, self.activation)
        return h

    def with_input_grad(self, x: Var):
        """Forward pass plus the jacobian d(out)/d(in) carried in-graph.

        Returns ``(out (N, d_out), jac (N, d_in, d_out))``; since the
        jacobian is composed from primitive tape ops, losses built on it
        backpropagate into the weights like any other value.
        """
        n, d_in = x.shape
        h = x
        eye = np.broadcast_to(np.eye(d_in, dtype=x.v.dtype), (n, d_in, d_in)).copy()
        jac = self.tape.leaf(eye)  # constant seed; receives no useful grad
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            z = h @ w + b
            jac = jac @ w
            if i != last:
                h = _act(z, self.activation)
                d = _act_deriv(z, self.activation)
                jac = jac * d.reshape(n, 1, z.shape[-1])
            else:
                h = z
        return h, jac


# -- convolution --------------------------------------------------------------

def conv2d(x: Var, w: Var, b: Var, stride=1, pad=0) -> Var:
    """NCHW convolution via im2col + matmul. Backward scatters through the
    same windows in a fixed kernel-position order (deterministic)."""
    xn = x.v
    wn, bn = w.v, b.v
    n, c, h, wd = xn.shape
    o, ci, kh, kw = wn.shape
    if ci != c:
        raise DimensionError(f"conv channels {c} != kernel {ci}")
    xp = np.pad(xn, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xn
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = wn.reshape(o, c * kh * kw)
    out = (cols @ wmat.T + bn).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def back(g):
        gc = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        dw = (gc.T @ cols).reshape(o, c, kh, kw)
        db = gc.sum(axis=0)
        dcols = (gc @ wmat).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                    dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return dx, dw, db

    return x.tape._push(out, (x.i, w.i, b.i), back)


def upsample2x(x: Var) -> Var:
    """Nearest-neighbor 2x spatial upsampling of an NCHW Var."""
    xn = x.v
    n, c, h, w = xn.shape
    out = np.repeat(np.repeat(xn, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return x.tape._push(out, (x.i,), back)


# -- bottleneck residual stacks -------------------------------------------------

@dataclass
class ConvStackSpec:
    """Sequence of bottleneck residual blocks.

    Per block: 1x1 squeeze, 3x3 (carries the stride), 1x1 expand (zero-init
    so a fresh block is the identity on its skip path), plus a 1x1 projection
    skip when channels or stride change. ``pre_upsample[i] == 2`` inserts a
    nearest 2x upsample before block ``i``.
    """

    in_channels: int
    out_dims: list
    strides: list = None
    pre_upsample: list = None
    activation: str = "tanh"

    def __post_init__(self):
        nb = len(self.out_dims)
        if self.strides is None:
            self.strides = [1] * nb
        if self.pre_upsample is None:
            self.pre_upsample = [1] * nb
        if not (len(self.strides) == len(self.pre_upsample) == nb):
            raise ContractError("conv stack spec lists must share length")


def init_conv_stack(spec: ConvStackSpec, rng, dtype=np.float32):
    """Returns an ordered dict name -> array for every block parameter."""
    params = {}
    c_in = spec.in_channels

    def conv_init(ci, co, k, zero=False):
        bound = 1.0 / np.sqrt(ci * k * k)
        w = rng.uniform(-bound, bound, size=(co, ci, k, k)).astype(dtype)
        if zero:
            w[:] = 0.0
        return w, np.zeros(co, dtype=dtype)

    for i, c_out in enumerate(spec.out_dims):
        mid = max(c_out // 4, 4)
        for name, (ci, co, k, zero) in {
            "w1": (c_in, mid, 1, False),
            "w2": (mid, mid, 3, False),
            "w3": (mid, c_out, 1, True),
        }.items():
            w, b = conv_init(ci, co, k, zero)
            params[f"b{i}.{name}"] = w
            params[f"b{i}.{name.replace('w', 'bias')}"] = b
        if c_in != c_out or spec.strides[i] != 1:
            w, b = conv_init(c_in, c_out, 1)
            params[f"b{i}.wskip"] = w
            params[f"b{i}.biasskip"] = b
        c_in = c_out
    return params


def bind_params(tape: Tape, params: dict, prefix=""):
    """Create tape leaves for every array; returns {name: Var}."""
    return {prefix + k: tape.leaf(v) for k, v in params.items()}


def conv_stack_forward(spec: ConvStackSpec, leaves: dict, x: Var, prefix=""):
    """Run the residual stack on an NCHW Var."""
    h = x
    for i, c_out in enumerate(spec.out_dims):
        if spec.pre_upsample[i] == 2:
            h = upsample2x(h)
        s = spec.strides[i]
        p = leaves
        y = _act(conv2d(h, p[f"{prefix}b{i}.w1"], p[f"{prefix}b{i}.bias1"]), spec.activation)
        y = _act(conv2d(y, p[f"{prefix}b{i}.w2"], p[f"{prefix}b{i}.bias2"],
                        stride=s, pad=1), spec.activation)
        y = conv2d(y, p[f"{prefix}b{i}.w3"], p[f"{prefix}b{i}.bias3"])
        if f"{prefix}b{i}.wskip" in p:
            skip = conv2d(h, p[f"{prefix}b{i}.wskip"], p[f"{prefix}b{i}.biasskip"],
                          stride=s)
        else:
            skip = h
        h = _act(y + skip, spec.activation)
    return h


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict):
    """One bias-corrected adaptive-moment update, in place on ``params``.

    Only names present in ``grads`` are touched; moment buffers are created
    lazily and always shape-match their parameter.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params
