"""Reverse-mode automatic differentiation over dense numpy tensors.

A ``Tape`` records an eager computation graph: every operation on a ``Var``
appends one node holding the parent indices and a backward closure. Nodes are
therefore already in topological order and ``Tape.backward`` is a single
reverse sweep that visits each node at most once.

Values are plain ``numpy`` arrays. The tape has a dtype (float32 for
training, float64 for gradient checks) and leaves are cast on entry.
Gradients of leaves that do not participate in the requested roots are
exactly zero. All kernels are deterministic: reductions use numpy's fixed
pairwise order and scatter-adds go through ``np.add.at``.
"""

from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called outside its contract."""


class DimensionError(ContractError):
    """Raised on shape mismatches."""


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Ordered op records plus the values computed at each node."""

    def __init__(self, dtype=np.float32, check_finite=False):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.parents = []   # tuple of parent node ids per node
        self.backs = []     # backward closure per node (None for leaves)
        self.values = []    # ndarray per node

    def __len__(self):
        return len(self.parents)

    def _push(self, value, parents=(), back=None):
        value = np.asarray(value)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise ContractError("non-finite value produced on tape")
        self.parents.append(parents)
        self.backs.append(back)
        self.values.append(value)
        return Var(self, len(self.parents) - 1)

    def leaf(self, value):
        """Register an input tensor; gradients flow back to it."""
        return self._push(np.asarray(value, dtype=self.dtype))

    def backward(self, root=None, seeds=None):
        """Reverse sweep; returns a ``Grads`` lookup.

        Either pass a scalar ``root`` Var (seeded with 1), or ``seeds`` as a
        list of ``(Var, grad_array)`` pairs for chaining across tapes.
        """
        grads = [None] * len(self.parents)
        if root is not None:
            if root.v.size != 1:
                raise ContractError("backward root must be scalar")
            grads[root.i] = np.ones_like(root.v)
        for var, g in seeds or ():
            g = np.asarray(g, dtype=self.values[var.i].dtype)
            if g.shape != var.v.shape:
                raise DimensionError("seed gradient shape mismatch")
            grads[var.i] = g if grads[var.i] is None else grads[var.i] + g
        for i in range(len(self.parents) - 1, -1, -1):
            g = grads[i]
            if g is None or self.backs[i] is None:
                continue
            for p, pg in zip(self.parents[i], self.backs[i](g)):
                if pg is None:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        return Grads(self, grads)


class Grads:
    """Gradient lookup for one backward sweep."""

    def __init__(self, tape, table):
        self.tape = tape
        self._table = table

    def of(self, var):
        g = self._table[var.i]
        if g is None:
            return np.zeros_like(var.tape.values[var.i])
        return g


class Var:
    """Handle to one tape node. Cheap to copy; value lives on the tape."""

    __slots__ = ("tape", "i")

    # make numpy defer to the reflected operators instead of building
    # object arrays when an ndarray meets a Var
    __array_ufunc__ = None

    def __init__(self, tape, i):
        self.tape = tape
        self.i = i

    @property
    def v(self):
        return self.tape.values[self.i]

    @property
    def shape(self):
        return self.tape.values[self.i].shape

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other):
        return other.v if isinstance(other, Var) else np.asarray(other, dtype=self.tape.dtype)

    def __add__(self, other):
        a = self.v
        if isinstance(other, Var):
            b = other.v
            return self.tape._push(
                a + b, (self.i, other.i),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
        b = self._coerce(other)
        return self.tape._push(a + b, (self.i,), lambda g: (_unbroadcast(g, a.shape),))

    __radd__ = __add__

    def __neg__(self):
        return self.tape._push(-self.v, (self.i,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Var) else -self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        a = self.v
        if isinstance(other, Var):
            b = other.v
            return self.tape._push(
                a * b, (self.i, other.i),
                lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
        b = self._coerce(other)
        return self.tape._push(a * b, (self.i,), lambda g: (_unbroadcast(g * b, a.shape),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a = self.v
        if isinstance(other, Var):
            b = other.v
            return self.tape._push(
                a / b, (self.i, other.i),
                lambda g: (_unbroadcast(g / b, a.shape),
                           _unbroadcast(-g * a / (b * b), b.shape)))
        b = self._coerce(other)
        return self.tape._push(a / b, (self.i,), lambda g: (_unbroadcast(g / b, a.shape),))

    def __rtruediv__(self, other):
        a = self.v
        b = self._coerce(other)
        return self.tape._push(b / a, (self.i,),
                               lambda g: (_unbroadcast(-g * b / (a * a), a.shape),))

    def __pow__(self, p):
        a = self.v
        return self.tape._push(a ** p, (self.i,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other):
        a = self.v
        if isinstance(other, Var):
            b = other.v
            out = a @ b

            def back(g):
                if a.ndim == 2 and b.ndim == 2:
                    return g @ b.T, a.T @ g
                if a.ndim == 3 and b.ndim == 2:
                    return g @ b.T, np.einsum("bik,bij->kj", a, g)
                if a.ndim == 3 and b.ndim == 3:
                    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g
                raise DimensionError(f"unsupported matmul ranks {a.ndim}@{b.ndim}")

            return self.tape._push(out, (self.i, other.i), back)
        # constant right operand
        b = self._coerce(other)
        out = a @ b

        def back_const(g):
            if a.ndim == 2 and b.ndim == 2:
                return (g @ b.T,)
            if a.ndim == 3 and b.ndim == 2:
                return (g @ b.T,)
            raise DimensionError(f"unsupported matmul ranks {a.ndim}@{b.ndim}")

        return self.tape._push(out, (self.i,), back_const)

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        out = np.exp(self.v)
        return self.tape._push(out, (self.i,), lambda g: (g * out,))

    def log(self):
        a = self.v
        return self.tape._push(np.log(a), (self.i,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.v)
        return self.tape._push(out, (self.i,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.v)
        return self.tape._push(out, (self.i,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        a = self.v
        out = np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))),
                       np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))
        return self.tape._push(out, (self.i,), lambda g: (g * out * (1.0 - out),))

    def softplus(self):
        a = self.v
        out = np.logaddexp(np.zeros((), dtype=a.dtype), a)
        sig = np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))),
                       np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))
        return self.tape._push(out, (self.i,), lambda g: (g * sig,))

    def sin(self):
        a = self.v
        return self.tape._push(np.sin(a), (self.i,), lambda g: (g * np.cos(a),))

    def cos(self):
        a = self.v
        return self.tape._push(np.cos(a), (self.i,), lambda g: (-g * np.sin(a),))

    def relu(self):
        a = self.v
        return self.tape._push(np.maximum(a, 0), (self.i,), lambda g: (g * (a > 0),))

    def abs(self):
        a = self.v
        return self.tape._push(np.abs(a), (self.i,), lambda g: (g * np.sign(a),))

    def clip(self, lo, hi):
        a = self.v
        mask = (a >= lo) & (a <= hi)
        return self.tape._push(np.clip(a, lo, hi), (self.i,), lambda g: (g * mask,))

    # -- reductions & shape -------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self.v
        out = a.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return self.tape._push(out, (self.i,), back)

    def mean(self, axis=None, keepdims=False):
        a = self.v
        if axis is None:
            n = a.size
        elif isinstance(axis, tuple):
            n = int(np.prod([a.shape[ax] for ax in axis]))
        else:
            n = a.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self.v
        return self.tape._push(a.reshape(shape), (self.i,),
                               lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(range(self.v.ndim))[::-1]
        inv = np.argsort(axes)
        return self.tape._push(self.v.transpose(axes), (self.i,),
                               lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    def take(self, indices, axis=0):
        """Gather along ``axis``; backward scatter-adds (deterministic)."""
        a = self.v
        idx = np.asarray(indices)
        out = np.take(a, idx, axis=axis)

        def back(g):
            acc = np.zeros_like(a)
            if axis == 0:
                np.add.at(acc, idx, g)
            else:
                acc_m = np.moveaxis(acc, axis, 0)
                np.add.at(acc_m, idx, np.moveaxis(g, axis, 0))
            return (acc,)

        return self.tape._push(out, (self.i,), back)

    def __getitem__(self, key):
        a = self.v
        out = a[key]

        def back(g):
            acc = np.zeros_like(a)
            np.add.at(acc, key, g)
            return (acc,)

        return self.tape._push(out, (self.i,), back)

    # -- pairwise min/max ----------------------------------------------------

    def minimum(self, other):
        a = self.v
        if isinstance(other, Var):
            b = other.v
            pick_a = a <= b
            return self.tape._push(
                np.minimum(a, b), (self.i, other.i),
                lambda g: (_unbroadcast(g * pick_a, a.shape),
                           _unbroadcast(g * ~pick_a, b.shape)))
        b = self._coerce(other)
        pick_a = a <= b
        return self.tape._push(np.minimum(a, b), (self.i,),
                               lambda g: (_unbroadcast(g * pick_a, a.shape),))

    def maximum(self, other):
        a = self.v
        if isinstance(other, Var):
            b = other.v
            pick_a = a >= b
            return self.tape._push(
                np.maximum(a, b), (self.i, other.i),
                lambda g: (_unbroadcast(g * pick_a, a.shape),
                           _unbroadcast(g * ~pick_a, b.shape)))
        b = self._coerce(other)
        pick_a = a >= b
        return self.tape._push(np.maximum(a, b), (self.i,),
                               lambda g: (_unbroadcast(g * pick_a, a.shape),))


# -- multi-input ops ----------------------------------------------------------

def concat(vars_, axis=0):
    tape = vars_[0].tape
    arrays = [v.v for v in vars_]
    out = np.concatenate(arrays, axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._push(out, tuple(v.i for v in vars_), back)


def stack(vars_, axis=0):
    tape = vars_[0].tape
    out = np.stack([v.v for v in vars_], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return tape._push(out, tuple(v.i for v in vars_), back)


def where(cond, a, b):
    """Select with a constant boolean mask; gradients route per element."""
    cond = np.asarray(cond)
    tape = a.tape if isinstance(a, Var) else b.tape
    av = a.v if isinstance(a, Var) else np.asarray(a, dtype=tape.dtype)
    bv = b.v if isinstance(b, Var) else np.asarray(b, dtype=tape.dtype)
    out = np.where(cond, av, bv)
    if isinstance(a, Var) and isinstance(b, Var):
        return tape._push(out, (a.i, b.i),
                          lambda g: (_unbroadcast(g * cond, av.shape),
                                     _unbroadcast(g * ~cond, bv.shape)))
    if isinstance(a, Var):
        return tape._push(out, (a.i,), lambda g: (_unbroadcast(g * cond, av.shape),))
    return tape._push(out, (b.i,), lambda g: (_unbroadcast(g * ~cond, bv.shape),))


# -- composed helpers ----------------------------------------------------------

def logsumexp(x, axis=-1, keepdims=False):
    """Numerically stable log-sum-exp along ``axis`` (shift is detached)."""
    shift = np.max(x.v, axis=axis, keepdims=True)
    s = (x - shift).exp().sum(axis=axis, keepdims=True).log() + shift
    if keepdims:
        return s
    return s.reshape(tuple(d for i, d in enumerate(s.shape) if i != (axis % len(s.shape))))


def softmax(x, axis=-1):
    return (x - logsumexp(x, axis=axis, keepdims=True)).exp()


def log_softmax(x, axis=-1):
    return x - logsumexp(x, axis=axis, keepdims=True)


def l2_normalize(x, axis=-1, eps=0.0):
    """Rows scaled to unit norm. ``eps`` guards only when explicitly set."""
    n = ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()
    return x / n


def dot_rows(a, b):
    """Row-wise inner product of two (N, D) Vars -> (N,)."""
    return (a * b).sum(axis=-1)
