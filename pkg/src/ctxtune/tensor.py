"""Dense float64 tensors with reverse-mode autodiff.

Small tape-based implementation: every op records its parents and a
backward closure, Tensor.backward() walks the graph in reverse
topological order. Only scalar<->tensor broadcasting is supported; the
few shaped helpers the models need (row-vector bias add, column
slicing/concat) are explicit ops instead of general broadcasting.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.shapes = (tuple(shape_a), tuple(shape_b))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @staticmethod
    def _from_op(data, parents, backward):
        requires = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=requires)
        if requires:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar root, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x):
    return np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)


def add(a, b):
    a = as_tensor(a)
    if _is_scalar(b):
        out = Tensor._from_op(a.data + float(b), (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g)
        return out
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("add", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    if _is_scalar(b):
        return scale(a, float(b))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("multiply", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: a._accumulate(g * c))


def neg(a):
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: a._accumulate(-g))


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return Tensor._from_op(out_data, (a,), lambda g: a._accumulate(g * out_data))


def log(a):
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    return Tensor._from_op(out_data, (a,), lambda g: a._accumulate(g * (1.0 - out_data ** 2)))


def gelu(a):
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)

    def backward(g):
        a._accumulate(g * (cdf + x * pdf))

    return Tensor._from_op(x * cdf, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


def transpose(a):
    a = as_tensor(a)
    return Tensor._from_op(a.data.T, (a,), lambda g: a._accumulate(g.T))


def add_rowvec(x, b):
    """Add a length-d vector to every row of a T x d matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatchError("add_rowvec", x.shape, b.shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return Tensor._from_op(x.data + b.data[None, :], (x, b), backward)


def slice_cols(x, start, stop):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    return Tensor._from_op(x.data[:, start:stop], (x,), backward)


def concat_cols(parts):
    parts = [as_tensor(p) for p in parts]
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def concat_rows(parts):
    parts = [as_tensor(p) for p in parts]
    heights = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._from_op(a.data.reshape(shape), (a,),
                           lambda g: a._accumulate(g.reshape(a.data.shape)))


def sum_all(a):
    a = as_tensor(a)
    return Tensor._from_op(np.sum(a.data), (a,), lambda g: a._accumulate(np.full_like(a.data, float(g))))


def mean_rows(a):
    """Mean over rows: T x d -> 1 x d. Errors on an empty input."""
    a = as_tensor(a)
    t = a.shape[0]
    if t == 0:
        raise ValueError("mean_rows: empty input (0 rows)")

    def backward(g):
        a._accumulate(np.repeat(g, t, axis=0) / t)

    return Tensor._from_op(a.data.mean(axis=0, keepdims=True), (a,), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return Tensor._from_op(out_data, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def backward(g):
        a._accumulate(g - sm * np.sum(g, axis=axis, keepdims=True))

    return Tensor._from_op(out_data, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm: last dimension must be >= 2, got {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError("layer_norm", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            beta._accumulate(np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gamma.data
            # d xhat / d x folded analytically
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * np.mean(gx * xhat, axis=-1, keepdims=True)))

    return Tensor._from_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def l2_norm(a):
    """Euclidean norm of all entries. Gradient is 0 below 1e-12 distance."""
    a = as_tensor(a)
    n = float(np.sqrt(np.sum(a.data ** 2)))

    def backward(g):
        if n < 1e-12:
            a._accumulate(np.zeros_like(a.data))
            return
        a._accumulate(float(g) * a.data / n)

    return Tensor._from_op(n, (a,), backward)


def embed_rows(ids, table):
    """Look up rows of a V x d table; differentiable into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = int(ids[(ids < 0) | (ids >= v)][0])
        raise IndexError(f"embed_rows: id {bad} out of vocabulary range [0, {v})")
    out_data = table.data[ids] if ids.size else np.zeros((0, table.shape[1]))

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return Tensor._from_op(out_data, (table,), backward)


def finite_diff_grad_check(f, xs, h=1e-5, tol=1e-4):
    """Compare analytic gradients of scalar-valued f against central differences.

    f takes len(xs) Tensors and returns a scalar Tensor. Returns a report
    dict with the worst per-coordinate relative error.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    y = f(*ts)
    if not np.isfinite(y.data).all():
        raise FloatingPointError("finite_diff_grad_check: non-finite function value")
    y.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    max_rel = 0.0
    for i, x in enumerate(xs):
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(*[Tensor(v) for v in xs]).data)
            flat[j] = orig - h
            fm = float(f(*[Tensor(v) for v in xs]).data)
            flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("finite_diff_grad_check: non-finite perturbed value")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return {"max_rel_err": max_rel, "pass": max_rel < tol}
