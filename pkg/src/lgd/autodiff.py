"""Tape-style reverse-mode differentiation over the tensor_core kernels.

A :class:`Tensor` holds a numpy array plus the closure that pushes its
gradient back to its parents. Graphs are rebuilt on every forward call.
:class:`Graph` wraps a function of named parameters and inputs so that it can
be run, differentiated and checked against central differences.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc

# when not None, kink-sensitive ops append a digest of their branch pattern
_kink_trace = None


def _trace(arr):
    if _kink_trace is not None:
        _kink_trace.append(hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).digest())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate ``grad`` (ones for a scalar) to every node this tensor depends on."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise tc.ShapeError(f"output gradient shape {grad.shape} != output shape {self.shape}")
        order = topological_order(self)
        for node in order:
            node.grad = None
        self.grad = grad.copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, backward, op):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, _parents=parents, _backward=backward, op=op)


# elementwise and linear algebra

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b):
    """2-D matrix product ``a @ b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise tc.ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    out = tc.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    return _make(out, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """``x @ w.T + b`` for ``x`` of shape ``(B, in)`` and ``w`` of shape ``(out, in)``."""
    y = matmul(x, transpose(w))
    return y if b is None else add(y, b)


def transpose(a):
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g.T)
    return _make(a.data.T, (a,), bw, "transpose")


def swapaxes(a, i, j):
    a = as_tensor(a)

    def bw(g):
        a._accumulate(np.swapaxes(g, i, j))
    return _make(np.swapaxes(a.data, i, j), (a,), bw, "swapaxes")


def reshape(a, shape):
    a = as_tensor(a)

    def bw(g):
        a._accumulate(g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def relu(a):
    """ReLU with subgradient 0 at 0."""
    a = as_tensor(a)
    mask = a.data > 0
    _trace(mask)

    def bw(g):
        a._accumulate(np.where(mask, g, 0))
    return _make(tc.relu(a.data), (a,), bw, "relu")


def sigmoid(a):
    a = as_tensor(a)
    s = tc.sigmoid(a.data)

    def bw(g):
        a._accumulate(g * s * (1 - s))
    return _make(s, (a,), bw, "sigmoid")


def sum(a, axis=None):
    a = as_tensor(a)

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))
    return _make(np.sum(a.data, axis=axis), (a,), bw, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / n)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# convolutional network primitives

def conv(x, w, spec):
    x, w = as_tensor(x), as_tensor(w)

    def bw(g):
        gx, gw = tc.conv_backward(x.data, w.data, spec, g)
        if x.requires_grad:
            x._accumulate(gx)
        if w.requires_grad:
            w._accumulate(gw)
    return _make(tc.conv(x.data, w.data, spec), (x, w), bw, "conv")


def max_pool(x, extent, stride=None):
    x = as_tensor(x)
    out, index = tc.max_pool(x.data, extent, stride, return_index=True)
    _trace(index)

    def bw(g):
        x._accumulate(tc.max_pool_backward(x.shape, extent, stride, index, g))
    return _make(out, (x,), bw, "max_pool")


def global_avg_pool(x):
    x = as_tensor(x)
    n = int(np.prod(x.shape[2:]))

    def bw(g):
        x._accumulate(tc.broadcast_over_locations(g / n, x.shape))
    return _make(tc.global_avg_pool(x.data), (x,), bw, "gap")


def broadcast_over_locations(v, like_shape):
    v = as_tensor(v)
    like_shape = tuple(like_shape)

    def bw(g):
        v._accumulate(g.reshape(g.shape[0], g.shape[1], -1).sum(axis=2))
    return _make(tc.broadcast_over_locations(v.data, like_shape), (v,), bw, "broadcast")


def batch_norm(x, gamma, beta, running_mean, running_var, train, momentum=0.9, eps=1e-5):
    """Per-channel normalisation over every axis except the channel axis.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``r = momentum * r + (1 - momentum) * batch``; in eval
    mode the running buffers are used and left untouched.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.data.size // x.shape[1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if train:
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                x._accumulate(inv.reshape(bshape) * (gxhat - s1 / m - xhat * s2 / m))
            else:
                x._accumulate(gxhat * inv.reshape(bshape))
    return _make(out, (x, gamma, beta), bw, "batch_norm")


def softmax_cross_entropy_np(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise tc.ShapeError(f"logits must be (B, K) with K >= 2, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise tc.ShapeError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    b = np.arange(logits.shape[0])
    loss = np.mean(lse - shifted[b, labels])
    probs = np.exp(shifted - lse[:, None])
    probs[b, labels] -= 1.0
    return loss, probs / logits.shape[0]


def softmax_cross_entropy(logits, labels):
    logits = as_tensor(logits)
    loss, grad = softmax_cross_entropy_np(logits.data, labels)

    def bw(g):
        logits._accumulate(g * grad)
    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw, "softmax_ce")


def softmax(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# named-parameter graphs and the finite-difference checker

class Graph:
    """A differentiable function of named parameters and named inputs.

    ``fn(P, X)`` receives two dicts of :class:`Tensor` leaves and returns a
    Tensor. ``forward`` rebuilds the tape each call; ``backward`` returns the
    gradient of every parameter and input leaf.
    """

    def __init__(self, fn, params=None):
        self.fn = fn
        self.params = {k: np.asarray(v) for k, v in (params or {}).items()}
        self._out = None
        self._leaves = None

    def forward(self, inputs=None):
        inputs = {k: np.asarray(v) for k, v in (inputs or {}).items()}
        clash = set(inputs) & set(self.params)
        if clash:
            raise ValueError(f"input names collide with parameter names: {sorted(clash)}")
        P = {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
        X = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
        out = as_tensor(self.fn(P, X))
        self._leaves = {**P, **X}
        self._out = out
        return out.data

    @property
    def nodes(self):
        if self._out is None:
            return []
        return topological_order(self._out)

    def backward(self, loss_grad=None):
        if self._out is None:
            raise RuntimeError("backward called before forward")
        self._out.backward(loss_grad)
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for k, t in self._leaves.items()}


@dataclass
class GradReport:
    max_rel_err: dict
    h: float
    mode: str = "central"
    coords_checked: dict = field(default_factory=dict)
    kinks_skipped: int = 0
    finite: bool = True

    @property
    def worst(self):
        return max(self.max_rel_err.values(), default=0.0)

    def passed(self, threshold):
        return self.finite and self.worst < threshold


def rel_err(a, n, eps=1e-8):
    return abs(a - n) / max(abs(a), abs(n), eps)


def grad_check(graph, inputs=None, h=1e-5, n_coords=32, seed=0, full=False, targets=None,
               max_resample=20):
    """Compare analytic gradients with central differences.

    A non-scalar output is reduced to ``sum(R * out)`` with a fixed random
    ``R``. Coordinates are subsampled with a seeded generator (``n_coords`` per
    leaf, or every coordinate when ``full``). A coordinate whose perturbation
    flips a ReLU or max-pool branch is treated as a kink hit and replaced by
    another draw.
    """
    global _kink_trace
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step size h={h} outside [1e-6, 1e-4]")
    inputs = {k: np.asarray(v) for k, v in (inputs or {}).items()}
    for name, arr in {**graph.params, **inputs}.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check needs double precision; {name} is {arr.dtype}")
    rng = np.random.default_rng(seed)

    def run(params, inp):
        global _kink_trace
        saved = graph.params
        graph.params = params
        _kink_trace = []
        try:
            out = graph.forward(inp)
            trace = _kink_trace
        finally:
            _kink_trace = None
            graph.params = saved
        return out, trace

    out, base_trace = run(graph.params, inputs)
    if not np.all(np.isfinite(out)):
        return GradReport({}, h, finite=False)
    proj = np.ones_like(out) if out.size == 1 else rng.standard_normal(out.shape)
    analytic = graph.backward(proj.reshape(out.shape))

    def loss_at(name, flat_index, delta):
        params = dict(graph.params)
        inp = dict(inputs)
        pool = params if name in params else inp
        arr = pool[name].copy()
        arr.flat[flat_index] += delta
        pool[name] = arr
        o, trace = run(params, inp)
        return float(np.sum(proj * o)), trace

    names = list(targets) if targets is not None else list(graph.params) + list(inputs)
    report = GradReport({}, h)
    for name in names:
        size = analytic[name].size
        if full or size <= n_coords:
            candidates = list(range(size))
        else:
            candidates = list(rng.permutation(size))
        want = size if full else min(n_coords, size)
        worst, checked, resampled = 0.0, 0, 0
        for idx in candidates:
            if checked >= want:
                break
            fp, tp = loss_at(name, idx, h)
            fm, tm = loss_at(name, idx, -h)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.finite = False
                continue
            if (tp != base_trace or tm != base_trace) and resampled < max_resample * want:
                report.kinks_skipped += 1
                resampled += 1
                continue
            num = (fp - fm) / (2 * h)
            worst = max(worst, rel_err(float(analytic[name].flat[idx]), num))
            checked += 1
        report.max_rel_err[name] = worst
        report.coords_checked[name] = checked
    return report
