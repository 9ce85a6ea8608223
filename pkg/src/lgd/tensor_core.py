"""Dense numeric kernels on numpy arrays.

Every kernel is a pure function: inputs are never written to and results are
fresh arrays. Arrays follow the ``(B, C, *spatial)`` layout, where for video
features the spatial axes are ``(T, H, W)``. Convolution is cross-correlation
(no kernel flip) with zero padding only.

Reductions iterate in a fixed order so that repeated calls on identical
inputs are bit-identical.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with an operation."""


def _triple(v, n):
    if np.isscalar(v):
        return (int(v),) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} per-axis values, got {len(v)}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    """Kernel extent, stride and zero padding per spatial axis."""

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = None
    padding: tuple = None

    def __post_init__(self):
        k = tuple(int(a) for a in self.kernel)
        n = len(k)
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "stride", _triple(1 if self.stride is None else self.stride, n))
        object.__setattr__(self, "padding", _triple(0 if self.padding is None else self.padding, n))
        if any(a < 1 for a in k) or any(s < 1 for s in self.stride):
            raise ShapeError(f"kernel and stride must be >= 1, got {k}, {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def output_shape(self, spatial):
        """Output extent per axis: floor((n + 2p - k) / s) + 1."""
        spatial = tuple(spatial)
        if len(spatial) != len(self.kernel):
            raise ShapeError(f"expected {len(self.kernel)} spatial axes, got {len(spatial)}")
        out = []
        for axis, (n, k, s, p) in enumerate(zip(spatial, self.kernel, self.stride, self.padding)):
            o = (n + 2 * p - k) // s + 1
            if o < 1:
                raise ShapeError(
                    f"spatial axis {axis}: extent {n} with kernel {k}, pad {p}, stride {s} gives no output")
            out.append(o)
        return tuple(out)


def _window(offset, stride, out_shape):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_shape))


def _check_conv(x, w, spec):
    if x.ndim != len(spec.kernel) + 2:
        raise ShapeError(f"input rank {x.ndim} does not match a {len(spec.kernel)}-axis kernel")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"channel axis: input has {x.shape[1]}, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")


def conv(x, w, spec):
    """Zero-padded strided cross-correlation.

    ``x`` is ``(B, C_in, *spatial)`` and ``w`` is ``(C_out, C_in, *kernel)``.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    _check_conv(x, w, spec)
    out_sp = spec.output_shape(x.shape[2:])
    pad = [(0, 0), (0, 0)] + [(p, p) for p in spec.padding]
    xp = np.pad(x, pad) if any(spec.padding) else x
    dtype = np.result_type(x, w)
    # accumulate as (C_out, B, *out) so each tensordot lands without a transpose
    acc = np.zeros((spec.out_channels, x.shape[0]) + out_sp, dtype=dtype)
    for off in itertools.product(*(range(k) for k in spec.kernel)):
        patch = xp[(slice(None), slice(None)) + _window(off, spec.stride, out_sp)]
        acc += np.tensordot(w[(slice(None), slice(None)) + off], patch, axes=([1], [1]))
    return np.ascontiguousarray(np.moveaxis(acc, 0, 1))


def conv_backward(x, w, spec, grad_out):
    """Gradients of ``sum(grad_out * conv(x, w))`` with respect to ``x`` and ``w``."""
    x = np.asarray(x)
    w = np.asarray(w)
    _check_conv(x, w, spec)
    out_sp = spec.output_shape(x.shape[2:])
    pad = [(0, 0), (0, 0)] + [(p, p) for p in spec.padding]
    xp = np.pad(x, pad) if any(spec.padding) else x
    gx = np.zeros(xp.shape, dtype=np.result_type(x, grad_out))
    gw = np.zeros(w.shape, dtype=np.result_type(w, grad_out))
    sum_axes = [0] + list(range(2, x.ndim))
    for off in itertools.product(*(range(k) for k in spec.kernel)):
        win = (slice(None), slice(None)) + _window(off, spec.stride, out_sp)
        wk = w[(slice(None), slice(None)) + off]
        gw[(slice(None), slice(None)) + off] = np.tensordot(grad_out, xp[win], axes=(sum_axes, sum_axes))
        gx[win] += np.moveaxis(np.tensordot(grad_out, wk, axes=([1], [0])), -1, 1)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(spec.padding, x.shape[2:]))
    return np.ascontiguousarray(gx[crop]), gw


def pool_output_shape(spatial, extent, stride):
    out = []
    for axis, (n, k, s) in enumerate(zip(spatial, extent, stride)):
        if k > n:
            raise ShapeError(f"spatial axis {axis}: pooling window {k} larger than input extent {n}")
        out.append((n - k) // s + 1)
    return tuple(out)


def max_pool(x, extent, stride=None, return_index=False):
    """Max over windows of ``extent`` moved by ``stride`` (no padding).

    Trailing elements that do not fill a whole window are dropped, i.e. the
    output extent is ``floor((n - k) / s) + 1``. With ``return_index`` the
    flat kernel offset of each winning element is returned too (first
    maximum wins on ties).
    """
    x = np.asarray(x)
    nsp = x.ndim - 2
    extent = _triple(extent, nsp)
    stride = _triple(extent if stride is None else stride, nsp)
    out_sp = pool_output_shape(x.shape[2:], extent, stride)
    best = None
    index = np.zeros(x.shape[:2] + out_sp, dtype=np.int64)
    for i, off in enumerate(itertools.product(*(range(k) for k in extent))):
        cand = x[(slice(None), slice(None)) + _window(off, stride, out_sp)]
        if best is None:
            best = cand.copy()
            continue
        better = cand > best
        best[better] = cand[better]
        index[better] = i
    if return_index:
        return best, index
    return best


def max_pool_backward(x_shape, extent, stride, index, grad_out):
    nsp = len(x_shape) - 2
    extent = _triple(extent, nsp)
    stride = _triple(extent if stride is None else stride, nsp)
    out_sp = grad_out.shape[2:]
    gx = np.zeros(x_shape, dtype=grad_out.dtype)
    for i, off in enumerate(itertools.product(*(range(k) for k in extent))):
        gx[(slice(None), slice(None)) + _window(off, stride, out_sp)] += np.where(index == i, grad_out, 0)
    return gx


def global_avg_pool(x):
    """Mean over every axis after the channel axis: ``(B, C, ...) -> (B, C)``."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs (B, C, ...) with at least one location axis, got rank {x.ndim}")
    return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2)


def broadcast_over_locations(v, like_shape):
    """Copy ``v[b, c]`` to every location of an array shaped ``like_shape``."""
    v = np.asarray(v)
    like_shape = tuple(like_shape)
    if v.ndim != 2 or v.shape != like_shape[:2]:
        raise ShapeError(f"cannot broadcast {v.shape} over locations of {like_shape}")
    return np.ascontiguousarray(np.broadcast_to(v.reshape(v.shape + (1,) * (len(like_shape) - 2)), like_shape))


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return a @ b


def matvec(m, v):
    return matmul(m, v)


def relu(x):
    x = np.asarray(x)
    return np.where(x > 0, x, 0).astype(x.dtype, copy=False)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def elementwise_add(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_add: shapes {a.shape} and {b.shape} differ")
    return a + b


def elementwise_mul(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: shapes {a.shape} and {b.shape} differ")
    return a * b


def fft_1d(x):
    """Discrete Fourier transform along the last axis (any length >= 1)."""
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("fft_1d needs a last axis of length >= 1")
    return np.fft.fft(x, axis=-1)


def ifft_1d(x):
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("ifft_1d needs a last axis of length >= 1")
    return np.fft.ifft(x, axis=-1)
