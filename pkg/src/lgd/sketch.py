"""Count sketch, FFT tensor sketch, and the local/global combination feature.

The tensor sketch of ``x`` is the circular convolution of two independent
count sketches of ``x``. Its inner products estimate the second-order
polynomial kernel without bias: ``E <phi(x), phi(y)> = <x, y>**2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc
from .seeding import stream


@dataclass(frozen=True)
class SketchConfig:
    input_dim: int
    sketch_dim: int
    h1: np.ndarray
    h2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.sketch_dim < 2:
            raise ValueError(f"sketch_dim must be >= 2, got {self.sketch_dim}")
        for name in ("h1", "h2", "s1", "s2"):
            arr = getattr(self, name)
            if arr.shape != (self.input_dim,):
                raise tc.ShapeError(f"{name} has shape {arr.shape}, expected ({self.input_dim},)")
        if min(self.h1.min(), self.h2.min()) < 0 or max(self.h1.max(), self.h2.max()) >= self.sketch_dim:
            raise ValueError("hash table entries must lie in [0, sketch_dim)")

    @classmethod
    def create(cls, input_dim, sketch_dim=None, seed=0):
        """Draw uniform hash and sign tables from the ``sketch`` seed stream.

        ``sketch_dim`` defaults to ``4 * input_dim``.
        """
        d = 4 * input_dim if sketch_dim is None else int(sketch_dim)
        rng = stream(seed, "sketch")
        h1 = rng.integers(0, d, input_dim)
        h2 = rng.integers(0, d, input_dim)
        s1 = rng.choice(np.array([-1, 1]), input_dim)
        s2 = rng.choice(np.array([-1, 1]), input_dim)
        return cls(input_dim, d, h1, h2, s1, s2, seed)

    def tables(self):
        return {"h1": self.h1, "h2": self.h2, "s1": self.s1, "s2": self.s2}


def count_sketch(x, h, s, d):
    """``out[..., k] = sum over i with h[i] == k of s[i] * x[..., i]``.

    Accumulation visits ``i`` in increasing order.
    """
    x = np.asarray(x)
    h = np.asarray(h)
    s = np.asarray(s)
    if h.shape != (x.shape[-1],) or s.shape != h.shape:
        raise tc.ShapeError(f"hash/sign tables of length {h.shape} do not match input dim {x.shape[-1]}")
    if h.size and (h.min() < 0 or h.max() >= d):
        raise ValueError(f"hash values must lie in [0, {d})")
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1]).T * s[:, None]
    out = np.zeros((d, flat.shape[1]), dtype=np.result_type(x, np.float64) if x.dtype.kind != "f" else x.dtype)
    np.add.at(out, h, flat)
    return out.T.reshape(lead + (d,))


def count_sketch_transpose(g, h, s):
    """Adjoint of :func:`count_sketch`: ``out[..., i] = s[i] * g[..., h[i]]``."""
    return np.asarray(g)[..., h] * s


def _circular_conv(a, b):
    prod = tc.ifft_1d(tc.fft_1d(a) * tc.fft_1d(b))
    scale = max(1.0, float(np.max(np.abs(prod.real), initial=0.0)))
    resid = float(np.max(np.abs(prod.imag), initial=0.0))
    if not np.isfinite(resid) or resid > 1e-9 * scale:
        raise FloatingPointError(f"tensor sketch left an imaginary residue of {resid:.3g}")
    return prod.real.astype(a.dtype, copy=False)


def tensor_sketch_np(x, cfg):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite input to tensor sketch")
    a = count_sketch(x, cfg.h1, cfg.s1, cfg.sketch_dim)
    b = count_sketch(x, cfg.h2, cfg.s2, cfg.sketch_dim)
    return _circular_conv(a, b)


def tensor_sketch(x, cfg):
    """Differentiable tensor sketch over the last axis of ``x``."""
    x = ad.as_tensor(x)
    a = count_sketch(x.data, cfg.h1, cfg.s1, cfg.sketch_dim)
    b = count_sketch(x.data, cfg.h2, cfg.s2, cfg.sketch_dim)
    out = _circular_conv(a, b)

    def bw(g):
        G = tc.fft_1d(g)
        ga = tc.ifft_1d(G * np.conj(tc.fft_1d(b))).real
        gb = tc.ifft_1d(G * np.conj(tc.fft_1d(a))).real
        x._accumulate(count_sketch_transpose(ga, cfg.h1, cfg.s1) + count_sketch_transpose(gb, cfg.h2, cfg.s2))
    return ad._make(out, (x,), bw, "tensor_sketch")


def outer_product_sketch(x, cfg):
    """Count sketch of ``vec(x x^T)`` under the combined hash ``(h1(i) + h2(j)) mod d``.

    Quadratic in the input dimension; used to cross-check :func:`tensor_sketch`.
    """
    x = np.asarray(x, dtype=np.float64)
    d = cfg.sketch_dim
    out = np.zeros(d)
    for i in range(cfg.input_dim):
        for j in range(cfg.input_dim):
            out[(cfg.h1[i] + cfg.h2[j]) % d] += cfg.s1[i] * cfg.s2[j] * x[i] * x[j]
    return out


def combined_feature(x, g, cfg, normalize=False):
    """``[mean_i phi(x_i), phi(g)]`` for a final local map ``x`` (B, C, ...) and global ``g`` (B, C).

    With ``normalize`` the result is passed through signed square root and L2
    normalisation (off by default).
    """
    x, g = ad.as_tensor(x), ad.as_tensor(g)
    if x.shape[1] != cfg.input_dim or g.shape != (x.shape[0], cfg.input_dim):
        raise tc.ShapeError(
            f"pair channels {x.shape[1]}/{g.shape} do not match sketch input dim {cfg.input_dim}")
    b, c = x.shape[:2]
    n = int(np.prod(x.shape[2:]))
    per_loc = ad.swapaxes(ad.reshape(x, (b, c, n)), 1, 2)  # (B, N, C)
    local = ad.mean(tensor_sketch(per_loc, cfg), axis=1)
    feat = ad.concat([local, tensor_sketch(g, cfg)], axis=1)
    if normalize:
        feat = signed_sqrt_l2(feat)
    return feat


def signed_sqrt_l2(f, eps=1e-12):
    f = ad.as_tensor(f)
    root = np.sign(f.data) * np.sqrt(np.abs(f.data) + eps)
    norm = np.sqrt((root ** 2).sum(axis=1, keepdims=True))
    out = root / norm

    def bw(g):
        # d root / d f = 1 / (2 sqrt(|f| + eps)); then the L2 projection
        gr = (g - out * (g * out).sum(axis=1, keepdims=True)) / norm
        f._accumulate(gr / (2 * np.sqrt(np.abs(f.data) + eps)))
    return ad._make(out, (f,), bw, "signed_sqrt_l2")


def classify(feat, w, b=None):
    """Linear head: ``feat @ w.T + b``."""
    feat = ad.as_tensor(feat)
    w = ad.as_tensor(w)
    if w.shape[1] != feat.shape[-1]:
        raise tc.ShapeError(f"head expects input dim {w.shape[1]}, feature has {feat.shape[-1]}")
    return ad.linear(feat, w, b)


def predict(logits):
    """Arg-max class; ties resolve to the lowest index."""
    return np.argmax(np.asarray(logits), axis=-1)


@dataclass
class KernelStats:
    sketch_dim: int
    target: float
    mean: float
    std_err: float
    rmse: float
    n_seeds: int

    @property
    def within_3se(self):
        return abs(self.mean - self.target) <= 3 * self.std_err


def kernel_bench(input_dim=16, dims=(64, 1024), n_seeds=200, seed=0):
    """How well ``<phi(x), phi(y)>`` estimates ``<x, y>**2`` over independent table draws.

    ``x`` and ``y`` are fixed unit vectors drawn from ``seed``; each of the
    ``n_seeds`` trials uses fresh tables. Returns one :class:`KernelStats` per
    sketch dimension.
    """
    rng = stream(seed, "kernel-bench/vectors")
    x = rng.standard_normal(input_dim)
    y = x + 0.5 * rng.standard_normal(input_dim)
    x, y = x / np.linalg.norm(x), y / np.linalg.norm(y)
    target = float(x @ y) ** 2
    out = []
    for d in dims:
        est = np.empty(n_seeds)
        for t in range(n_seeds):
            table_seed = int(stream(seed, f"kernel-bench/{d}/{t}").integers(1 << 31))
            cfg = SketchConfig.create(input_dim, d, seed=table_seed)
            est[t] = tensor_sketch_np(x, cfg) @ tensor_sketch_np(y, cfg)
        out.append(KernelStats(d, target, float(est.mean()), float(est.std(ddof=1) / np.sqrt(n_seeds)),
                               float(np.sqrt(np.mean((est - target) ** 2))), n_seeds))
    return out
