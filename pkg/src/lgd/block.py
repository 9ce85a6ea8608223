"""Local and global diffusion block.

A block maps a pair ``(x, g)`` of a local map ``x`` (B, C, T, H, W) and a
global vector ``g`` (B, C) to an updated pair::

    x' = relu(F(x) + broadcast(W_xg g))           variant "lgd" and "v1"
    x' = relu(F(x) * broadcast(sigmoid(W_xg g)))  variant "v2"
    g' = relu(W_gx gap(x') + W_gg g)               variant "lgd" and "v2"
    g' = gap(x')                                   variant "v1"

Each projection ``W`` is stored as a low-rank pair ``W = W1 @ W2`` with
``W1`` of shape (C_out, r) and ``W2`` of shape (r, C_in), r = max(1, C_out // 16).
``F`` is a bottleneck residual unit; with diffusion disabled the block is a
plain residual block and ``g' = gap(x')``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tensor_core import ConvSpec, ShapeError

VARIANTS = ("lgd", "v1", "v2")


@dataclass
class LocalGlobalPair:
    x: ad.Tensor
    g: ad.Tensor

    def __post_init__(self):
        self.x = ad.as_tensor(self.x)
        self.g = ad.as_tensor(self.g)
        if self.g.ndim != 2 or self.x.shape[:2] != self.g.shape:
            raise ShapeError(f"local map {self.x.shape} and global vector {self.g.shape} disagree on (B, C)")


@dataclass(frozen=True)
class BlockConfig:
    name: str
    c_in: int
    c_out: int
    width: int
    spatial_stride: int = 1
    temporal: bool = True
    variant: str = "lgd"
    diffusion: bool = True
    rank_divisor: int = 16
    # skip the temporal conv itself but keep its batch norm and ReLU
    skip_temporal_conv: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown block variant {self.variant!r}")

    @property
    def rank(self):
        return max(1, self.c_out // self.rank_divisor)

    @property
    def projections(self):
        """Diffusion projections present: name -> (out_dim, in_dim)."""
        if not self.diffusion:
            return {}
        proj = {"xg": (self.c_out, self.c_in)}
        if self.variant != "v1":
            proj["gx"] = (self.c_out, self.c_out)
            proj["gg"] = (self.c_out, self.c_in)
        return proj

    @property
    def has_shortcut_proj(self):
        return self.c_in != self.c_out or self.spatial_stride != 1

    def convs(self):
        """Conv layers of the residual unit F: name -> ConvSpec, in application order."""
        s = self.spatial_stride
        out = {
            "conv_a": ConvSpec(self.c_in, self.width, (1, 1, 1)),
            "conv_s": ConvSpec(self.width, self.width, (1, 3, 3), (1, s, s), (0, 1, 1)),
        }
        if self.temporal:
            out["conv_t"] = ConvSpec(self.width, self.width, (3, 1, 1), 1, (1, 0, 0))
        out["conv_b"] = ConvSpec(self.width, self.c_out, (1, 1, 1))
        if self.has_shortcut_proj:
            out["short"] = ConvSpec(self.c_in, self.c_out, (1, 1, 1), (1, s, s))
        return out


def count_extra_params(c_out, c_in=None, variant="lgd", rank_divisor=16):
    """Parameters added by the diffusion projections of one block.

    For ``c_in == c_out == C`` and the full block this is ``6 * C * (C // 16)``,
    i.e. ``3 C^2 / 8`` when 16 divides C.
    """
    cfg = BlockConfig("", c_out if c_in is None else c_in, c_out, 1, variant=variant, rank_divisor=rank_divisor)
    r = cfg.rank
    return int(sum(r * (o + i) for o, i in cfg.projections.values()))


def xavier(rng, shape, fan_in, fan_out, dtype=np.float64):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def conv_xavier(rng, spec, dtype=np.float64):
    k = int(np.prod(spec.kernel))
    return xavier(rng, spec.weight_shape, spec.in_channels * k, spec.out_channels * k, dtype)


def identity_temporal_kernel(spec, dtype=np.float64):
    """A (C, C, k, 1, 1) kernel whose centre tap is the identity: conv is then an exact no-op."""
    if spec.in_channels != spec.out_channels or spec.kernel[1:] != (1, 1) or spec.kernel[0] % 2 == 0:
        raise ValueError(f"no centred identity kernel for {spec}")
    w = np.zeros(spec.weight_shape, dtype=dtype)
    w[:, :, spec.kernel[0] // 2, 0, 0] = np.eye(spec.in_channels, dtype=dtype)
    return w


def init_block_params(cfg, rng_for, init="scratch", dtype=np.float64):
    """Parameters and batch-norm buffers for one block.

    ``rng_for(name)`` returns the generator used for parameter ``name`` so that
    each tensor's draw is independent of which other tensors exist.
    ``init="pretrained_style"`` zeroes ``W_xg`` and makes temporal kernels identities.
    """
    params, buffers = {}, {}
    p = cfg.name
    for conv_name, spec in cfg.convs().items():
        key = f"{p}.{conv_name}.w"
        if conv_name == "conv_t" and init == "pretrained_style":
            params[key] = identity_temporal_kernel(spec, dtype)
        else:
            params[key] = conv_xavier(rng_for(key), spec, dtype)
        c = spec.out_channels
        params[f"{p}.{conv_name}.gamma"] = np.ones(c, dtype)
        params[f"{p}.{conv_name}.beta"] = np.zeros(c, dtype)
        buffers[f"{p}.{conv_name}.mean"] = np.zeros(c, dtype)
        buffers[f"{p}.{conv_name}.var"] = np.ones(c, dtype)
    r = cfg.rank
    for proj, (o, i) in cfg.projections.items():
        k1, k2 = f"{p}.{proj}.w1", f"{p}.{proj}.w2"
        if proj == "xg" and init == "pretrained_style":
            params[k1] = np.zeros((o, r), dtype)
            params[k2] = np.zeros((r, i), dtype)
        else:
            params[k1] = xavier(rng_for(k1), (o, r), r, o, dtype)
            params[k2] = xavier(rng_for(k2), (r, i), i, r, dtype)
    return params, buffers


def conv_bn(P, buffers, key, spec, x, train, relu=True, skip_conv=False):
    y = x if skip_conv else ad.conv(x, P[f"{key}.w"], spec)
    bn = buffers or {}
    y = ad.batch_norm(y, P[f"{key}.gamma"], P[f"{key}.beta"],
                      bn.get(f"{key}.mean"), bn.get(f"{key}.var"), train)
    return ad.relu(y) if relu else y


def residual_unit(P, buffers, cfg, x, train=True):
    """Bottleneck F(x): 1x1x1 -> 1x3x3 -> [3x1x1] -> 1x1x1 with batch norm, plus shortcut.

    The final ReLU is left to the block so the global residual can be added first.
    """
    convs = cfg.convs()
    h = x
    for name in ("conv_a", "conv_s", "conv_t"):
        if name in convs:
            h = conv_bn(P, buffers, f"{cfg.name}.{name}", convs[name], h, train,
                        skip_conv=name == "conv_t" and cfg.skip_temporal_conv)
    h = conv_bn(P, buffers, f"{cfg.name}.conv_b", convs["conv_b"], h, train, relu=False)
    if cfg.has_shortcut_proj:
        sc = conv_bn(P, buffers, f"{cfg.name}.short", convs["short"], x, train, relu=False)
    else:
        sc = x
    return ad.add(h, sc)


def project(P, prefix, v):
    """Low-rank projection ``W1 (W2 v)`` applied row-wise to ``v`` of shape (B, C_in)."""
    w1, w2 = P[f"{prefix}.w1"], P[f"{prefix}.w2"]
    return ad.matmul(ad.matmul(v, ad.transpose(w2)), ad.transpose(w1))


def _check(pair, cfg):
    if pair.x.shape[1] != cfg.c_in:
        raise ShapeError(f"{cfg.name}: block expects {cfg.c_in} channels, local map has {pair.x.shape[1]}")


def _transform(P, buffers, cfg, x, train, transform):
    if transform is not None:
        return ad.as_tensor(transform(x))
    return residual_unit(P, buffers, cfg, x, train)


def local_update(pair, P, cfg, transform=None, buffers=None, train=True):
    """``relu(F(x) + broadcast(W_xg g))``; plain ``relu(F(x))`` without diffusion.

    ``transform`` replaces the residual unit F when given.
    """
    _check(pair, cfg)
    fx = _transform(P, buffers, cfg, pair.x, train, transform)
    if not cfg.diffusion:
        return ad.relu(fx)
    res = project(P, f"{cfg.name}.xg", pair.g)
    return ad.relu(ad.add(fx, ad.broadcast_over_locations(res, fx.shape)))


def local_update_v2(pair, P, cfg, transform=None, buffers=None, train=True):
    """``relu(F(x) * broadcast(sigmoid(W_xg g)))``: the global vector gates channels."""
    _check(pair, cfg)
    fx = _transform(P, buffers, cfg, pair.x, train, transform)
    gate = ad.sigmoid(project(P, f"{cfg.name}.xg", pair.g))
    return ad.relu(ad.mul(fx, ad.broadcast_over_locations(gate, fx.shape)))


def global_update(x_new, g_prev, P, cfg):
    x_new, g_prev = ad.as_tensor(x_new), ad.as_tensor(g_prev)
    if x_new.shape[1] != cfg.c_out or g_prev.shape[1] != cfg.c_in:
        raise ShapeError(f"{cfg.name}: global update got {x_new.shape[1]}/{g_prev.shape[1]} channels, "
                         f"expected {cfg.c_out}/{cfg.c_in}")
    pooled = ad.global_avg_pool(x_new)
    if not cfg.diffusion or cfg.variant == "v1":
        return pooled
    return ad.relu(ad.add(project(P, f"{cfg.name}.gx", pooled), project(P, f"{cfg.name}.gg", g_prev)))


def block_forward(pair, P, cfg, buffers=None, train=True, transform=None):
    """Local path first, then the global path from the updated local map."""
    if cfg.diffusion and cfg.variant == "v2":
        x = local_update_v2(pair, P, cfg, transform, buffers, train)
    else:
        x = local_update(pair, P, cfg, transform, buffers, train)
    return LocalGlobalPair(x, global_update(x, pair.g, P, cfg))
