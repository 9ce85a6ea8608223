"""LGD-2D and LGD-3D networks built from diffusion blocks.

The stem is a ``1 x k x k`` convolution (plus a ``3 x 1 x 1`` temporal
convolution for 3-D kinds), each followed by batch norm and ReLU. The initial
global vector is the average of the stem output. Stages of bottleneck blocks
follow, with temporal max pooling at the configured positions.

2-D kinds use only ``1 x k x k`` kernels, so the T axis behaves like a batch
axis on the local path while pooling and diffusion still span all frames.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .block import BlockConfig, LocalGlobalPair, block_forward, conv_bn, conv_xavier, \
    count_extra_params, identity_temporal_kernel, init_block_params, xavier
from .seeding import stream
from .sketch import SketchConfig
from .tensor_core import ConvSpec, ShapeError, pool_output_shape

KINDS = ("lgd2d", "lgd3d", "baseline2d", "baseline3d")


@dataclass
class NetworkSpec:
    kind: str = "lgd3d"
    input_shape: tuple = (8, 32, 32)
    in_channels: int = 3
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    # (num_blocks, output channels, spatial stride of the first block)
    stages: tuple = ((2, 16, 1), (2, 32, 2))
    # (position, temporal stride); position -1 is after the stem, i after stage i
    temporal_pools: tuple = ((-1, 2), (0, 2))
    bottleneck_ratio: int = 4
    block_variant: str = "lgd"
    rank_divisor: int = 16
    init: str = "scratch"
    classifier: str = "separate_heads"
    num_classes: int = 6
    sketch_dim: int = None
    normalize_feature: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(a) for a in self.input_shape)
        self.stages = tuple(tuple(int(a) for a in s) for s in self.stages)
        self.temporal_pools = tuple(tuple(int(a) for a in p) for p in self.temporal_pools)
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.init not in ("scratch", "pretrained_style"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.classifier not in ("separate_heads", "combined"):
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if self.block_variant not in ("lgd", "v1", "v2"):
            raise ValueError(f"unknown block variant {self.block_variant!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (T, H, W), got {self.input_shape}")
        if not self.stages:
            raise ValueError("at least one stage is required")
        for n, c, s in self.stages:
            if n < 1 or c < 1 or s < 1:
                raise ValueError(f"invalid stage {(n, c, s)}")
        if self.is_2d and self.temporal_pools:
            raise ValueError("2-D kinds treat T as a batch axis and take no temporal pooling")
        for pos, st in self.temporal_pools:
            if not -1 <= pos < len(self.stages) or st < 1:
                raise ValueError(f"invalid temporal pool {(pos, st)}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def is_2d(self):
        return self.kind.endswith("2d")

    @property
    def has_diffusion(self):
        return self.kind.startswith("lgd")

    @property
    def final_channels(self):
        return self.stages[-1][1]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["stages"] = [list(s) for s in self.stages]
        d["temporal_pools"] = [list(p) for p in self.temporal_pools]
        return d


def toy_2d(**kw):
    base = dict(kind="lgd2d", input_shape=(3, 32, 32), stem_channels=16, stages=((2, 16, 1), (2, 32, 2)),
                temporal_pools=())
    base.update(kw)
    return NetworkSpec(**base)


def toy_3d(**kw):
    base = dict(kind="lgd3d", input_shape=(8, 32, 32), stem_channels=16, stages=((2, 16, 1), (2, 32, 2)),
                temporal_pools=((-1, 2), (0, 2)))
    base.update(kw)
    return NetworkSpec(**base)


def resnet50_3d(**kw):
    base = dict(kind="lgd3d", input_shape=(16, 112, 112), stem_channels=64, stem_kernel=7, stem_stride=2,
                stages=((3, 256, 1), (4, 512, 2), (6, 1024, 2), (3, 2048, 2)),
                temporal_pools=((-1, 2), (0, 2)), num_classes=600)
    base.update(kw)
    return NetworkSpec(**base)


PRESETS = {"toy2d": toy_2d, "toy3d": toy_3d, "resnet50_3d": resnet50_3d}


def stem_convs(spec):
    k, s = spec.stem_kernel, spec.stem_stride
    convs = {"stem.conv_s": ConvSpec(spec.in_channels, spec.stem_channels, (1, k, k), (1, s, s),
                                     (0, k // 2, k // 2))}
    if not spec.is_2d:
        convs["stem.conv_t"] = ConvSpec(spec.stem_channels, spec.stem_channels, (3, 1, 1), 1, (1, 0, 0))
    return convs


def block_configs(spec):
    cfgs = []
    c_in = spec.stem_channels
    for i, (n, c, stride) in enumerate(spec.stages):
        width = max(1, c // spec.bottleneck_ratio)
        for j in range(n):
            cfgs.append(BlockConfig(f"s{i}.b{j}", c_in, c, width, stride if j == 0 else 1,
                                    temporal=not spec.is_2d, variant=spec.block_variant,
                                    diffusion=spec.has_diffusion, rank_divisor=spec.rank_divisor))
            c_in = c
    return cfgs


def shape_schedule(spec):
    """Table of ``(layer, operation, (T, H, W))`` rows with no parameters allocated."""
    rows = []
    shape = spec.input_shape
    pools = dict(spec.temporal_pools)
    n_pool = 0

    def pool(after, shape):
        nonlocal n_pool
        if after not in pools:
            return shape
        st = pools[after]
        n_pool += 1
        try:
            t = pool_output_shape((shape[0],), (2,), (st,))[0]
        except ShapeError:
            where = "stem" if after == -1 else f"stage {after}"
            raise ShapeError(f"temporal pool after {where}: T={shape[0]} is too short for a 2-frame window")
        shape = (t,) + shape[1:]
        rows.append((f"pool{n_pool}", f"2x1x1 max, stride {st},1,1", shape))
        return shape

    convs = stem_convs(spec)
    try:
        for cs in convs.values():
            shape = cs.output_shape(shape)
    except ShapeError as e:
        raise ShapeError(f"stem: {e}")
    k, s = spec.stem_kernel, spec.stem_stride
    op = f"1x{k}x{k},{spec.stem_channels}" + ("" if spec.is_2d else f" + 3x1x1,{spec.stem_channels}")
    rows.append(("conv1", f"{op}, stride 1,{s},{s}", shape))
    shape = pool(-1, shape)
    cfgs = block_configs(spec)
    for i, (n, c, _) in enumerate(spec.stages):
        for cfg in cfgs:
            if not cfg.name.startswith(f"s{i}."):
                continue
            try:
                shape = cfg.convs()["conv_s"].output_shape(shape)
            except ShapeError as e:
                raise ShapeError(f"stage {i}: {e}")
        w = max(1, c // spec.bottleneck_ratio)
        kern = f"1x3x3,{w}" + ("" if spec.is_2d else f" 3x1x1,{w}")
        rows.append((f"res{i + 2}", f"[1x1x1,{w} {kern} 1x1x1,{c}] x {n}", shape))
        shape = pool(i, shape)
    return rows


@dataclass
class Network:
    spec: NetworkSpec
    params: dict
    buffers: dict
    sketch: SketchConfig
    seed: int = 0
    stage_done: int = 0
    blocks: list = field(default_factory=list)
    skip_temporal_conv: bool = False

    def __post_init__(self):
        if not self.blocks:
            self.blocks = block_configs(self.spec)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        net = copy.deepcopy(self)
        net.params = {k: v.astype(dtype) for k, v in net.params.items()}
        net.buffers = {k: v.astype(dtype) for k, v in net.buffers.items()}
        return net

    def copy(self):
        return copy.deepcopy(self)

    def param_count(self, prefix=None):
        return int(sum(v.size for k, v in self.params.items() if prefix is None or k.startswith(prefix)))

    def diffusion_param_count(self):
        return int(sum(v.size for k, v in self.params.items()
                       if k.rsplit(".", 2)[-2] in ("xg", "gx", "gg")))

    def expected_diffusion_param_count(self):
        return sum(count_extra_params(b.c_out, b.c_in, b.variant, b.rank_divisor)
                   for b in self.blocks if b.diffusion)


def build(spec, seed=0, dtype=np.float64):
    """Allocate and initialise every parameter.

    Convolutions, projections and heads are Xavier-uniform, biases zero, batch
    norm scale one. Each tensor draws from its own named seed stream.
    """
    shape_schedule(spec)  # rejects underflowing specs early
    rng_for = lambda name: stream(seed, "init/" + name)  # noqa: E731
    params, buffers = {}, {}
    for key, cs in stem_convs(spec).items():
        if key.endswith("conv_t") and spec.init == "pretrained_style":
            params[f"{key}.w"] = identity_temporal_kernel(cs, dtype)
        else:
            params[f"{key}.w"] = conv_xavier(rng_for(f"{key}.w"), cs, dtype)
        params[f"{key}.gamma"] = np.ones(cs.out_channels, dtype)
        params[f"{key}.beta"] = np.zeros(cs.out_channels, dtype)
        buffers[f"{key}.mean"] = np.zeros(cs.out_channels, dtype)
        buffers[f"{key}.var"] = np.ones(cs.out_channels, dtype)
    for cfg in block_configs(spec):
        p, b = init_block_params(cfg, rng_for, spec.init, dtype)
        params.update(p)
        buffers.update(b)
    c, k = spec.final_channels, spec.num_classes
    sketch = SketchConfig.create(c, spec.sketch_dim, seed)
    for head, dim in (("head_g", c), ("head_x", c)):
        params[f"{head}.w"] = xavier(rng_for(f"{head}.w"), (k, dim), dim, k, dtype)
        params[f"{head}.b"] = np.zeros(k, dtype)
    # the combination head starts at zero so stage 2 begins from uniform scores
    # instead of a random readout of a large sketch feature
    params["head_c.w"] = np.zeros((k, 2 * sketch.sketch_dim), dtype)
    params["head_c.b"] = np.zeros(k, dtype)
    return Network(spec, params, buffers, sketch, seed)


def constant_params(net):
    return {k: ad.Tensor(v) for k, v in net.params.items()}


def _check_input(net, x):
    spec = net.spec
    want = (spec.in_channels,) + spec.input_shape
    if x.ndim != 5 or x.shape[1:] != want:
        raise ShapeError(f"network expects input (B, {', '.join(map(str, want))}), got {x.shape}")


def stem(net, P, x, train=False):
    h = ad.as_tensor(x)
    for key, cs in stem_convs(net.spec).items():
        skip = net.skip_temporal_conv and key.endswith("conv_t")
        h = conv_bn(P, net.buffers, key, cs, h, train, skip_conv=skip)
    return h


def initial_pair(net, x, P=None, train=False):
    """``x1 = stem(input)`` and ``g1 = gap(x1)``."""
    x = ad.as_tensor(x)
    _check_input(net, x)
    P = constant_params(net) if P is None else P
    x1 = stem(net, P, x, train)
    return LocalGlobalPair(x1, ad.global_avg_pool(x1))


def forward(net, x, P=None, train=False, return_shapes=False):
    """Run the stem and every block; returns the final :class:`LocalGlobalPair`.

    ``P`` maps parameter names to tensors (constants built from ``net.params``
    when omitted). ``train`` selects batch statistics in batch norm.
    """
    P = constant_params(net) if P is None else P
    pair = initial_pair(net, x, P, train)
    shapes = [tuple(pair.x.shape[2:])]
    pools = dict(net.spec.temporal_pools)

    def pool(after, pair):
        if after in pools:
            pair = LocalGlobalPair(ad.max_pool(pair.x, (2, 1, 1), (pools[after], 1, 1)), pair.g)
            shapes.append(tuple(pair.x.shape[2:]))
        return pair

    pair = pool(-1, pair)
    for i in range(len(net.spec.stages)):
        for cfg in net.blocks:
            if cfg.name.startswith(f"s{i}."):
                pair = block_forward(pair, P, cfg, net.buffers, train)
        shapes.append(tuple(pair.x.shape[2:]))
        pair = pool(i, pair)
    if return_shapes:
        return pair, shapes
    return pair


def without_temporal_and_diffusion(net):
    """Same weights with every temporal conv and every diffusion projection removed.

    Batch norm and ReLU that followed a temporal conv stay in place, so with
    identity temporal kernels and zero ``W_xg`` the local path of the result
    equals that of ``net`` exactly.
    """
    stripped = net.copy()
    stripped.blocks = [dataclasses.replace(b, skip_temporal_conv=b.temporal, diffusion=False)
                       for b in net.blocks]
    stripped.skip_temporal_conv = True
    return stripped
