"""Finite-difference gradient suites for primitives, blocks and whole networks.

Each case builds an :class:`~lgd.autodiff.Graph` at double precision and
runs :func:`~lgd.autodiff.grad_check` on it. Smooth primitives are held to
``SMOOTH_TOL``; blocks and networks, whose graphs are deep enough for
round-off to pile up, to ``NETWORK_TOL``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import block as blk
from .seeding import stream
from .sketch import SketchConfig, combined_feature, signed_sqrt_l2, tensor_sketch
from .tensor_core import ConvSpec

SMOOTH_TOL = 1e-5
NETWORK_TOL = 1e-4
H = 1e-5


@dataclass
class CaseResult:
    suite: str
    name: str
    report: ad.GradReport
    threshold: float
    seconds: float

    @property
    def passed(self):
        return self.report.passed(self.threshold)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.suite}/{self.name}: max rel err {self.report.worst:.2e} "
                f"(< {self.threshold:.0e}), {sum(self.report.coords_checked.values())} coords, "
                f"{self.report.kinks_skipped} kinks skipped, {self.seconds:.1f}s")


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _away_from_zero(rng, *shape, margin=0.1):
    # keeps ReLU and max-pool inputs clear of their kinks
    v = rng.uniform(margin, 1.0, shape)
    return v * rng.choice([-1.0, 1.0], shape)


def _op_cases(rng):
    x35 = _rand(rng, 3, 5)
    cases = {
        "add": (lambda P, X: ad.add(X["a"], X["b"]), {}, {"a": x35, "b": _rand(rng, 1, 5)}),
        "mul": (lambda P, X: ad.mul(X["a"], X["b"]), {}, {"a": x35, "b": _rand(rng, 3, 1)}),
        "matmul": (lambda P, X: ad.matmul(X["a"], X["b"]), {}, {"a": x35, "b": _rand(rng, 5, 4)}),
        "linear": (lambda P, X: ad.linear(X["x"], P["w"], P["b"]),
                   {"w": _rand(rng, 4, 5), "b": _rand(rng, 4)}, {"x": x35}),
        "transpose": (lambda P, X: ad.transpose(X["a"]), {}, {"a": x35}),
        "swapaxes": (lambda P, X: ad.swapaxes(X["a"], 0, 2), {}, {"a": _rand(rng, 2, 3, 4)}),
        "reshape": (lambda P, X: ad.reshape(X["a"], (5, 3)), {}, {"a": x35}),
        "relu": (lambda P, X: ad.relu(X["a"]), {}, {"a": _away_from_zero(rng, 3, 5)}),
        "sigmoid": (lambda P, X: ad.sigmoid(X["a"]), {}, {"a": 3 * x35}),
        "sum": (lambda P, X: ad.sum(X["a"], axis=1), {}, {"a": x35}),
        "mean": (lambda P, X: ad.mean(X["a"]), {}, {"a": x35}),
        "concat": (lambda P, X: ad.concat([X["a"], X["b"]], axis=1), {}, {"a": x35, "b": _rand(rng, 3, 2)}),
        "global_avg_pool": (lambda P, X: ad.global_avg_pool(X["x"]), {}, {"x": _rand(rng, 2, 3, 2, 3, 3)}),
        "broadcast_over_locations": (lambda P, X: ad.broadcast_over_locations(X["v"], (2, 3, 2, 3, 3)), {},
                                     {"v": _rand(rng, 2, 3)}),
        "softmax_cross_entropy": (lambda P, X: ad.softmax_cross_entropy(X["z"], np.array([0, 3, 1])), {},
                                  {"z": 2 * _rand(rng, 3, 4)}),
    }
    for name, spec in {
        "conv_3x3x3": ConvSpec(2, 3, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        "conv_1x3x3_stride2": ConvSpec(2, 3, (1, 3, 3), (1, 2, 2), (0, 1, 1)),
        "conv_3x1x1": ConvSpec(2, 3, (3, 1, 1), (1, 1, 1), (1, 0, 0)),
    }.items():
        cases[name] = (lambda P, X, s=spec: ad.conv(X["x"], P["w"], s),
                       {"w": _rand(rng, *spec.weight_shape)}, {"x": _rand(rng, 2, 2, 3, 5, 5)})
    # distinct values spaced apart so no window has a near tie
    pool_in = rng.permutation(2 * 2 * 4 * 4 * 4).reshape(2, 2, 4, 4, 4) * 0.1
    cases["max_pool"] = (lambda P, X: ad.max_pool(X["x"], (2, 1, 1), (2, 1, 1)), {}, {"x": pool_in})
    cases["max_pool_overlap"] = (lambda P, X: ad.max_pool(X["x"], (2, 2, 2), (1, 1, 1)), {}, {"x": pool_in})
    for train in (True, False):
        buffers = {"m": _rand(rng, 3) * 0.1, "v": rng.uniform(0.5, 2.0, 3)}
        cases[f"batch_norm_{'train' if train else 'eval'}"] = (
            lambda P, X, t=train, b=buffers: ad.batch_norm(X["x"], P["gamma"], P["beta"], b["m"].copy(),
                                                           b["v"].copy(), t),
            {"gamma": rng.uniform(0.5, 1.5, 3), "beta": _rand(rng, 3)}, {"x": _rand(rng, 2, 3, 2, 3, 3)})
    cfg = SketchConfig.create(6, 16, seed=int(rng.integers(1 << 30)))
    cases["tensor_sketch"] = (lambda P, X: tensor_sketch(X["x"], cfg), {}, {"x": _rand(rng, 4, 6)})
    cases["combined_feature"] = (lambda P, X: combined_feature(X["x"], X["g"], cfg), {},
                                 {"x": _rand(rng, 2, 6, 2, 2, 2), "g": _rand(rng, 2, 6)})
    cases["signed_sqrt_l2"] = (lambda P, X: signed_sqrt_l2(X["f"]), {}, {"f": _away_from_zero(rng, 2, 7)})
    return cases


def op_suite(seed=0, n_coords=32):
    rng = stream(seed, "gradcheck/ops")
    out = []
    for name, (fn, params, inputs) in _op_cases(rng).items():
        t0 = time.perf_counter()
        rep = ad.grad_check(ad.Graph(fn, params), inputs, h=H, n_coords=n_coords, seed=seed)
        out.append(CaseResult("ops", name, rep, SMOOTH_TOL, time.perf_counter() - t0))
    return out


def _block_case(variant, temporal, seed):
    c = 16
    cfg = blk.BlockConfig("b", c, c, 4, spatial_stride=1, temporal=temporal, variant=variant)
    params, buffers = blk.init_block_params(cfg, lambda n: stream(seed, "gradcheck/init/" + n))
    rng = stream(seed, f"gradcheck/block/{variant}/{temporal}")
    # random (non-zero) projections and batch-norm affine terms so every path carries gradient
    for k in params:
        if k.endswith(".gamma"):
            params[k] = rng.uniform(0.5, 1.5, params[k].shape)
        elif k.endswith(".beta") or k.split(".")[1] in ("xg", "gx", "gg"):
            params[k] = 0.5 * rng.standard_normal(params[k].shape)
    x = np.abs(rng.standard_normal((2, c, 3 if temporal else 2, 4, 4)))
    g = np.abs(rng.standard_normal((2, c)))

    def fn(P, X):
        pair = blk.block_forward(blk.LocalGlobalPair(X["x"], X["g"]), P, cfg, dict(buffers), train=True)
        return ad.concat([ad.reshape(pair.x, (2, -1)), pair.g], axis=1)

    return ad.Graph(fn, params), {"x": x, "g": g}


def block_suite(seed=0, n_coords=8):
    out = []
    for variant in ("lgd", "v1", "v2"):
        for temporal in (True, False):
            t0 = time.perf_counter()
            graph, inputs = _block_case(variant, temporal, seed)
            rep = ad.grad_check(graph, inputs, h=H, n_coords=n_coords, seed=seed)
            name = f"{variant}_{'3d' if temporal else '2d'}"
            out.append(CaseResult("block", name, rep, NETWORK_TOL, time.perf_counter() - t0))
    return out


def tiny_spec(kind):
    """Smallest spec exercising every part of the network: two stages, stride, pooling, shortcut."""
    if kind.endswith("2d"):
        return bb.toy_2d(kind=kind, input_shape=(3, 8, 8), stem_channels=8, stages=((1, 16, 1), (1, 32, 2)),
                         num_classes=3, sketch_dim=16)
    return bb.toy_3d(kind=kind, input_shape=(4, 8, 8), stem_channels=8, stages=((1, 16, 1), (1, 32, 2)),
                     num_classes=3, sketch_dim=16)


def network_graph(kind, stage, seed=0, batch=2):
    """Graph of the stage-1 or stage-2 loss of a tiny network (batch statistics in batch norm)."""
    from .training import stage1_loss, stage2_loss

    net = bb.build(tiny_spec(kind), seed=seed)
    rng = stream(seed, f"gradcheck/net/{kind}")
    for k in net.params:
        if k.endswith(".gamma"):
            net.params[k] = rng.uniform(0.5, 1.5, net.params[k].shape)
        elif k.endswith(".beta") or k.startswith("head_"):
            net.params[k] = 0.5 * rng.standard_normal(net.params[k].shape)
    # the sketch feature is large; a small combination head keeps the softmax away from saturation
    # (a saturated softmax has gradients near 1e-11 that central differences round to zero)
    net.params["head_c.w"] *= 0.02
    x = rng.standard_normal((batch, net.spec.in_channels) + net.spec.input_shape)
    y = np.arange(batch) % net.spec.num_classes

    def fn(P, X):
        pair = bb.forward(net, X["input"], P, train=True)
        if stage == 1:
            return stage1_loss(pair, y, P)[0]
        return stage2_loss(pair, y, P, net.sketch)

    return ad.Graph(fn, net.params), {"input": x}


def network_suite(seed=0, n_coords=3):
    out = []
    for kind in ("lgd2d", "lgd3d"):
        for stage in (1, 2):
            t0 = time.perf_counter()
            graph, inputs = network_graph(kind, stage, seed)
            rep = ad.grad_check(graph, inputs, h=H, n_coords=n_coords, seed=seed)
            out.append(CaseResult("network", f"{kind}_stage{stage}", rep, NETWORK_TOL,
                                  time.perf_counter() - t0))
    return out


SUITES = {"ops": op_suite, "block": block_suite, "network": network_suite}


def run(suites=("ops", "block", "network"), seed=0):
    results = []
    for s in suites:
        results.extend(SUITES[s](seed=seed))
    return results
