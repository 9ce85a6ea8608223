import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgd import autodiff as ad
from lgd import backbone as bb
from lgd import block as blk
from lgd import gradcheck as gc
from lgd.tensor_core import ConvSpec, ShapeError, conv

RESNET50_SHAPES = [("conv1", (16, 56, 56)), ("pool1", (8, 56, 56)), ("res2", (8, 56, 56)), ("pool2", (4, 56, 56)),
          ("res3", (4, 28, 28)), ("res4", (4, 14, 14)), ("res5", (4, 7, 7))]


def small(kind="lgd3d", **kw):
    base = dict(input_shape=(4, 8, 8), stem_channels=8, stages=((1, 16, 1), (1, 32, 2)), num_classes=3)
    base.update(kw)
    maker = bb.toy_2d if kind.endswith("2d") else bb.toy_3d
    if kind.endswith("2d"):
        base["input_shape"] = (3, 8, 8)
    return maker(kind=kind, **base)


def clip(spec, batch=2, seed=0):
    return np.random.default_rng(seed).standard_normal((batch, spec.in_channels) + spec.input_shape)


def test_resnet50_schedule_reproduces_table():
    rows = bb.shape_schedule(bb.resnet50_3d())
    assert [(r[0], r[2]) for r in rows] == RESNET50_SHAPES


def test_stride_free_single_stage_keeps_shape():
    spec = bb.toy_2d(input_shape=(3, 8, 8), stem_stride=1, stages=((2, 16, 1),))
    assert {r[2] for r in bb.shape_schedule(spec)} == {(3, 8, 8)}


@settings(max_examples=12, deadline=None)
@given(t=st.integers(4, 8), hw=st.integers(5, 12), stride=st.integers(1, 2), pool=st.booleans(),
       kind=st.sampled_from(["lgd3d", "lgd2d", "baseline3d"]))
def test_schedule_matches_forward(t, hw, stride, pool, kind):
    is2d = kind.endswith("2d")
    spec = bb.NetworkSpec(kind=kind, input_shape=(t, hw, hw), stem_channels=4, stem_stride=stride,
                          stages=((1, 8, 1), (1, 16, 2)), num_classes=2,
                          temporal_pools=() if is2d or not pool else ((-1, 2),))
    net = bb.build(spec, seed=1)
    _, shapes = bb.forward(net, clip(spec, 1), return_shapes=True)
    sched = [r[2] for r in bb.shape_schedule(spec)]
    assert shapes == sched


def test_underflow_names_the_stage():
    spec = bb.toy_3d(input_shape=(2, 32, 32))
    with pytest.raises(ShapeError, match="after stage 0"):
        bb.shape_schedule(spec)
    with pytest.raises(ShapeError, match="after stem"):
        bb.shape_schedule(bb.toy_3d(input_shape=(1, 32, 32)))


def test_spec_validation():
    with pytest.raises(ValueError, match="kind"):
        bb.NetworkSpec(kind="lgd4d")
    with pytest.raises(ValueError, match="temporal pooling"):
        bb.toy_2d(temporal_pools=((-1, 2),))
    with pytest.raises(ValueError):
        bb.NetworkSpec(stages=())
    with pytest.raises(ValueError):
        bb.NetworkSpec(num_classes=1)


def test_build_is_deterministic():
    a, b = bb.build(small(), seed=7), bb.build(small(), seed=7)
    assert a.params.keys() == b.params.keys()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = bb.build(small(), seed=8)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params if k.endswith(".w"))


def test_baseline_has_no_diffusion_parameters():
    net = bb.build(small("baseline3d"))
    assert net.diffusion_param_count() == 0
    lgd = bb.build(small("lgd3d"))
    assert lgd.diffusion_param_count() == lgd.expected_diffusion_param_count() > 0


def test_resnet50_diffusion_parameter_accounting():
    spec = bb.resnet50_3d()
    expected = 0
    for cfg in bb.block_configs(spec):
        r = max(1, cfg.c_out // 16)
        expected += r * (cfg.c_out + cfg.c_in) + r * (cfg.c_out + cfg.c_out) + r * (cfg.c_out + cfg.c_in)
    total = sum(blk.count_extra_params(c.c_out, c.c_in) for c in bb.block_configs(spec))
    assert total == expected


def test_zero_stem_gives_zero_pair():
    spec = small()
    net = bb.build(spec)
    for k in net.params:
        if k.startswith("stem.") and k.endswith(".w"):
            net.params[k] = np.zeros_like(net.params[k])
    pair = bb.initial_pair(net, np.full((1, 3) + spec.input_shape, 0.7))
    assert not pair.x.data.any() and not pair.g.data.any()


@pytest.mark.parametrize("train", [False, True])
def test_initial_global_is_pooled_stem(train):
    spec = small()
    net = bb.build(spec, seed=2)
    x = clip(spec)
    pair = bb.initial_pair(net.copy(), x, train=train)
    np.testing.assert_array_equal(pair.g.data, pair.x.data.mean(axis=(2, 3, 4)))
    manual = bb.stem(net.copy(), bb.constant_params(net), x, train)
    assert manual.data.tobytes() == pair.x.data.tobytes()


def test_input_shape_is_checked():
    net = bb.build(small())
    with pytest.raises(ShapeError, match="expects input"):
        bb.forward(net, np.zeros((1, 3, 4, 9, 8)))


@pytest.mark.parametrize("kind", ["lgd3d", "lgd2d"])
def test_zero_diffusion_equals_baseline_network(kind):
    spec = small(kind)
    lgd = bb.build(spec, seed=3)
    for k in lgd.params:
        if k.rsplit(".", 2)[-2] in ("xg", "gx", "gg"):
            lgd.params[k] = np.zeros_like(lgd.params[k])
    base = bb.build(small(kind.replace("lgd", "baseline")), seed=3)
    x = clip(spec, seed=4)
    for train in (False, True):
        a = bb.forward(lgd.copy(), x, train=train).x.data
        b = bb.forward(base.copy(), x, train=train).x.data
        assert a.tobytes() == b.tobytes()


def test_pretrained_style_init():
    spec = small(init="pretrained_style")
    net = bb.build(spec, seed=5)
    rng = np.random.default_rng(6)
    temporal = [k for k in net.params if k.endswith("conv_t.w")]
    assert len(temporal) == 1 + len(net.blocks)
    for k in temporal:
        w = net.params[k]
        x = rng.standard_normal((1, w.shape[1], 3, 2, 2))
        assert conv(x, w, ConvSpec(w.shape[1], w.shape[0], (3, 1, 1), 1, (1, 0, 0))).tobytes() == x.tobytes()
    for cfg in net.blocks:
        g = rng.standard_normal((2, cfg.c_in))
        assert not blk.project(net.params, f"{cfg.name}.xg", g).data.any()
    x = clip(spec, seed=7)
    full = bb.forward(net.copy(), x, train=True).x.data
    stripped = bb.forward(bb.without_temporal_and_diffusion(net), x, train=True).x.data
    assert full.tobytes() == stripped.tobytes()


def test_lgd2d_local_path_is_per_frame():
    spec = small("lgd2d")
    net = bb.build(spec, seed=8)
    for k in net.params:
        if k.rsplit(".", 2)[-2] in ("xg", "gx", "gg"):
            net.params[k] = np.zeros_like(net.params[k])
    x = clip(spec, seed=9)
    perm = [2, 0, 1]
    a = bb.forward(net, x).x.data
    b = bb.forward(net, x[:, :, perm]).x.data
    assert a[:, :, perm].tobytes() == b.tobytes()


def test_lgd2d_is_frame_order_invariant_through_the_global_path():
    # pooling and diffusion only see frame averages, so reordering frames permutes the local
    # map and leaves the global vector unchanged up to summation order
    spec = small("lgd2d")
    net = bb.build(spec, seed=10)
    x = clip(spec, seed=11)
    a, b = bb.forward(net, x), bb.forward(net, x[:, :, ::-1])
    np.testing.assert_allclose(a.g.data, b.g.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.x.data[:, :, ::-1], b.x.data, rtol=0, atol=1e-12)


def test_single_precision_forward():
    spec = small()
    net = bb.build(spec, seed=12).astype(np.float32)
    pair = bb.forward(net, clip(spec).astype(np.float32))
    assert pair.x.data.dtype == np.float32 and pair.g.data.dtype == np.float32
    ref = bb.forward(bb.build(spec, seed=12), clip(spec))
    np.testing.assert_allclose(pair.g.data, ref.g.data, rtol=1e-3, atol=1e-4)


def test_eval_forward_leaves_buffers_alone_and_train_updates_them():
    spec = small()
    net = bb.build(spec)
    before = {k: v.copy() for k, v in net.buffers.items()}
    bb.forward(net, clip(spec))
    assert all(np.array_equal(before[k], net.buffers[k]) for k in before)
    bb.forward(net, clip(spec), train=True)
    assert any(not np.array_equal(before[k], net.buffers[k]) for k in before)


@pytest.mark.parametrize("kind", ["lgd2d", "lgd3d"])
def test_end_to_end_gradients(kind):
    graph, inputs = gc.network_graph(kind, stage=1)
    assert ad.grad_check(graph, inputs, n_coords=2).passed(1e-4)
