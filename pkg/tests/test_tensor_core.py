import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgd import tensor_core as tc
from lgd.tensor_core import ConvSpec, ShapeError


def naive_conv(x, w, stride, pad):
    """Six nested loops over (b, o, c, t, y, x) plus kernel offsets; the slow reference."""
    B, C, T, H, W = x.shape
    O, _, kt, kh, kw = w.shape
    xp = np.zeros((B, C, T + 2 * pad[0], H + 2 * pad[1], W + 2 * pad[2]))
    xp[:, :, pad[0]:pad[0] + T, pad[1]:pad[1] + H, pad[2]:pad[2] + W] = x
    To = (T + 2 * pad[0] - kt) // stride[0] + 1
    Ho = (H + 2 * pad[1] - kh) // stride[1] + 1
    Wo = (W + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((B, O, To, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for t in range(To):
                for i in range(Ho):
                    for j in range(Wo):
                        acc = 0.0
                        for c in range(C):
                            for a in range(kt):
                                for p in range(kh):
                                    for q in range(kw):
                                        acc += w[o, c, a, p, q] * xp[b, c, t * stride[0] + a,
                                                                     i * stride[1] + p, j * stride[2] + q]
                        out[b, o, t, i, j] = acc
    return out


def naive_max_pool(x, extent, stride):
    B, C = x.shape[:2]
    out_sp = [(n - k) // s + 1 for n, k, s in zip(x.shape[2:], extent, stride)]
    out = np.empty((B, C) + tuple(out_sp))
    for b, c in itertools.product(range(B), range(C)):
        for pos in itertools.product(*(range(n) for n in out_sp)):
            win = tuple(slice(p * s, p * s + k) for p, s, k in zip(pos, stride, extent))
            out[(b, c) + pos] = x[(b, c) + win].max()
    return out


def naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * f * k / n)) for f in range(n)])


# conv

def test_conv_one_axis_hand_example():
    spec = ConvSpec(1, 1, (3,), 1, 1)
    out = tc.conv(np.array([[[1.0, 2.0, 3.0]]]), np.array([[[1.0, 0.0, -1.0]]]), spec)
    np.testing.assert_array_equal(out.ravel(), [-2.0, -2.0, 2.0])


def test_identity_temporal_kernel_returns_input():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 5, 3, 3))
    w = np.array([0.0, 1.0, 0.0]).reshape(1, 1, 3, 1, 1)
    out = tc.conv(x, w, ConvSpec(1, 1, (3, 1, 1), 1, (1, 0, 0)))
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("kernel,stride,pad", [((1, 3, 3), (1, 1, 1), (0, 1, 1)),
                                                 ((1, 3, 3), (1, 2, 2), (0, 1, 1)),
                                                 ((3, 1, 1), (2, 1, 1), (1, 0, 0)),
                                                 ((3, 3, 3), (1, 1, 1), (0, 0, 0))])
def test_conv_matches_naive_loops(kernel, stride, pad):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 4, 6, 6))
    spec = ConvSpec(2, 3, kernel, stride, pad)
    w = rng.standard_normal(spec.weight_shape)
    np.testing.assert_allclose(tc.conv(x, w, spec), naive_conv(x, w, stride, pad), rtol=0, atol=1e-12)


def test_conv_is_bit_deterministic():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 3, 5, 5))
    spec = ConvSpec(3, 4, (3, 3, 3), 1, 1)
    w = rng.standard_normal(spec.weight_shape)
    assert tc.conv(x, w, spec).tobytes() == tc.conv(x, w, spec).tobytes()


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 12), k=st.integers(1, 5), s=st.integers(1, 3), p=st.integers(0, 2))
def test_output_shape_formula(n, k, s, p):
    spec = ConvSpec(1, 1, (k,), s, p)
    if n + 2 * p < k:
        with pytest.raises(ShapeError, match="axis 0"):
            spec.output_shape((n,))
    else:
        (o,) = spec.output_shape((n,))
        assert o == (n + 2 * p - k) // s + 1 >= 1
        assert tc.conv(np.ones((1, 1, n)), np.ones((1, 1, k)), spec).shape == (1, 1, o)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 16), s=st.integers(1, 2), p=st.integers(0, 1))
def test_conv_backward_is_adjoint(seed, s, p):
    # <conv(x, w), g> must equal <x, gx> and <w, gw>: two independent routes to the same scalar
    rng = np.random.default_rng(seed)
    spec = ConvSpec(2, 3, (2, 3, 3), (1, s, s), (0, p, p))
    x = rng.standard_normal((2, 2, 3, 5, 5))
    w = rng.standard_normal(spec.weight_shape)
    y = tc.conv(x, w, spec)
    g = rng.standard_normal(y.shape)
    gx, gw = tc.conv_backward(x, w, spec, g)
    assert np.sum(y * g) == pytest.approx(np.sum(x * gx), rel=1e-12)
    assert np.sum(y * g) == pytest.approx(np.sum(w * gw), rel=1e-12)


def test_conv_errors_name_the_axis():
    spec = ConvSpec(2, 1, (1, 3, 3))
    with pytest.raises(ShapeError, match="channel axis"):
        tc.conv(np.ones((1, 3, 1, 4, 4)), np.ones(spec.weight_shape), spec)
    with pytest.raises(ShapeError, match="weight shape"):
        tc.conv(np.ones((1, 2, 1, 4, 4)), np.ones((1, 2, 3, 3)), spec)
    with pytest.raises(ShapeError, match="spatial axis 1"):
        tc.conv(np.ones((1, 2, 1, 2, 4)), np.ones(spec.weight_shape), spec)


def test_conv_spec_validation():
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, (0, 3))
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, (3,), padding=-1)
    with pytest.raises(ShapeError):
        ConvSpec(1, 1, (3, 3), stride=(1, 1, 1))


# pooling

def test_max_pool_temporal_example():
    x = np.array([1.0, 5.0, 2.0, 4.0]).reshape(1, 1, 4, 1, 1)
    np.testing.assert_array_equal(tc.max_pool(x, (2, 1, 1), (2, 1, 1)).ravel(), [5.0, 4.0])


def test_max_pool_unit_window_is_identity():
    x = np.random.default_rng(3).standard_normal((2, 3, 4, 5, 5))
    np.testing.assert_array_equal(tc.max_pool(x, 1, 1), x)


@pytest.mark.parametrize("extent,stride", [((2, 2, 2), (2, 2, 2)), ((2, 1, 1), (2, 1, 1)),
                                           ((3, 2, 2), (1, 1, 1)), ((2, 3, 3), (1, 2, 2))])
def test_max_pool_matches_window_scan(extent, stride):
    x = np.random.default_rng(4).standard_normal((2, 2, 5, 6, 7))
    np.testing.assert_array_equal(tc.max_pool(x, extent, stride), naive_max_pool(x, extent, stride))


def test_max_pool_ties_route_to_first_maximum():
    x = np.ones((1, 1, 2, 1, 1))
    _, idx = tc.max_pool(x, (2, 1, 1), (2, 1, 1), return_index=True)
    g = tc.max_pool_backward(x.shape, (2, 1, 1), (2, 1, 1), idx, np.ones((1, 1, 1, 1, 1)))
    np.testing.assert_array_equal(g.ravel(), [1.0, 0.0])


def test_max_pool_window_larger_than_input():
    with pytest.raises(ShapeError, match="axis 0"):
        tc.max_pool(np.ones((1, 1, 1, 2, 2)), (2, 1, 1))


# global pooling and broadcasting

def test_gap_hand_example_and_constant():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
    assert tc.global_avg_pool(x)[0, 0] == 2.5
    np.testing.assert_array_equal(tc.global_avg_pool(np.full((2, 3, 2, 2, 2), -1.5)), np.full((2, 3), -1.5))


def test_gap_matches_summation():
    x = np.random.default_rng(5).standard_normal((3, 4, 2, 3, 5))
    ref = np.zeros((3, 4))
    for b, c in itertools.product(range(3), range(4)):
        s = 0.0
        for t, i, j in itertools.product(range(2), range(3), range(5)):
            s += x[b, c, t, i, j]
        ref[b, c] = s / 30
    np.testing.assert_allclose(tc.global_avg_pool(x), ref, rtol=0, atol=1e-12)


def test_broadcast_over_locations():
    out = tc.broadcast_over_locations(np.array([[7.0, -1.0]]), (1, 2, 1, 2, 2))
    assert out.shape == (1, 2, 1, 2, 2)
    assert np.all(out[0, 0] == 7.0) and np.all(out[0, 1] == -1.0)
    with pytest.raises(ShapeError):
        tc.broadcast_over_locations(np.ones((1, 3)), (1, 2, 1, 2, 2))


def test_elementwise_and_activations():
    np.testing.assert_array_equal(tc.relu(np.array([1.0, -1.0])), [1.0, 0.0])
    assert tc.sigmoid(np.array(0.0)) == 0.5
    big = tc.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0
    np.testing.assert_array_equal(tc.elementwise_add(np.ones(3), np.arange(3.0)), [1, 2, 3])
    np.testing.assert_array_equal(tc.elementwise_mul(np.full(3, 2.0), np.arange(3.0)), [0, 2, 4])
    with pytest.raises(ShapeError):
        tc.elementwise_add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    np.testing.assert_array_equal(tc.matvec(np.eye(2) * 3, np.array([1.0, 2.0])), [3.0, 6.0])


def test_relu_and_sigmoid_keep_single_precision():
    x = np.linspace(-2, 2, 5, dtype=np.float32)
    assert tc.relu(x).dtype == np.float32
    assert tc.sigmoid(x).dtype == np.float32


# fft

def test_fft_of_impulse():
    np.testing.assert_allclose(tc.fft_1d(np.array([1, 0, 0, 0], dtype=complex)), [1, 1, 1, 1])


@pytest.mark.parametrize("n", [1, 7, 8, 16, 30])
def test_fft_matches_naive_dft_and_round_trips(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    assert np.max(np.abs(tc.fft_1d(x) - naive_dft(x))) < 1e-10
    assert np.max(np.abs(tc.ifft_1d(tc.fft_1d(x)) - x)) < 1e-10


def test_fft_rejects_empty():
    with pytest.raises(ShapeError):
        tc.fft_1d(np.zeros(0))
