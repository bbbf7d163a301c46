import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from fatnet4f.conv import (
    conv2d_direct,
    conv2d_fft,
    conv2d_grad_input,
    conv2d_grad_kernel,
    same_padding,
)
from fatnet4f.field import rotate180


def loop_oracle(x, k):
    """Same-padded cross-correlation, one scalar at a time."""
    b, c, h, w = x.shape
    o, _, kk, _ = k.shape
    lo, _ = same_padding(kk)
    out = np.zeros((b, o, h, w))
    for bi in range(b):
        for oi in range(o):
            for i in range(h):
                for j in range(w):
                    s = 0.0
                    for ci in range(c):
                        for u in range(kk):
                            for v in range(kk):
                                y, z = i + u - lo, j + v - lo
                                if 0 <= y < h and 0 <= z < w:
                                    s += x[bi, ci, y, z] * k[oi, ci, u, v]
                    out[bi, oi, i, j] = s
    return out


def test_scalar_product():
    assert conv2d_direct(np.full((1, 1, 1, 1), 5.0), np.full((1, 1, 1, 1), 2.0))[0, 0, 0, 0] == 10


def test_delta_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 6))
    d = np.zeros((1, 1, 3, 3))
    d[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d_direct(x, d), x)
    assert np.max(np.abs(conv2d_fft(x, d) - x)) < 1e-12


def test_hand_enumerated_box():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
    out = conv2d_direct(x, np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(out[0, 0], [[10, 10], [10, 10]])


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
def test_direct_matches_loop_oracle(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 2, 5, 4))
    w = rng.standard_normal((3, 2, k, k))
    np.testing.assert_allclose(conv2d_direct(x, w), loop_oracle(x, w), atol=1e-12)


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_odd_kernels_match_scipy(k):
    rng = np.random.default_rng(10 + k)
    x = rng.standard_normal((9, 11))
    w = rng.standard_normal((k, k))
    ref = correlate2d(x, w, mode="same")
    np.testing.assert_allclose(conv2d_direct(x[None, None], w[None, None])[0, 0], ref, atol=1e-12)


def test_fft_matches_direct_sweep():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        h, w = rng.integers(1, 17, size=2)
        k = int(rng.integers(1, 8))
        c, o, b = rng.integers(1, 4, size=3)
        x = rng.uniform(-1, 1, (b, c, h, w))
        kern = rng.uniform(-1, 1, (o, c, k, k))
        worst = max(worst, np.max(np.abs(conv2d_fft(x, kern) - conv2d_direct(x, kern))))
    assert worst < 1e-9


def test_circular_convolution_wraps_without_padding():
    # a right-neighbour tap wraps column 0 into the last column without padding
    x = np.zeros((1, 1, 8, 8))
    x[0, 0, :, 0] = 1.0
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 2] = 1.0
    circular = np.roll(x, -1, axis=-1)
    linear = conv2d_fft(x, k)
    assert np.max(np.abs(circular - linear)) > 0.5
    assert np.allclose(linear[..., -1], 0.0, atol=1e-12)
    np.testing.assert_allclose(linear, conv2d_direct(x, k), atol=1e-12)


def test_channel_mismatch_rejected():
    with pytest.raises(ValueError):
        conv2d_direct(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        conv2d_fft(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(1, 10), w=st.integers(1, 10), k=st.integers(1, 6),
    c=st.integers(1, 3), o=st.integers(1, 3), seed=st.integers(0, 2**16),
)
def test_fft_equals_direct_property(h, w, k, c, o, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (1, c, h, w))
    kern = rng.uniform(-1, 1, (o, c, k, k))
    assert np.max(np.abs(conv2d_fft(x, kern) - conv2d_direct(x, kern))) < 1e-9


def test_linearity_and_rotation_commutation():
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((2, 1, 1, 7, 7))
    k1, k2 = rng.standard_normal((2, 1, 1, 3, 3))
    np.testing.assert_allclose(conv2d_direct(2 * x - y, k1), 2 * conv2d_direct(x, k1) - conv2d_direct(y, k1), atol=1e-12)
    np.testing.assert_allclose(conv2d_direct(x, 3 * k1 + k2), 3 * conv2d_direct(x, k1) + conv2d_direct(x, k2), atol=1e-12)
    sym = k1 + rotate180(k1)
    np.testing.assert_allclose(rotate180(conv2d_direct(x, sym)), conv2d_direct(rotate180(x), sym), atol=1e-12)


def test_scalar_gradients():
    g = np.full((1, 1, 1, 1), 1.5)
    w = np.full((1, 1, 1, 1), -2.0)
    x = np.full((1, 1, 1, 1), 3.0)
    assert conv2d_grad_input(g, w)[0, 0, 0, 0] == -3.0
    assert conv2d_grad_kernel(g, x, 1)[0, 0, 0, 0] == 4.5


def test_zero_upstream_gradient():
    g = np.zeros((2, 3, 5, 5))
    assert not np.any(conv2d_grad_input(g, np.ones((3, 2, 3, 3))))
    assert not np.any(conv2d_grad_kernel(g, np.ones((2, 2, 5, 5)), 3))


def numeric_grads(x, w, g, h=1e-5):
    def loss(xx, ww):
        return np.sum(g * conv2d_direct(xx, ww))

    gx = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        gx[idx] = (loss(xp, w) - loss(xm, w)) / (2 * h)
    gw = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        gw[idx] = (loss(x, wp) - loss(x, wm)) / (2 * h)
    return gx, gw


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


@pytest.mark.parametrize("k", [2, 3])
def test_gradients_match_finite_differences(k):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((2, 2, k, k))
    g = rng.standard_normal((1, 2, 6, 6))
    gx, gw = numeric_grads(x, w, g)
    assert max_rel_err(conv2d_grad_input(g, w), gx) < 1e-4
    assert max_rel_err(conv2d_grad_kernel(g, x, k), gw) < 1e-4


def test_gradient_shape_checks():
    with pytest.raises(ValueError):
        conv2d_grad_input(np.zeros((1, 2, 4, 4)), np.zeros((3, 1, 3, 3)))
    with pytest.raises(ValueError):
        conv2d_grad_kernel(np.zeros((1, 2, 4, 4)), np.zeros((1, 1, 5, 5)), 3)
