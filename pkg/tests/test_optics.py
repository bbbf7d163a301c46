import cmath
import math

import numpy as np
import pytest
from scipy.signal import correlate2d

from fatnet4f import optics
from fatnet4f.conv import conv2d_direct
from fatnet4f.field import ComplexField
from fatnet4f.optics import (
    OpticsConfig,
    PupilTruncationWarning,
    calibrate_gain,
    conv4f_single,
    fourier_plane_kernel,
    free_space_transfer,
    fresnel_transfer,
    lens_phase,
    lens_transmittance,
    optconv,
    propagate,
    relative_rms_error,
)

LAM = 532e-9
F = 10e-3


@pytest.fixture(scope="module")
def cfg128():
    return OpticsConfig(grid_size=128)


@pytest.fixture(scope="module")
def cfg512():
    return OpticsConfig(grid_size=512)


def test_pixel_scale_makes_one_step_one_focal_length(cfg512):
    dx = cfg512.pixel_scale
    assert math.isclose(dx, math.sqrt(F * LAM / 512), rel_tol=1e-14)
    assert math.isclose(cfg512.step_distance, F, rel_tol=1e-12)


def test_default_config_warns_about_pupil():
    with pytest.warns(PupilTruncationWarning):
        OpticsConfig()
    with pytest.warns(PupilTruncationWarning):
        OpticsConfig(grid_size=4096)


@pytest.mark.parametrize(
    "kwargs",
    [{"wavelength": 0}, {"focal_length": -1}, {"grid_size": 8}, {"grid_size": 64.5}, {"precision": "half"}],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        OpticsConfig(**kwargs)


def test_transfer_is_unit_modulus_and_dc_is_pure_phase(cfg128):
    h = free_space_transfer(cfg128, F).data
    assert np.max(np.abs(np.abs(h) - 1)) < 1e-12
    k = 2 * math.pi / LAM
    assert abs(h[0, 0] - cmath.exp(1j * k * F)) < 1e-12


def test_transfer_scalar_oracle():
    z, fx = 0.01, 1e4
    expected = cmath.exp(1j * 2 * math.pi / LAM * z - 1j * math.pi * LAM * z * fx ** 2)
    assert abs(complex(fresnel_transfer(fx, 0.0, LAM, z)) - expected) < 1e-12


def test_transfer_rejects_non_positive_distance(cfg128):
    for z in (0.0, -1e-3):
        with pytest.raises(ValueError):
            free_space_transfer(cfg128, z)


def random_field(cfg, seed):
    rng = np.random.default_rng(seed)
    n = cfg.grid_size
    return ComplexField(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)), cfg.pixel_scale)


def test_forward_then_back_is_identity(cfg128):
    u = random_field(cfg128, 0)
    back = propagate(propagate(u, cfg128, F), cfg128, -F).data
    assert np.max(np.abs(back - u.data)) / np.max(np.abs(u.data)) < 1e-12


def test_zero_distance_is_identity(cfg128):
    u = random_field(cfg128, 1)
    assert propagate(u, cfg128, 0) is u


def test_plane_wave_picks_up_only_phase(cfg128):
    n = cfg128.grid_size
    u = ComplexField(np.ones((n, n)), cfg128.pixel_scale)
    out = propagate(u, cfg128, F).data
    expected = cmath.exp(1j * 2 * math.pi / LAM * F)
    assert np.max(np.abs(out - expected)) < 1e-12


def test_propagation_conserves_energy(cfg128):
    u = random_field(cfg128, 2)
    assert math.isclose(propagate(u, cfg128, F).energy, u.energy, rel_tol=1e-12)


def test_propagate_rejects_mismatched_grid(cfg128):
    u = ComplexField(np.ones((64, 64)), cfg128.pixel_scale)
    with pytest.raises(ValueError):
        propagate(u, cfg128, F)


def beam_width(intensity, x):
    p = intensity / intensity.sum()
    return 2 * math.sqrt(float(np.sum(p * x ** 2)))


def test_gaussian_beam_spreads_like_the_analytic_width(cfg512):
    w0 = 50e-6
    n = cfg512.grid_size
    x1 = (np.arange(n) - n // 2) * cfg512.pixel_scale
    xx, yy = np.meshgrid(x1, x1, indexing="ij")
    u = ComplexField(np.exp(-(xx ** 2 + yy ** 2) / w0 ** 2), cfg512.pixel_scale)
    zr = math.pi * w0 ** 2 / LAM
    for z in (0.5 * F, F):
        out = np.abs(propagate(u, cfg512, z).data) ** 2
        expected = w0 * math.sqrt(1 + (z / zr) ** 2)
        assert abs(beam_width(out, xx) / expected - 1) < 0.02


def test_lens_scalar_values():
    cfg = OpticsConfig(grid_size=128)
    assert lens_transmittance(0.0, 0.0, cfg) == 1
    assert lens_transmittance(3e-3, 0.0, cfg) == 0
    k = 2 * math.pi / LAM
    expected = cmath.exp(-1j * k / (2 * F) * 1e-6)
    assert abs(complex(lens_transmittance(1e-3, 0.0, cfg)) - expected) < 1e-12


def test_lens_grid_is_centred_and_circular(cfg128):
    t = lens_phase(cfg128).data
    n = cfg128.grid_size
    assert t[n // 2, n // 2] == 1
    np.testing.assert_allclose(t[n // 2 + 5, n // 2], t[n // 2, n // 2 + 5], atol=1e-15)
    small = OpticsConfig(grid_size=128, lens_diameter=100e-6)
    t = lens_phase(small).data
    r = np.hypot(*np.meshgrid(np.arange(n) - n // 2, np.arange(n) - n // 2, indexing="ij")) * small.pixel_scale
    assert np.all(t[r > 50e-6] == 0)
    assert np.all(np.abs(t[r <= 50e-6]) > 0.999)


def test_delta_kernel_mask_is_flat(cfg128):
    m = fourier_plane_kernel(np.ones((1, 1)), cfg128).data
    assert np.max(np.abs(np.abs(m) - 1)) < 1e-12
    assert np.max(np.abs(m - 1)) < 1e-12


def test_box_mask_matches_closed_form(cfg128):
    n = cfg128.grid_size
    m = fourier_plane_kernel(np.ones((3, 3)), cfg128).data
    q = np.arange(n) - n // 2
    axis = 1 + 2 * np.cos(2 * np.pi * q / n)
    np.testing.assert_allclose(m, np.outer(axis, axis), atol=1e-10)


def test_mask_is_linear(cfg128):
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 5, 5))
    lhs = fourier_plane_kernel(2 * a - 3 * b, cfg128).data
    rhs = 2 * fourier_plane_kernel(a, cfg128).data - 3 * fourier_plane_kernel(b, cfg128).data
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_mask_rejects_oversized_or_non_square(cfg128):
    with pytest.raises(ValueError):
        fourier_plane_kernel(np.ones((129, 129)), cfg128)
    with pytest.raises(ValueError):
        fourier_plane_kernel(np.ones((3, 2)), cfg128)


def test_gain_is_positive_and_deterministic(cfg128):
    g = calibrate_gain(cfg128)
    assert g > 0
    calibrate_gain.cache_clear()
    assert calibrate_gain(cfg128) == g


def test_impulse_through_delta_gives_unit_impulse(cfg128):
    img = np.zeros((9, 9))
    img[4, 4] = 1
    out = conv4f_single(img, np.ones((1, 1)), cfg128)
    assert abs(out[4, 4] - 1) < 1e-6
    out[4, 4] = 0
    assert np.max(np.abs(out)) < 1e-6


def test_zero_image_gives_zero(cfg128):
    assert np.max(np.abs(conv4f_single(np.zeros((8, 8)), np.ones((3, 3)), cfg128))) < 1e-12


def test_flat_mask_reproduces_input(cfg128):
    img = np.random.default_rng(3).uniform(0, 1, (20, 20))
    assert relative_rms_error(conv4f_single(img, np.ones((1, 1)), cfg128), img) < 1e-6


@pytest.mark.parametrize("k", [2, 3, 5])
def test_single_channel_matches_reference(cfg128, k):
    rng = np.random.default_rng(k)
    img = rng.uniform(0, 1, (32, 32))
    ker = rng.uniform(0, 1, (k, k))
    ref = conv2d_direct(img[None, None], ker[None, None])[0, 0]
    assert relative_rms_error(conv4f_single(img, ker, cfg128), ref) < 0.02
    if k % 2:
        assert np.max(np.abs(ref - correlate2d(img, ker, mode="same"))) < 1e-12


def test_single_channel_rejects_negative_and_oversize(cfg128):
    with pytest.raises(ValueError):
        conv4f_single(-np.ones((4, 4)), np.ones((3, 3)), cfg128)
    with pytest.raises(ValueError):
        conv4f_single(np.ones((4, 4)), -np.ones((3, 3)), cfg128)
    with pytest.raises(ValueError):
        conv4f_single(np.ones((127, 127)), np.ones((3, 3)), cfg128)


def test_signed_multichannel_physical_matches_direct(cfg128):
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, (2, 3, 16, 16))
    k = rng.uniform(-1, 1, (4, 3, 3, 3))
    out = optconv(x, k, cfg128, "physical")
    assert out.shape == (2, 4, 16, 16)
    assert relative_rms_error(out, conv2d_direct(x, k)) < 0.02


def test_ideal_backend_matches_direct_and_ignores_config():
    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, (2, 2, 9, 9))
    k = rng.uniform(-1, 1, (3, 2, 4, 4))
    out = optconv(x, k, None, "ideal")
    assert np.max(np.abs(out - conv2d_direct(x, k))) < 1e-9


def test_batch_elements_are_independent(cfg128):
    rng = np.random.default_rng(9)
    x = rng.uniform(-1, 1, (3, 2, 10, 10))
    k = rng.uniform(-1, 1, (2, 2, 3, 3))
    whole = optconv(x, k, cfg128, "physical")
    for i in range(3):
        single = optconv(x[i:i + 1], k, cfg128, "physical")
        assert np.max(np.abs(whole[i] - single[0])) < 1e-12


def test_non_negative_kernel_uses_only_positive_part(cfg128, monkeypatch):
    calls = []
    real = optics._two_f

    def counting(u, config):
        calls.append(u.shape)
        return real(u, config)

    monkeypatch.setattr(optics, "_two_f", counting)
    x = np.random.default_rng(0).uniform(-1, 1, (1, 1, 8, 8))
    k = np.random.default_rng(1).uniform(0, 1, (1, 1, 3, 3))
    optconv(x, k, cfg128, "physical")
    # two input parts, each pass = one shared first half + one second half
    assert len(calls) == 4
    calls.clear()
    optconv(np.abs(x), k, cfg128, "physical")
    assert len(calls) == 2


def test_optconv_argument_checks(cfg128):
    x = np.zeros((1, 2, 8, 8))
    with pytest.raises(ValueError):
        optconv(x, np.zeros((1, 3, 3, 3)), cfg128)
    with pytest.raises(ValueError):
        optconv(x, np.zeros((1, 2, 9, 9)), cfg128)
    with pytest.raises(ValueError):
        optconv(x, np.zeros((1, 2, 3, 3)), cfg128, "analog")
    with pytest.raises(ValueError):
        optconv(x, np.zeros((1, 2, 3, 3)), None, "physical")
    with pytest.raises(ValueError):
        optconv(np.zeros((1, 2, 121, 121)), np.zeros((1, 2, 9, 9)), cfg128)


def test_single_precision_mode():
    cfg = OpticsConfig(grid_size=128, precision="float32")
    rng = np.random.default_rng(11)
    x = rng.uniform(-1, 1, (1, 1, 24, 24))
    k = rng.uniform(-1, 1, (1, 1, 3, 3))
    err = relative_rms_error(optconv(x, k, cfg), conv2d_direct(x, k))
    assert err < 1e-4


def test_relative_rms_error_edge_cases():
    assert relative_rms_error(np.zeros(3), np.zeros(3)) == 0
    assert relative_rms_error(np.ones(3), np.zeros(3)) == math.inf
    assert math.isclose(relative_rms_error(np.full(4, 1.1), np.ones(4)), 0.1, rel_tol=1e-12)
