"""Wave-optics simulation of a 4f correlator.

Light is propagated with the angular spectrum of plane waves using the
Fresnel transfer function.  The simulation grid pitch is chosen so that a
single propagation step covers exactly one focal length::

    pixel_scale = sqrt(focal_length * wavelength / grid_size)

so every hop between lens planes is one FFT/multiply/IFFT.  A pass through
the system is

    input -> f -> lens -> f -> Fourier-plane mask -> f -> lens -> f -> camera

and the camera records intensity.  The image produced this way is rotated by
180 degrees about the optical axis, which :func:`conv4f_single` undoes.

Negative numbers cannot be encoded in light amplitude, so :func:`optconv`
splits signed operands into non-negative parts (pseudo-negativity) and
recombines the camera readouts electronically.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .conv import conv2d_fft
from .field import ComplexField, as_tensor

__all__ = [
    "OpticsConfig",
    "PupilTruncationWarning",
    "fresnel_transfer",
    "free_space_transfer",
    "propagate",
    "lens_transmittance",
    "lens_phase",
    "fourier_plane_kernel",
    "calibrate_gain",
    "conv4f_single",
    "optconv",
    "relative_rms_error",
]

BACKENDS = ("physical", "ideal")


class PupilTruncationWarning(UserWarning):
    """The simulation grid is smaller than the lens aperture."""


@dataclass(frozen=True)
class OpticsConfig:
    wavelength: float = 532e-9
    focal_length: float = 10e-3
    lens_diameter: float = 5e-3
    grid_size: int = 512
    precision: str = "float64"
    fidelity_bound: float = 0.02

    def __post_init__(self):
        for name in ("wavelength", "focal_length", "lens_diameter"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value}")
        if int(self.grid_size) != self.grid_size or self.grid_size < 16:
            raise ValueError(f"grid_size must be an integer >= 16, got {self.grid_size}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be 'float32' or 'float64', got {self.precision!r}")
        if not self.fidelity_bound > 0:
            raise ValueError("fidelity_bound must be positive")
        if self.grid_size * self.pixel_scale < self.lens_diameter:
            warnings.warn(
                f"grid extent {self.grid_size * self.pixel_scale * 1e3:.3f} mm is smaller than the "
                f"{self.lens_diameter * 1e3:.3f} mm lens aperture; the grid edge acts as the pupil",
                PupilTruncationWarning,
                stacklevel=3,
            )

    @property
    def pixel_scale(self) -> float:
        return math.sqrt(self.focal_length * self.wavelength / self.grid_size)

    @property
    def step_distance(self) -> float:
        """Distance covered by one angular-spectrum step on this grid."""
        return self.grid_size * self.pixel_scale ** 2 / self.wavelength

    @property
    def complex_dtype(self):
        return np.complex64 if self.precision == "float32" else np.complex128

    @property
    def real_dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def fresnel_transfer(fx, fy, wavelength: float, z: float):
    """Fresnel free-space transfer function evaluated at spatial frequencies."""
    k = 2 * np.pi / wavelength
    return np.exp(1j * k * z - 1j * np.pi * wavelength * z * (np.square(fx) + np.square(fy)))


def _frequency_grid(config: OpticsConfig) -> tuple[np.ndarray, np.ndarray]:
    fx = np.fft.fftfreq(config.grid_size, d=config.pixel_scale)
    return np.meshgrid(fx, fx, indexing="ij")


def _spatial_grid(config: OpticsConfig) -> tuple[np.ndarray, np.ndarray]:
    n = config.grid_size
    x = (np.arange(n) - n // 2) * config.pixel_scale
    return np.meshgrid(x, x, indexing="ij")


def free_space_transfer(config: OpticsConfig, z: float) -> ComplexField:
    """Transfer function for a hop of ``z`` metres, in FFT (unshifted) order."""
    if not z > 0:
        raise ValueError(f"propagation distance must be positive, got {z}")
    fx, fy = _frequency_grid(config)
    return ComplexField(fresnel_transfer(fx, fy, config.wavelength, z), config.pixel_scale)


def propagate(u: ComplexField, config: OpticsConfig, z: float) -> ComplexField:
    """Advance ``u`` by ``z`` metres; negative ``z`` back-propagates."""
    if u.size != config.grid_size or not math.isclose(u.pixel_scale, config.pixel_scale, rel_tol=1e-12):
        raise ValueError(
            f"field grid ({u.size} px at {u.pixel_scale:g} m) does not match config "
            f"({config.grid_size} px at {config.pixel_scale:g} m)"
        )
    if z == 0:
        return u
    h = free_space_transfer(config, abs(z)).data
    if z < 0:
        h = np.conj(h)
    return u.with_data(np.fft.ifft2(np.fft.fft2(u.data) * h))


def lens_transmittance(x, y, config: OpticsConfig):
    """Thin-lens transmittance with a hard circular pupil, at points ``(x, y)``."""
    k = 2 * np.pi / config.wavelength
    r2 = np.square(x) + np.square(y)
    pupil = r2 <= (config.lens_diameter / 2) ** 2
    return np.where(pupil, np.exp(-1j * k / (2 * config.focal_length) * r2), 0)


def lens_phase(config: OpticsConfig) -> ComplexField:
    x, y = _spatial_grid(config)
    return ComplexField(lens_transmittance(x, y, config), config.pixel_scale)


@functools.lru_cache(maxsize=16)
def _system_arrays(config: OpticsConfig) -> tuple[np.ndarray, np.ndarray]:
    h = free_space_transfer(config, config.focal_length).data.astype(config.complex_dtype)
    lens = lens_phase(config).data.astype(config.complex_dtype)
    h.setflags(write=False)
    lens.setflags(write=False)
    return h, lens


def _two_f(u: np.ndarray, config: OpticsConfig) -> np.ndarray:
    """Propagate ``f``, pass a lens, propagate ``f`` (broadcasts over leading axes)."""
    h, lens = _system_arrays(config)
    u = np.fft.ifft2(np.fft.fft2(u) * h)
    u = u * lens
    return np.fft.ifft2(np.fft.fft2(u) * h)


def _derotate(plane: np.ndarray) -> np.ndarray:
    # 180 degree rotation about the optical axis, which sits on pixel n // 2
    n = plane.shape[-1]
    flipped = np.flip(plane, axis=(-2, -1))
    shift = 1 if n % 2 == 0 else 0
    return np.roll(flipped, (shift, shift), axis=(-2, -1))


def _check_kernel_fits(k: int, config: OpticsConfig):
    if k > config.grid_size:
        raise ValueError(f"{k}x{k} kernel does not fit a {config.grid_size}-pixel grid")


def _embed_kernel(kernel: np.ndarray, n: int) -> np.ndarray:
    # pre-flipped kernel, with its origin tap (index (k-1)//2) on the optical axis
    k = kernel.shape[-1]
    top = n // 2 - k // 2
    out = np.zeros(kernel.shape[:-2] + (n, n), dtype=np.float64)
    out[..., top:top + k, top:top + k] = kernel[..., ::-1, ::-1]
    return out


def _masks(kernels: np.ndarray, config: OpticsConfig) -> np.ndarray:
    emb = _embed_kernel(kernels, config.grid_size)
    spec = np.fft.fft2(np.fft.ifftshift(emb, axes=(-2, -1)))
    return np.fft.fftshift(spec, axes=(-2, -1)).astype(config.complex_dtype)


def fourier_plane_kernel(kernel, config: OpticsConfig) -> ComplexField:
    """Mask displayed on the Fourier-plane modulator for a real ``kernel``.

    The mask makes the derotated camera image equal to the cross-correlation
    of the input with ``kernel``, matching :mod:`fatnet4f.conv`.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be a square 2-D array, got shape {kernel.shape}")
    _check_kernel_fits(kernel.shape[0], config)
    return ComplexField(_masks(kernel, config).astype(np.complex128), config.pixel_scale)


def _embed_images(images: np.ndarray, n: int) -> np.ndarray:
    h, w = images.shape[-2:]
    top, left = (n - h) // 2, (n - w) // 2
    out = np.zeros(images.shape[:-2] + (n, n), dtype=np.float64)
    out[..., top:top + h, left:left + w] = images
    return out


def _readout(u: np.ndarray, shape: tuple[int, int], config: OpticsConfig) -> np.ndarray:
    """Camera intensity -> amplitude -> derotate -> crop to ``shape``."""
    amplitude = np.sqrt(np.abs(u) ** 2)
    amplitude = _derotate(amplitude)
    n = config.grid_size
    h, w = shape
    top, left = (n - h) // 2, (n - w) // 2
    return amplitude[..., top:top + h, left:left + w]


def _raw_4f(images: np.ndarray, masks: np.ndarray, config: OpticsConfig) -> np.ndarray:
    u = _embed_images(images, config.grid_size).astype(config.complex_dtype)
    u = _two_f(u, config)
    u = _two_f(u * masks, config)
    return _readout(u, images.shape[-2:], config)


@functools.lru_cache(maxsize=16)
def calibrate_gain(config: OpticsConfig) -> float:
    """Peak amplitude of an impulse imaged through a delta-kernel mask."""
    impulse = np.ones((1, 1))
    raw = _raw_4f(impulse, _masks(np.ones((1, 1)), config), config)
    g = float(np.max(raw))
    if not (math.isfinite(g) and g > 0):
        raise RuntimeError(f"4f pipeline produced a degenerate impulse response (peak {g})")
    return g


def _check_fits(h: int, w: int, k: int, config: OpticsConfig):
    _check_kernel_fits(k, config)
    if max(h, w) + k - 1 > config.grid_size:
        raise ValueError(
            f"{h}x{w} image with {k}x{k} kernel needs {max(h, w) + k - 1} pixels of grid "
            f"for linear convolution, grid has {config.grid_size}"
        )


def conv4f_single(image, kernel, config: OpticsConfig) -> np.ndarray:
    """Same-padded cross-correlation of two non-negative planes through the 4f system."""
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if image.ndim != 2 or kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError("conv4f_single expects a 2-D image and a square 2-D kernel")
    if not (np.all(np.isfinite(image)) and np.all(np.isfinite(kernel))):
        raise ValueError("image and kernel must be finite")
    if np.any(image < 0) or np.any(kernel < 0):
        raise ValueError("light amplitudes cannot be negative; use optconv for signed data")
    _check_fits(*image.shape, kernel.shape[0], config)
    out = _raw_4f(image, _masks(kernel, config), config) / calibrate_gain(config)
    return out.astype(np.float64)


def _split(t: np.ndarray) -> list[tuple[float, np.ndarray]]:
    """Signed parts of ``t`` that are not identically zero."""
    parts = [(1.0, np.maximum(t, 0)), (-1.0, np.maximum(-t, 0))]
    return [(s, p) for s, p in parts if np.any(p)]


def _optconv_ideal(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], kernels.shape[0]) + x.shape[2:])
    for sx, xpart in _split(x):
        for sk, kpart in _split(kernels):
            out += (sx * sk) * conv2d_fft(xpart, kpart)
    return out


def _optconv_physical(x: np.ndarray, kernels: np.ndarray, config: OpticsConfig) -> np.ndarray:
    b, cin, h, w = x.shape
    cout = kernels.shape[0]
    g = calibrate_gain(config)
    out = np.zeros((b, cout, h, w))
    x_parts = _split(x)
    k_parts = [(s, _masks(p, config)) for s, p in _split(kernels)]
    for sx, xpart in x_parts:
        # first half of the system depends only on the input plane
        fourier = _two_f(_embed_images(xpart, config.grid_size).astype(config.complex_dtype), config)
        for sk, masks in k_parts:
            for i in range(b):
                for o in range(cout):
                    u = _two_f(fourier[i] * masks[o], config)
                    planes = _readout(u, (h, w), config)
                    out[i, o] += (sx * sk) * (planes.sum(axis=0) / g)
    return out


def optconv(x, kernels, config: OpticsConfig | None, backend: str = "physical") -> np.ndarray:
    """Multichannel same-padded convolution on the 4f system.

    Signed kernels and inputs are each split into positive and negative
    parts; every non-zero (input part, kernel part) combination is one
    optical pass per channel pair, and the readouts are combined with the
    product sign.  ``backend="ideal"`` replaces the wave propagation with an
    exact FFT product and ignores ``config``.
    """
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    x = as_tensor(x, "input").astype(np.float64, copy=False)
    kernels = as_tensor(kernels, "kernels").astype(np.float64, copy=False)
    if kernels.shape[1] != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, kernels expect {kernels.shape[1]}"
        )
    if kernels.shape[2] != kernels.shape[3]:
        raise ValueError("kernels must be square")
    k = kernels.shape[-1]
    if k > min(x.shape[2:]):
        raise ValueError(f"{k}x{k} kernel exceeds the {x.shape[2]}x{x.shape[3]} feature resolution")
    if backend == "ideal":
        return _optconv_ideal(x, kernels)
    if config is None:
        raise ValueError("the physical backend needs an OpticsConfig")
    _check_fits(x.shape[2], x.shape[3], k, config)
    return _optconv_physical(x, kernels, config)


def relative_rms_error(estimate, reference) -> float:
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = math.sqrt(float(np.mean(reference ** 2)))
    num = math.sqrt(float(np.mean((estimate - reference) ** 2)))
    if denom == 0:
        return 0.0 if num == 0 else math.inf
    return num / denom
