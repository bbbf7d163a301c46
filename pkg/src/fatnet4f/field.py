"""Complex optical fields and the spectral helpers shared by the optics and
convolution code.

Conventions used everywhere in the package:

* ``fft2`` is unscaled, ``ifft2`` carries the ``1/N**2`` factor.
* Spatial arrays follow ``(..., height, width)``; real tensors are 4-D
  ``(batch, channels, height, width)`` float arrays.
* When centering cannot be symmetric, the spare pixel goes to the
  bottom/right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ComplexField",
    "as_tensor",
    "fft2",
    "ifft2",
    "fftshift",
    "ifftshift",
    "pad_center",
    "crop_center",
    "rotate180",
]


@dataclass(frozen=True, eq=False)
class ComplexField:
    """Square grid of complex amplitudes sampled at ``pixel_scale`` metres."""

    data: np.ndarray
    pixel_scale: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValueError(f"field must be a square 2-D grid, got shape {data.shape}")
        if data.shape[0] < 2:
            raise ValueError("field size must be at least 2")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite amplitudes")
        if not (np.isfinite(self.pixel_scale) and self.pixel_scale > 0):
            raise ValueError(f"pixel_scale must be positive and finite, got {self.pixel_scale}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.data) ** 2))

    def with_data(self, data: np.ndarray) -> "ComplexField":
        return ComplexField(data, self.pixel_scale)


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Validate and return ``x`` as a finite 4-D float array."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-D (batch, channels, height, width), got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def fft2(u: ComplexField) -> ComplexField:
    return u.with_data(np.fft.fft2(u.data))


def ifft2(u: ComplexField) -> ComplexField:
    return u.with_data(np.fft.ifft2(u.data))


def fftshift(u: ComplexField) -> ComplexField:
    return u.with_data(np.fft.fftshift(u.data))


def ifftshift(u: ComplexField) -> ComplexField:
    return u.with_data(np.fft.ifftshift(u.data))


def _center_offsets(old: int, new: int) -> int:
    return (new - old) // 2


def pad_center(t: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Zero-pad the last two axes of ``t`` to ``(new_h, new_w)`` around the center."""
    t = np.asarray(t)
    h, w = t.shape[-2:]
    if new_h < h or new_w < w:
        raise ValueError(f"cannot pad {h}x{w} down to {new_h}x{new_w}")
    top, left = _center_offsets(h, new_h), _center_offsets(w, new_w)
    out = np.zeros(t.shape[:-2] + (new_h, new_w), dtype=t.dtype)
    out[..., top:top + h, left:left + w] = t
    return out


def crop_center(t: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Inverse of :func:`pad_center`."""
    t = np.asarray(t)
    h, w = t.shape[-2:]
    if new_h < 1 or new_w < 1:
        raise ValueError("crop dimensions must be at least 1")
    if new_h > h or new_w > w:
        raise ValueError(f"cannot crop {h}x{w} to larger {new_h}x{new_w}")
    top, left = _center_offsets(new_h, h), _center_offsets(new_w, w)
    return t[..., top:top + new_h, left:left + new_w].copy()


def rotate180(t: np.ndarray) -> np.ndarray:
    """Reverse every spatial plane along both axes."""
    return np.flip(np.asarray(t), axis=(-2, -1)).copy()
