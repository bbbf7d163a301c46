"""Reference 2-D convolutions and their gradients.

"Convolution" here means what deep-learning layers compute: a stride-1,
same-padded cross-correlation summed over input channels.  For a kernel of
size ``k`` the padding is ``(k - 1) // 2`` before and ``k // 2`` after, so even
kernels put the extra row/column of padding on the bottom/right.

Tensors are ``(batch, channels, height, width)``; kernels are
``(out_channels, in_channels, k, k)``.
"""

from __future__ import annotations

import numpy as np

from .field import as_tensor

__all__ = [
    "same_padding",
    "conv2d_direct",
    "conv2d_fft",
    "conv2d_grad_input",
    "conv2d_grad_kernel",
]


def same_padding(k: int) -> tuple[int, int]:
    """Return ``(before, after)`` padding that keeps the spatial size."""
    return (k - 1) // 2, k // 2


def _check(x: np.ndarray, kernels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = as_tensor(x, "input")
    kernels = as_tensor(kernels, "kernels")
    if kernels.shape[1] != x.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, kernels expect {kernels.shape[1]}"
        )
    if kernels.shape[2] != kernels.shape[3]:
        raise ValueError(f"kernels must be square, got {kernels.shape[2]}x{kernels.shape[3]}")
    return x, kernels


def _pad_same(x: np.ndarray, k: int) -> np.ndarray:
    lo, hi = same_padding(k)
    return np.pad(x, ((0, 0), (0, 0), (lo, hi), (lo, hi)))


def conv2d_direct(x, kernels) -> np.ndarray:
    """Same-padded cross-correlation by explicit summation over kernel taps."""
    x, kernels = _check(x, kernels)
    _, _, h, w = x.shape
    k = kernels.shape[-1]
    xp = _pad_same(x, k)
    out = np.zeros((x.shape[0], kernels.shape[0], h, w), dtype=np.result_type(x, kernels))
    for u in range(k):
        for v in range(k):
            out += np.einsum("bchw,oc->bohw", xp[:, :, u:u + h, v:v + w], kernels[:, :, u, v])
    return out


def conv2d_fft(x, kernels) -> np.ndarray:
    """Same contract as :func:`conv2d_direct`, via the convolution theorem.

    Both operands are zero-padded to ``H + k - 1`` by ``W + k - 1`` so the
    spectral product gives the linear (not circular) convolution.
    """
    x, kernels = _check(x, kernels)
    _, _, h, w = x.shape
    k = kernels.shape[-1]
    shape = (h + k - 1, w + k - 1)
    # convolving with the flipped kernel is cross-correlation
    flipped = kernels[:, :, ::-1, ::-1]
    xs = np.fft.rfft2(x, s=shape)
    ks = np.fft.rfft2(flipped, s=shape)
    full = np.fft.irfft2(np.einsum("bcpq,ocpq->bopq", xs, ks), s=shape)
    off = k // 2
    return full[:, :, off:off + h, off:off + w].astype(np.result_type(x, kernels), copy=False)


def conv2d_grad_input(grad_out, kernels) -> np.ndarray:
    """Gradient of a same-padded cross-correlation with respect to its input."""
    grad_out = as_tensor(grad_out, "grad_out")
    kernels = as_tensor(kernels, "kernels")
    if grad_out.shape[1] != kernels.shape[0]:
        raise ValueError(
            f"grad_out has {grad_out.shape[1]} channels but kernels produce {kernels.shape[0]}"
        )
    b, _, h, w = grad_out.shape
    k = kernels.shape[-1]
    lo, hi = same_padding(k)
    gxp = np.zeros((b, kernels.shape[1], h + lo + hi, w + lo + hi), dtype=grad_out.dtype)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u:u + h, v:v + w] += np.einsum("bohw,oc->bchw", grad_out, kernels[:, :, u, v])
    return gxp[:, :, lo:lo + h, lo:lo + w].copy()


def conv2d_grad_kernel(grad_out, x, kernel_size: int) -> np.ndarray:
    """Gradient of a same-padded cross-correlation with respect to its kernels."""
    grad_out = as_tensor(grad_out, "grad_out")
    x = as_tensor(x, "input")
    if grad_out.shape[0] != x.shape[0] or grad_out.shape[2:] != x.shape[2:]:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match input shape {x.shape}")
    if kernel_size < 1:
        raise ValueError("kernel_size must be at least 1")
    _, _, h, w = x.shape
    k = kernel_size
    xp = _pad_same(x, k)
    gk = np.empty((grad_out.shape[1], x.shape[1], k, k), dtype=np.result_type(grad_out, x))
    for u in range(k):
        for v in range(k):
            gk[:, :, u, v] = np.einsum("bohw,bchw->oc", grad_out, xp[:, :, u:u + h, v:v + w])
    return gk
