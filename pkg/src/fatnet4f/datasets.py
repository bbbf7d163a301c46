"""Datasets for the training harness.

``synthetic_classes`` is the seeded toy problem used by the demo and the
acceptance suite.  ``read_cifar100`` reads the binary CIFAR-100 release for
optional long runs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = [
    "synthetic_classes",
    "train_val_split",
    "read_cifar100",
    "normalize",
    "augment",
    "CIFAR100_RECORD_BYTES",
]

CIFAR100_RECORD_BYTES = 2 + 3 * 32 * 32


def synthetic_classes(
    num_classes: int = 16,
    per_class: int = 20,
    size: int = 8,
    noise: float = 1.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Sign-symmetric prototype classes.

    Class ``c`` has a random +-1 prototype ``P_c``; a sample is
    ``s * P_c + noise`` with a random sign ``s``.  Every class has zero mean,
    so no linear classifier beats chance, but ``|<x, P_c>|`` separates them.

    Returns ``x`` with shape ``(num_classes * per_class, 1, size, size)`` and
    integer labels.
    """
    rng = np.random.default_rng(seed)
    protos = rng.choice([-1.0, 1.0], size=(num_classes, size, size))
    labels = np.repeat(np.arange(num_classes), per_class)
    signs = rng.choice([-1.0, 1.0], size=labels.shape)
    x = signs[:, None, None] * protos[labels] + noise * rng.standard_normal((labels.size, size, size))
    order = rng.permutation(labels.size)
    return x[order, None, :, :], labels[order]


def train_val_split(x: np.ndarray, y: np.ndarray, val_fraction: float = 0.2):
    """Deterministic head/tail split; shuffle beforehand if needed."""
    n_val = int(round(len(y) * val_fraction))
    n_train = len(y) - n_val
    return (x[:n_train], y[:n_train]), (x[n_train:], y[n_train:])


def read_cifar100(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a CIFAR-100 binary file (``train.bin``/``test.bin``).

    Each record is one coarse-label byte, one fine-label byte and 3x32x32
    channel-major pixel bytes.  Returns ``(images, fine, coarse)`` with
    float images in [0, 1] shaped ``(n, 3, 32, 32)``.
    """
    raw = np.fromfile(Path(path), dtype=np.uint8)
    if raw.size % CIFAR100_RECORD_BYTES:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of {CIFAR100_RECORD_BYTES}")
    records = raw.reshape(-1, CIFAR100_RECORD_BYTES)
    coarse = records[:, 0].astype(np.int64)
    fine = records[:, 1].astype(np.int64)
    images = records[:, 2:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, fine, coarse


def normalize(x: np.ndarray, mean=None, std=None) -> np.ndarray:
    """Per-channel standardisation; statistics default to those of ``x``."""
    if mean is None:
        mean = x.mean(axis=(0, 2, 3))
    if std is None:
        std = x.std(axis=(0, 2, 3))
    return (x - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus a random crop from a ``pad``-padded copy."""
    b, _, h, w = x.shape
    out = np.empty_like(x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    flips = rng.random(b) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
    for i in range(b):
        crop = padded[i, :, offs[i, 0]:offs[i, 0] + h, offs[i, 1]:offs[i, 1] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
