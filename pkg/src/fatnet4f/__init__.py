"""Simulated 4f optical convolution and the FatNet architecture transform."""

from .analysis import batch_capacity, compare, optical_latency
from .conv import conv2d_direct, conv2d_fft
from .fatnet import (
    NetworkSpec,
    LayerSpec,
    count_conv_ops,
    fatnet_paper,
    load_spec,
    resnet18_cifar100,
    save_spec,
    transform,
)
from .optics import OpticsConfig, conv4f_single, optconv

__version__ = "0.1.0"

__all__ = [
    "LayerSpec",
    "NetworkSpec",
    "OpticsConfig",
    "batch_capacity",
    "compare",
    "conv2d_direct",
    "conv2d_fft",
    "conv4f_single",
    "count_conv_ops",
    "fatnet_paper",
    "load_spec",
    "optconv",
    "optical_latency",
    "resnet18_cifar100",
    "save_spec",
    "transform",
]
