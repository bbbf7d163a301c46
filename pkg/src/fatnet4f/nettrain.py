"""Numpy training harness for fully convolutional classifiers.

Convolutions run through a pluggable backend:

``direct``    spatial reference convolution
``ideal``     the 4f pipeline with an exact Fourier-plane product
``physical``  full wave-optics simulation of the 4f pipeline

Gradients always use the analytic convolution rules, so the physical
backend trains on optical forward values with ideal gradients.
"""

from __future__ import annotations

import functools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conv import conv2d_direct, conv2d_grad_input, conv2d_grad_kernel
from .datasets import synthetic_classes, train_val_split
from .fatnet import LayerSpec, NetworkSpec, loads_spec, spec_to_dict
from .optics import OpticsConfig, PupilTruncationWarning, optconv

__all__ = [
    "BACKENDS",
    "TrainConfig",
    "TrainingDiverged",
    "Model",
    "Trace",
    "forward",
    "loss_and_grads",
    "backward_and_step",
    "softmax",
    "cross_entropy",
    "demo_network",
    "demo_config",
    "accuracy",
    "predict",
    "train",
    "train_demo",
    "save_checkpoint",
    "load_checkpoint",
]

BACKENDS = ("direct", "ideal", "physical")
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_step: int = 50
    lr_gamma: float = 0.2
    dropout_rate: float = 0.2
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    backend: str = "direct"
    optics: OpticsConfig | None = None

    def __post_init__(self):
        for name in ("learning_rate", "momentum", "lr_gamma"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_step < 1:
            raise ValueError("batch_size and lr_step must be >= 1, epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_gamma ** (epoch // self.lr_step)


class Model:
    """Weights for a :class:`NetworkSpec` plus SGD momentum buffers.

    Kernels are initialised uniformly in ``+-sqrt(1 / (c_in * k * k))``.
    Projection shortcuts get a 1x1 kernel keyed by the residual_end index.
    """

    def __init__(self, net: NetworkSpec, seed: int = 0, zero: bool = False):
        self.net = net
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for i, layer in enumerate(net.layers):
            if layer.kind in ("conv", "classifier_head"):
                shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                bound = math.sqrt(1.0 / (layer.in_channels * layer.kernel ** 2))
            elif layer.kind == "residual_end" and layer.shortcut:
                c_in = _residual_input_channels(net, i)
                shape = (layer.out_channels, c_in, 1, 1)
                bound = math.sqrt(1.0 / c_in)
            else:
                continue
            self.params[str(i)] = np.zeros(shape) if zero else rng.uniform(-bound, bound, size=shape)
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}


def _residual_input_channels(net: NetworkSpec, end: int) -> int:
    depth = 0
    for j in range(end - 1, -1, -1):
        kind = net.layers[j].kind
        if kind == "residual_end":
            depth += 1
        elif kind == "residual_begin":
            if depth == 0:
                return net.layers[j].in_channels
            depth -= 1
    raise ValueError(f"residual_end {end} has no matching begin")


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    p = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p


def _conv(x: np.ndarray, w: np.ndarray, config: TrainConfig) -> np.ndarray:
    if config.backend == "direct":
        return conv2d_direct(x, w)
    if config.backend == "ideal":
        return optconv(x, w, config.optics, "ideal")
    optics = config.optics or _auto_optics(max(16, _next_pow2(x.shape[-1] + w.shape[-1] - 1)))
    return optconv(x, w, optics, "physical")


@functools.lru_cache(maxsize=8)
def _auto_optics(grid_size: int) -> OpticsConfig:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PupilTruncationWarning)
        return OpticsConfig(grid_size=grid_size)


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


@dataclass
class Trace:
    """Activations cached by :func:`forward` for the backward pass."""

    caches: list = field(default_factory=list)
    logits: np.ndarray | None = None
    train: bool = False


def forward(model: Model, x, config: TrainConfig, train: bool = False,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, Trace]:
    net = model.net
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != tuple(net.input_shape):
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    trace = Trace(train=train)
    saved: list[np.ndarray] = []
    for i, layer in enumerate(net.layers):
        key = str(i)
        kind = layer.kind
        if x.shape[1] != layer.in_channels or x.shape[2] != layer.feature_in:
            raise ValueError(f"layer {i} ({kind}) received shape {x.shape[1:]}")
        if kind == "conv":
            trace.caches.append((i, x))
            x = _conv(x, model.params[key], config)
        elif kind == "relu":
            mask = x > 0
            trace.caches.append((i, mask))
            x = x * mask
        elif kind == "maxpool2x2":
            b, c, h, w = x.shape
            blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
            arg = blocks.argmax(axis=-1)
            trace.caches.append((i, arg))
            x = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        elif kind == "adaptive_avgpool":
            p = _pool_matrix(layer.feature_in, layer.feature_out)
            trace.caches.append((i, p))
            x = np.einsum("ih,bchw,jw->bcij", p, x, p)
        elif kind == "residual_begin":
            saved.append(x)
            trace.caches.append((i, None))
        elif kind == "residual_end":
            skip = saved.pop()
            if skip.shape[2:] != x.shape[2:]:
                raise ValueError(f"residual branches differ: {skip.shape} vs {x.shape}")
            trace.caches.append((i, skip))
            if layer.shortcut:
                x = x + np.einsum("oc,bchw->bohw", model.params[key][:, :, 0, 0], skip)
            else:
                if skip.shape != x.shape:
                    raise ValueError(f"identity shortcut needs equal shapes: {skip.shape} vs {x.shape}")
                x = x + skip
        elif kind == "classifier_head":
            mask = None
            if train and config.dropout_rate > 0:
                rng = rng if rng is not None else np.random.default_rng(config.seed)
                keep = 1.0 - config.dropout_rate
                mask = (rng.random(x.shape) < keep) / keep
                x = x * mask
            trace.caches.append((i, (x, mask)))
            w = model.params[key]
            if layer.dense:
                x = np.einsum("bc,oc->bo", x[:, :, 0, 0], w[:, :, 0, 0])
            else:
                x = _conv(x, w, config).reshape(x.shape[0], -1)[:, :net.num_classes]
        else:  # pragma: no cover - LayerSpec validates kinds
            raise ValueError(kind)
    if x.ndim != 2:
        raise ValueError("network does not end in a classifier head")
    trace.logits = x
    return x, trace


def loss_and_grads(model: Model, trace: Trace, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy of ``trace.logits`` and its parameter gradients."""
    net = model.net
    labels = np.asarray(labels)
    logits = trace.logits
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    b = logits.shape[0]
    loss = cross_entropy(logits, labels)
    g = softmax(logits)
    g[np.arange(b), labels] -= 1.0
    g /= b
    grads: dict[str, np.ndarray] = {}
    skip_grads: list[np.ndarray] = []
    for i, cache in reversed(trace.caches):
        layer = net.layers[i]
        key = str(i)
        kind = layer.kind
        if kind == "classifier_head":
            x, mask = cache
            w = model.params[key]
            if layer.dense:
                grads[key] = np.einsum("bo,bc->oc", g, x[:, :, 0, 0])[:, :, None, None]
                g = np.einsum("bo,oc->bc", g, w[:, :, 0, 0])[:, :, None, None]
            else:
                f = layer.feature_out
                full = np.zeros((b, f * f))
                full[:, :net.num_classes] = g
                g = full.reshape(b, 1, f, f)
                grads[key] = conv2d_grad_kernel(g, x, layer.kernel)
                g = conv2d_grad_input(g, w)
            if mask is not None:
                g = g * mask
        elif kind == "conv":
            grads[key] = conv2d_grad_kernel(g, cache, layer.kernel)
            g = conv2d_grad_input(g, model.params[key])
        elif kind == "relu":
            g = g * cache
        elif kind == "maxpool2x2":
            bb, c, h2, w2 = g.shape
            blocks = np.zeros((bb, c, h2, w2, 4))
            np.put_along_axis(blocks, cache[..., None], g[..., None], axis=-1)
            g = blocks.reshape(bb, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bb, c, 2 * h2, 2 * w2)
        elif kind == "adaptive_avgpool":
            g = np.einsum("ih,bcij,jw->bchw", cache, g, cache)
        elif kind == "residual_end":
            if layer.shortcut:
                w = model.params[key][:, :, 0, 0]
                grads[key] = np.einsum("bohw,bchw->oc", g, cache)[:, :, None, None]
                skip_grads.append(np.einsum("bohw,oc->bchw", g, w))
            else:
                skip_grads.append(g)
        elif kind == "residual_begin":
            g = g + skip_grads.pop()
    return loss, grads


def backward_and_step(model: Model, trace: Trace, labels, config: TrainConfig, epoch: int = 0) -> float:
    """Backpropagate ``trace`` and apply one SGD-with-momentum update."""
    loss, grads = loss_and_grads(model, trace, labels)
    lr = config.lr_at(epoch)
    for key, grad in grads.items():
        v = model.velocity[key]
        v *= config.momentum
        v += grad
        model.params[key] -= lr * v
    return loss


def predict(model: Model, x, config: TrainConfig, batch_size: int = 256) -> np.ndarray:
    out = [forward(model, x[i:i + batch_size], config)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def accuracy(model: Model, x, y, config: TrainConfig) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, x, config).argmax(axis=1) == y))


def train(model: Model, data, config: TrainConfig, val=None, log=None) -> list[dict]:
    """Run ``config.epochs`` epochs of minibatch SGD and return per-epoch metrics."""
    x, y = data
    shuffle_rng = np.random.default_rng(config.seed + 1)
    dropout_rng = np.random.default_rng(config.seed + 2)
    history = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(y))
        losses = []
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            _, trace = forward(model, x[idx], config, train=True, rng=dropout_rng)
            loss = backward_and_step(model, trace, y[idx], config, epoch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            losses.append(loss * len(idx))
        logits = predict(model, x, config)
        row = {
            "epoch": epoch + 1,
            "lr": config.lr_at(epoch),
            "batch_loss": float(np.sum(losses) / len(y)),
            "loss": cross_entropy(logits, y),
            "train_accuracy": float(np.mean(logits.argmax(axis=1) == y)),
        }
        if val is not None:
            row["val_accuracy"] = accuracy(model, val[0], val[1], config)
        history.append(row)
        if log is not None:
            log(row)
    return history


DEMO_CLASSES = 16
DEMO_SIZE = 8


def demo_network() -> NetworkSpec:
    """Three weighted layers, 4x4 class map for 16 classes."""
    f = 4
    layers = (
        LayerSpec("conv", 1, 16, DEMO_SIZE, DEMO_SIZE, kernel=3),
        LayerSpec("relu", 16, 16, DEMO_SIZE, DEMO_SIZE),
        LayerSpec("adaptive_avgpool", 16, 16, DEMO_SIZE, f),
        LayerSpec("conv", 16, 16, f, f, kernel=4),
        LayerSpec("relu", 16, 16, f, f),
        LayerSpec("classifier_head", 16, 1, f, f, kernel=4),
    )
    return NetworkSpec("fatnet_demo", (1, DEMO_SIZE, DEMO_SIZE), DEMO_CLASSES, layers,
                       provenance="toy FatNet-form classifier for the synthetic demo")


DEMO_DEFAULTS = dict(batch_size=32, epochs=200)


def demo_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DEMO_DEFAULTS, **overrides})


def train_demo(config: TrainConfig | None = None, log=None) -> list[dict]:
    """Train :func:`demo_network` on the seeded synthetic dataset (80/20 split)."""
    config = config or demo_config()
    x, y = synthetic_classes(num_classes=DEMO_CLASSES, size=DEMO_SIZE, seed=config.seed)
    data, val = train_val_split(x, y)
    model = Model(demo_network(), seed=config.seed)
    return train(model, data, config, val=val, log=log)


def save_checkpoint(model: Model, path) -> None:
    """Write weights and momentum to an ``.npz`` archive.

    Keys: ``format_version`` (int), ``network`` (JSON spec text),
    ``param/<layer index>`` and ``velocity/<layer index>`` arrays.
    """
    arrays = {"format_version": np.array(CHECKPOINT_VERSION),
              "network": np.array(json.dumps(spec_to_dict(model.net)))}
    for k, v in model.params.items():
        arrays[f"param/{k}"] = v
        arrays[f"velocity/{k}"] = model.velocity[k]
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Model:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        net = loads_spec(str(data["network"]), source=str(path))
        model = Model(net, zero=True)
        for k in model.params:
            model.params[k] = data[f"param/{k}"].copy()
            model.velocity[k] = data[f"velocity/{k}"].copy()
    return model
