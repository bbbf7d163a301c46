"""Network descriptions and the FatNet transformation.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` entries.  The
transformation turns a cone-shaped classifier into a "fat" fully
convolutional one:

1. the number of conv layers and activations stays the same;
2. layers are copied verbatim until the feature maps pool down to at most
   ``num_classes`` pixels per map;
3. from there on every feature map is ``F x F`` (``F**2 >= num_classes``),
   and each layer gets enough channels to hold its original pixel count;
4. kernel sizes are re-derived so each layer keeps its original parameter
   count.

Kernels larger than ``F`` cannot train under same padding, so they are
clamped to ``F`` and the layer's output channels are re-inflated to keep the
parameter budget.  The classifier head always keeps one output channel.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

__all__ = [
    "LAYER_KINDS",
    "LayerSpec",
    "NetworkSpec",
    "SpecError",
    "TransformRow",
    "TransformReport",
    "TABLE1_FATNET",
    "target_resolution",
    "channels_for",
    "kernel_for",
    "count_params",
    "count_conv_ops",
    "transform",
    "resnet18_cifar100",
    "fatnet_paper",
    "load_spec",
    "save_spec",
    "spec_from_dict",
    "spec_to_dict",
]

LAYER_KINDS = (
    "conv",
    "maxpool2x2",
    "adaptive_avgpool",
    "relu",
    "residual_begin",
    "residual_end",
    "classifier_head",
)
WEIGHTED = ("conv", "classifier_head")
POOLING = ("maxpool2x2", "adaptive_avgpool")

SPEC_FORMAT = "fatnet4f-network"
SPEC_VERSION = 1

# FatNet column of the reference construction table: (c_in, c_out, kernel)
# for the twelve deep convolutions and the head of the CIFAR-100 ResNet-18.
TABLE1_FATNET = (
    (64, 82, 4),
    (82, 82, 5), (82, 82, 5), (82, 82, 5),
    (82, 41, 9),
    (41, 41, 19), (41, 41, 19), (41, 41, 19),
    (41, 21, 37),
    (21, 21, 73), (21, 21, 73), (21, 21, 73),
    (21, 1, 49),
)


class SpecError(ValueError):
    """Malformed or inconsistent network description."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    feature_in: int
    feature_out: int
    kernel: int = 0
    shortcut: bool = False
    dense: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        for name in ("in_channels", "out_channels", "feature_in", "feature_out"):
            if getattr(self, name) < 1:
                raise SpecError(f"{self.kind}: {name} must be >= 1")
        if self.kind in WEIGHTED:
            if self.kernel < 1:
                raise SpecError(f"{self.kind}: kernel must be >= 1")
            if self.feature_out != self.feature_in:
                raise SpecError(f"{self.kind}: convolutions are same-padded, stride 1")
        elif self.in_channels != self.out_channels:
            raise SpecError(f"{self.kind}: layer cannot change the channel count")
        if self.kind == "maxpool2x2":
            if self.feature_in % 2 or self.feature_out != self.feature_in // 2:
                raise SpecError("maxpool2x2 needs an even input and halves it")
        elif self.kind == "adaptive_avgpool":
            if self.feature_out > self.feature_in:
                raise SpecError("adaptive_avgpool cannot upsample")
        elif self.kind not in WEIGHTED and self.feature_out != self.feature_in:
            raise SpecError(f"{self.kind}: layer cannot change the feature size")
        if self.dense and self.kind != "classifier_head":
            raise SpecError("only the classifier head can be dense")

    @property
    def params(self) -> int:
        return count_params(self)

    @property
    def feature_pixels(self) -> int:
        return self.out_channels * self.feature_out ** 2


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[LayerSpec, ...]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        validate(self)

    def convs(self) -> list[tuple[int, LayerSpec]]:
        return [(i, l) for i, l in enumerate(self.layers) if l.kind in WEIGHTED]

    @property
    def head(self) -> LayerSpec | None:
        heads = [l for l in self.layers if l.kind == "classifier_head"]
        return heads[-1] if heads else None


def validate(net: NetworkSpec) -> None:
    """Check shape chaining, residual nesting and the head contract."""
    c, h, w = net.input_shape
    if h != w:
        raise SpecError(f"input must be square, got {h}x{w}")
    if net.num_classes < 1:
        raise SpecError("num_classes must be >= 1")
    stack: list[tuple[int, int, int]] = []
    for i, layer in enumerate(net.layers):
        if layer.in_channels != c or layer.feature_in != h:
            raise SpecError(
                f"layer {i} ({layer.kind}) expects {layer.in_channels}x{layer.feature_in}^2 "
                f"but receives {c}x{h}^2"
            )
        if layer.kind == "classifier_head" and i != len(net.layers) - 1:
            raise SpecError("classifier_head must be the last layer")
        if layer.kind == "residual_begin":
            stack.append((i, c, h))
        elif layer.kind == "residual_end":
            if not stack:
                raise SpecError(f"layer {i}: residual_end without residual_begin")
            _, c0, h0 = stack.pop()
            if h0 != h:
                raise SpecError(f"layer {i}: residual branches differ in resolution ({h0} vs {h})")
            if c0 != c and not layer.shortcut:
                raise SpecError(f"layer {i}: channel change {c0}->{c} needs a projection shortcut")
        c, h = layer.out_channels, layer.feature_out
    if stack:
        raise SpecError("unterminated residual block")
    head = net.head
    if head is not None:
        if head.dense:
            if head.feature_in != 1 or head.out_channels != net.num_classes:
                raise SpecError("dense head must map a 1x1 vector to num_classes outputs")
        else:
            if head.out_channels != 1 or head.feature_out ** 2 < net.num_classes:
                raise SpecError(
                    "convolutional head must output one channel with at least num_classes pixels"
                )


# ---------------------------------------------------------------- rules

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def target_resolution(num_classes: int) -> int:
    """Smallest ``F`` with ``F * F >= num_classes``."""
    if num_classes < 1:
        raise SpecError("num_classes must be >= 1")
    f = math.isqrt(num_classes)
    return f if f * f == num_classes else f + 1


def channels_for(feature_pixels: int, num_classes: int) -> int:
    return -(-feature_pixels // num_classes)


def kernel_for(weights: int, c_in: int, c_out: int) -> int:
    return max(1, _round_half_up(math.sqrt(weights / (c_in * c_out))))


def count_params(layer: LayerSpec) -> int:
    """Trainable weights of a conv or head layer, bias excluded."""
    if layer.kind not in WEIGHTED:
        raise ValueError(f"{layer.kind} layers have no weights")
    return layer.in_channels * layer.out_channels * layer.kernel ** 2


def count_conv_ops(net: NetworkSpec) -> int:
    """Single-channel 2-D convolutions executed by one inference.

    Main-path convolutions count ``c_in * c_out`` each; a dense head is not a
    convolution and projection shortcuts are not counted.
    """
    return sum(
        l.in_channels * l.out_channels
        for l in net.layers
        if l.kind == "conv" or (l.kind == "classifier_head" and not l.dense)
    )


# ------------------------------------------------------------ transform

@dataclass(frozen=True)
class TransformRow:
    index: int
    kind: str
    original: tuple[int, int, int]
    weights: int
    feature_pixels: int
    rule: tuple[int, int, int]
    transformed: tuple[int, int, int]
    transformed_weights: int
    capped: bool = False
    diverges_from_paper_table: bool = False
    reference: tuple[int, int, int] | None = None

    @property
    def deep(self) -> bool:
        return self.rule != self.original or self.transformed != self.original

    @property
    def param_change(self) -> float:
        return (self.transformed_weights - self.weights) / self.weights


@dataclass(frozen=True)
class TransformReport:
    source: str
    num_classes: int
    resolution: int
    rows: tuple[TransformRow, ...] = field(default_factory=tuple)

    @property
    def shape_changes(self) -> int:
        return sum(1 for r in self.rows if r.transformed != r.original)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "num_classes": self.num_classes,
            "resolution": self.resolution,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_text(self) -> str:
        def fmt(t):
            return f"{t[0]}x{t[1]},k=({t[2]}x{t[2]})"

        header = ("Layer", "Weights", "Feature pixels", "Rule", "FatNet layer", "FatNet weights", "Flags")
        lines = []
        for r in self.rows:
            flags = []
            if r.capped:
                flags.append("capped")
            if r.diverges_from_paper_table:
                flags.append(f"diverges (table: {fmt(r.reference)})")
            orig = fmt(r.original) if r.kind == "conv" or not _dense_row(r) else f"FC({r.original[0]},{r.original[1]})"
            lines.append((orig, str(r.weights), str(r.feature_pixels), fmt(r.rule),
                          fmt(r.transformed), str(r.transformed_weights), ", ".join(flags)))
        widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(header)]
        out = [f"FatNet construction from {self.source} ({self.num_classes} classes, "
               f"{self.resolution}x{self.resolution} features)"]
        out.append("  ".join(h.ljust(wd) for h, wd in zip(header, widths)).rstrip())
        out.append("  ".join("-" * wd for wd in widths))
        for l in lines:
            out.append("  ".join(v.ljust(wd) for v, wd in zip(l, widths)).rstrip())
        return "\n".join(out)


def _dense_row(row: TransformRow) -> bool:
    return row.kind == "classifier_head" and row.original[2] == 1 and row.rule[1] == 1 and row.original[1] != 1


def _starts_deep(layer: LayerSpec, num_classes: int) -> bool:
    if layer.kind in POOLING:
        return layer.feature_out ** 2 <= num_classes
    if layer.kind in WEIGHTED:
        return layer.feature_in ** 2 <= num_classes or layer.dense
    return False


def transform(
    net: NetworkSpec,
    overrides: dict[int, int] | None = None,
    reference: tuple[tuple[int, int, int], ...] | None = None,
) -> tuple[NetworkSpec, TransformReport]:
    """Build the FatNet form of ``net``.

    ``overrides`` maps a deep-layer ordinal (0 = first transformed conv) to a
    kernel size used instead of the parameter rule.  ``reference`` holds
    expected ``(c_in, c_out, k)`` triples for the deep layers, e.g.
    :data:`TABLE1_FATNET`; rows whose rule values differ are flagged.
    """
    overrides = dict(overrides or {})
    if net.head is None:
        raise SpecError("network has no classifier head")
    if not any(l.kind == "conv" for l in net.layers):
        raise SpecError("network has no convolution layers")
    n = net.num_classes
    f = target_resolution(n)
    pixels_per_map = f * f

    layers: list[LayerSpec] = []
    rows: list[TransformRow] = []
    deep = False
    c = net.input_shape[0]
    h = net.input_shape[1]
    rule_c = c
    ordinal = 0
    begins: list[int] = []

    for idx, layer in enumerate(net.layers):
        if not deep and _starts_deep(layer, n):
            deep = True
            if h < f:
                raise SpecError(f"features shrink to {h}x{h} before reaching {f}x{f}")
            if h > f:
                layers.append(LayerSpec("adaptive_avgpool", c, c, h, f))
                h = f
        if not deep:
            layers.append(layer)
            if layer.kind == "residual_begin":
                begins.append(c)
            elif layer.kind == "residual_end":
                begins.pop()
            if layer.kind in WEIGHTED:
                rows.append(TransformRow(
                    idx, layer.kind, (layer.in_channels, layer.out_channels, layer.kernel),
                    layer.params, layer.feature_pixels,
                    (layer.in_channels, layer.out_channels, layer.kernel),
                    (layer.in_channels, layer.out_channels, layer.kernel), layer.params,
                ))
            c, h, rule_c = layer.out_channels, layer.feature_out, layer.out_channels
            continue

        if layer.kind in POOLING:
            continue
        if layer.kind == "relu":
            layers.append(LayerSpec("relu", c, c, f, f))
            continue
        if layer.kind == "residual_begin":
            begins.append(c)
            layers.append(LayerSpec("residual_begin", c, c, f, f))
            continue
        if layer.kind == "residual_end":
            c0 = begins.pop()
            layers.append(LayerSpec("residual_end", c, c, f, f, shortcut=c0 != c))
            continue

        weights = layer.params
        head = layer.kind == "classifier_head"
        rule_out = 1 if head else channels_for(layer.feature_pixels, pixels_per_map)
        rule_k = overrides.get(ordinal, kernel_for(weights, rule_c, rule_out))
        c_out = rule_out
        k = overrides.get(ordinal, kernel_for(weights, c, c_out))
        capped = k > f
        if capped:
            k = f
            if not head:
                c_out = max(1, _round_half_up(weights / (c * f * f)))
        ref = reference[ordinal] if reference is not None and ordinal < len(reference) else None
        new = LayerSpec(layer.kind, c, c_out, f, f, kernel=k)
        rows.append(TransformRow(
            idx, layer.kind, (layer.in_channels, layer.out_channels, layer.kernel),
            weights, layer.feature_pixels, (rule_c, rule_out, rule_k), (c, c_out, k), new.params,
            capped=capped,
            diverges_from_paper_table=ref is not None and tuple(ref[1:]) != (rule_out, rule_k),
            reference=tuple(ref) if ref is not None else None,
        ))
        layers.append(new)
        c, h, rule_c = c_out, f, rule_out
        ordinal += 1

    for layer in layers:
        if layer.kind in WEIGHTED and layer.kernel > layer.feature_in:
            raise SpecError(f"transformed {layer.kind} keeps a kernel larger than its features")
    out = NetworkSpec(
        name=f"fatnet_{net.name}" if not net.name.startswith("fatnet") else net.name,
        input_shape=net.input_shape,
        num_classes=n,
        layers=tuple(layers),
        provenance=f"FatNet transform of {net.name}",
    )
    return out, TransformReport(net.name, n, f, tuple(rows))


# ------------------------------------------------------------- builtins

def _stage(layers: list, c_in: int, c_out: int, size: int, blocks: int = 2):
    for b in range(blocks):
        ci = c_in if b == 0 else c_out
        layers += [
            LayerSpec("residual_begin", ci, ci, size, size),
            LayerSpec("conv", ci, c_out, size, size, kernel=3),
            LayerSpec("relu", c_out, c_out, size, size),
            LayerSpec("conv", c_out, c_out, size, size, kernel=3),
            LayerSpec("residual_end", c_out, c_out, size, size, shortcut=ci != c_out),
            LayerSpec("relu", c_out, c_out, size, size),
        ]


def resnet18_cifar100() -> NetworkSpec:
    """Stride-free ResNet-18 for 32x32 CIFAR-100 images.

    Downsampling is done with 2x2 max pooling between stages; the stem is a
    single 3x3 conv followed by pooling to 16x16.
    """
    layers = [
        LayerSpec("conv", 3, 64, 32, 32, kernel=3),
        LayerSpec("relu", 64, 64, 32, 32),
        LayerSpec("maxpool2x2", 64, 64, 32, 16),
    ]
    _stage(layers, 64, 64, 16)
    layers.append(LayerSpec("maxpool2x2", 64, 64, 16, 8))
    _stage(layers, 64, 128, 8)
    layers.append(LayerSpec("maxpool2x2", 128, 128, 8, 4))
    _stage(layers, 128, 256, 4)
    layers.append(LayerSpec("maxpool2x2", 256, 256, 4, 2))
    _stage(layers, 256, 512, 2)
    layers += [
        LayerSpec("adaptive_avgpool", 512, 512, 2, 1),
        LayerSpec("classifier_head", 512, 100, 1, 1, kernel=1, dense=True),
    ]
    return NetworkSpec("resnet18_cifar100", (3, 32, 32), 100, tuple(layers),
                       provenance="stride-free ResNet-18, CIFAR-100 variant")


def fatnet_paper() -> NetworkSpec:
    """FatNet for CIFAR-100, loaded from the spec file shipped with the package."""
    text = resources.files("fatnet4f").joinpath("data/fatnet_paper.json").read_text()
    return loads_spec(text, source="fatnet_paper.json")


BUILTINS = {
    "resnet18_cifar100": resnet18_cifar100,
    "fatnet_paper": fatnet_paper,
}


# ------------------------------------------------------------------ I/O

_LAYER_FIELDS = {f for f in LayerSpec.__dataclass_fields__}
_REQUIRED = ("kind", "in_channels", "out_channels", "feature_in", "feature_out")


def spec_to_dict(net: NetworkSpec) -> dict:
    layers = []
    for l in net.layers:
        d = {"kind": l.kind, "in_channels": l.in_channels, "out_channels": l.out_channels,
             "feature_in": l.feature_in, "feature_out": l.feature_out}
        if l.kind in WEIGHTED:
            d["kernel"] = l.kernel
        if l.shortcut:
            d["shortcut"] = True
        if l.dense:
            d["dense"] = True
        layers.append(d)
    return {
        "format": SPEC_FORMAT,
        "version": SPEC_VERSION,
        "name": net.name,
        "provenance": net.provenance,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": layers,
    }


def _layer_line(text: str, index: int) -> int | None:
    hits = [m.start() for m in re.finditer(r'"kind"\s*:', text)]
    if index < len(hits):
        return text.count("\n", 0, hits[index]) + 1
    return None


def spec_from_dict(data: dict, text: str = "", source: str = "<spec>") -> NetworkSpec:
    def fail(msg: str, layer: int | None = None):
        where = source
        if layer is not None:
            line = _layer_line(text, layer) if text else None
            where += f":{line}" if line else ""
            msg = f"layers[{layer}]: {msg}"
        raise SpecError(f"{where}: {msg}")

    if not isinstance(data, dict):
        fail("top level must be an object")
    if data.get("format", SPEC_FORMAT) != SPEC_FORMAT:
        fail(f"format must be {SPEC_FORMAT!r}")
    if data.get("version", SPEC_VERSION) != SPEC_VERSION:
        fail(f"unsupported version {data.get('version')!r}")
    for key in ("input_shape", "num_classes", "layers"):
        if key not in data:
            fail(f"missing field {key!r}")
    layers = []
    for i, raw in enumerate(data["layers"]):
        if not isinstance(raw, dict):
            fail("layer must be an object", i)
        if "stride" in raw and raw["stride"] != 1:
            fail(f"stride={raw['stride']!r}: optical convolutions cannot be strided; "
                 "use stride 1 and a pooling layer", i)
        clean = {k: v for k, v in raw.items() if k != "stride"}
        unknown = set(clean) - _LAYER_FIELDS
        if unknown:
            fail(f"unknown field(s) {sorted(unknown)}", i)
        for key in _REQUIRED:
            if key not in clean:
                fail(f"missing field {key!r}", i)
        for key in ("in_channels", "out_channels", "feature_in", "feature_out", "kernel"):
            if key in clean and (not isinstance(clean[key], int) or isinstance(clean[key], bool)):
                fail(f"field {key!r} must be an integer, got {clean[key]!r}", i)
        try:
            layers.append(LayerSpec(**clean))
        except SpecError as exc:
            fail(str(exc), i)
    try:
        return NetworkSpec(
            name=str(data.get("name", Path(source).stem)),
            input_shape=tuple(data["input_shape"]),
            num_classes=int(data["num_classes"]),
            layers=tuple(layers),
            provenance=str(data.get("provenance", "")),
        )
    except SpecError as exc:
        m = re.match(r"layer (\d+)", str(exc))
        fail(str(exc), int(m.group(1)) if m else None)


def loads_spec(text: str, source: str = "<spec>") -> NetworkSpec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    return spec_from_dict(data, text, source)


def load_spec(path) -> NetworkSpec:
    """Load a network from a JSON spec file, or ``builtin:<name>``."""
    path = str(path)
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        if name not in BUILTINS:
            raise SpecError(f"unknown builtin {name!r}; choose from {sorted(BUILTINS)}")
        return BUILTINS[name]()
    p = Path(path)
    return loads_spec(p.read_text(), source=str(p))


def save_spec(net: NetworkSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(net), indent=2) + "\n")
