"""Throughput planning for a 4f accelerator.

Batch tiling packs several inputs into one optical frame.  Each input of
size ``M`` is padded to ``M + N - 1`` for kernel size ``N`` so neighbours do
not overlap after convolution, which limits a square frame of resolution
``R`` to ``floor(R / (M + N - 1)) ** 2`` inputs.

The latency model charges ``4 * conv_ops`` frames per batch: two passes per
convolution for signed kernels, and a further factor of two for the loss of
frame parallelism between the positive and negative passes.  Batch members
share frames, so each input pays ``4 * conv_ops / (batch * frame_rate)``
seconds.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

from .fatnet import NetworkSpec, count_conv_ops

__all__ = [
    "CapacityWarning",
    "TilingPlan",
    "LatencyReport",
    "Comparison",
    "ComparisonRow",
    "batch_capacity",
    "plan_tiling",
    "optical_latency",
    "compare",
    "PASSES_PER_CONV",
]

PASSES_PER_CONV = 4
REPORT_FORMAT = "fatnet4f-report"
REPORT_VERSION = 1


class CapacityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TilingPlan:
    resolution: int
    input_size: int
    kernel_size: int
    capacity: int


@dataclass(frozen=True)
class LatencyReport:
    conv_ops: int
    batch: int
    frame_rate: float
    seconds_per_input: float


def batch_capacity(resolution: int, input_size: int, kernel_size: int) -> int:
    """How many padded inputs fit in one ``resolution x resolution`` frame."""
    for name, v in (("resolution", resolution), ("input_size", input_size), ("kernel_size", kernel_size)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    tile = input_size + kernel_size - 1
    if tile > resolution:
        warnings.warn(
            f"a {input_size}px input with a {kernel_size}px kernel needs {tile}px, "
            f"more than the {resolution}px frame",
            CapacityWarning,
            stacklevel=2,
        )
        return 0
    return (resolution // tile) ** 2


def plan_tiling(resolution: int, input_size: int, kernel_size: int) -> TilingPlan:
    return TilingPlan(resolution, input_size, kernel_size,
                      batch_capacity(resolution, input_size, kernel_size))


def optical_latency(
    conv_ops: int,
    batch: int,
    frame_rate: float,
    plan: TilingPlan | None = None,
    allow_over_capacity: bool = False,
) -> LatencyReport:
    """Seconds per input when ``batch`` inputs share every optical frame.

    With a ``plan``, batches larger than its capacity are refused unless
    ``allow_over_capacity`` is set.
    """
    if not frame_rate > 0:
        raise ValueError(f"frame_rate must be positive, got {frame_rate}")
    if conv_ops < 1 or batch < 1:
        raise ValueError("conv_ops and batch must be >= 1")
    if plan is not None and batch > plan.capacity and not allow_over_capacity:
        raise ValueError(
            f"batch {batch} exceeds the tiling capacity {plan.capacity} of a "
            f"{plan.resolution}px frame"
        )
    seconds = PASSES_PER_CONV * conv_ops / (batch * frame_rate)
    return LatencyReport(conv_ops, batch, frame_rate, seconds)


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    conv_ops: int
    ratio_to_baseline: float
    fewer_ops_factor: float
    latency: tuple[tuple[int, float | None], ...]


@dataclass(frozen=True)
class Comparison:
    frame_rate: float
    batches: tuple[int, ...]
    rows: tuple[ComparisonRow, ...]
    plan: TilingPlan | None = None

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "frame_rate": self.frame_rate,
            "batches": list(self.batches),
            "tiling": asdict(self.plan) if self.plan else None,
            "networks": [
                {
                    "name": r.name,
                    "conv_ops": r.conv_ops,
                    "ratio_to_baseline": r.ratio_to_baseline,
                    "fewer_ops_factor": r.fewer_ops_factor,
                    "latency": [{"batch": b, "seconds_per_input": s} for b, s in r.latency],
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Comparison":
        if data.get("format") != REPORT_FORMAT or data.get("version") != REPORT_VERSION:
            raise ValueError("not a fatnet4f report (format/version mismatch)")
        rows = tuple(
            ComparisonRow(
                n["name"], n["conv_ops"], n["ratio_to_baseline"], n["fewer_ops_factor"],
                tuple((l["batch"], l["seconds_per_input"]) for l in n["latency"]),
            )
            for n in data["networks"]
        )
        plan = TilingPlan(**data["tiling"]) if data.get("tiling") else None
        return cls(data["frame_rate"], tuple(data["batches"]), rows, plan)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Comparison":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_text(self) -> str:
        header = ["Architecture", "Conv ops", "Ratio to baseline", "Fewer ops"]
        header += [f"Optics s/input @B={b}" for b in self.batches]
        lines = []
        for r in self.rows:
            cells = [r.name, f"{r.conv_ops:,}", f"{r.ratio_to_baseline:.2f}", f"{r.fewer_ops_factor:.1f}x"]
            cells += ["over capacity" if s is None else f"{s:.3e}" for _, s in r.latency]
            lines.append(cells)
        widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(header)]
        out = []
        if self.plan is not None:
            p = self.plan
            out.append(f"Tiling: R={p.resolution} M={p.input_size} N={p.kernel_size} -> capacity {p.capacity}")
        out.append(f"Frame rate: {self.frame_rate:g} Hz")
        out.append("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip())
        out.append("  ".join("-" * w for w in widths))
        out += ["  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip() for l in lines]
        return "\n".join(out)


def compare(
    networks: list[NetworkSpec],
    batches: list[int],
    frame_rate: float,
    plan: TilingPlan | None = None,
    allow_over_capacity: bool = False,
) -> Comparison:
    """Conv-op counts, ratios to the first network and latency per batch.

    Batches over the ``plan`` capacity get ``None`` latency unless
    ``allow_over_capacity`` is set.
    """
    if not networks:
        raise ValueError("compare needs at least one network")
    counts = [count_conv_ops(n) for n in networks]
    base = counts[0]
    rows = []
    for net, ops in zip(networks, counts):
        lat = []
        for b in batches:
            if plan is not None and b > plan.capacity and not allow_over_capacity:
                lat.append((b, None))
            else:
                lat.append((b, optical_latency(ops, b, frame_rate).seconds_per_input))
        rows.append(ComparisonRow(net.name, ops, ops / base, base / ops, tuple(lat)))
    return Comparison(float(frame_rate), tuple(batches), tuple(rows), plan)
