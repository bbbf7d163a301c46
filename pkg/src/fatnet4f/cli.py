"""``fatnet4f`` command line: transform | analyze | verify | train-demo.

Exit status: 0 on success, 1 when a check fails (fidelity bound, training
divergence), 2 for bad input (malformed spec, bad flags).
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import analysis, fatnet, nettrain, optics
from .conv import conv2d_direct

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2

_LENGTH_UNITS = {"m": 1.0, "mm": 1e-3, "um": 1e-6, "µm": 1e-6, "nm": 1e-9}
_FREQ_UNITS = {"hz": 1.0, "khz": 1e3, "mhz": 1e6, "ghz": 1e9}


class InputError(Exception):
    pass


def _parse_quantity(text: str, units: dict[str, float], what: str) -> float:
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-zµ]+)\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(
            f"{what} {text!r} needs an explicit unit ({', '.join(units)})")
    value, unit = float(m.group(1)), m.group(2)
    scale = units.get(unit, units.get(unit.lower()))
    if scale is None:
        raise argparse.ArgumentTypeError(f"unknown {what} unit {unit!r}; use one of {', '.join(units)}")
    return value * scale


def parse_length(text: str) -> float:
    """``"532nm"`` -> ``5.32e-07`` (metres)."""
    return _parse_quantity(text, _LENGTH_UNITS, "length")


def parse_frequency(text: str) -> float:
    """``"2MHz"`` -> ``2e6`` (hertz)."""
    return _parse_quantity(text, _FREQ_UNITS, "frequency")


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _override(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)=(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"override must look like ORDINAL=KERNEL, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _load(path: str) -> fatnet.NetworkSpec:
    try:
        return fatnet.load_spec(path)
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except fatnet.SpecError as exc:
        raise InputError(str(exc)) from None


# ------------------------------------------------------------ commands

def cmd_transform(args) -> int:
    net = _load(args.spec)
    if args.num_classes is not None and args.num_classes != net.num_classes:
        head = net.layers[-1]
        if not (head.kind == "classifier_head" and head.dense):
            raise InputError("--num-classes can only retarget a dense classifier head")
        net = replace(net, num_classes=args.num_classes,
                      layers=net.layers[:-1] + (replace(head, out_channels=args.num_classes),))
    reference = None
    if args.reference == "table1" or (args.reference == "auto" and net.name == "resnet18_cifar100"):
        reference = fatnet.TABLE1_FATNET
    try:
        new, report = fatnet.transform(net, overrides=dict(args.override), reference=reference)
    except fatnet.SpecError as exc:
        raise InputError(str(exc)) from None
    print(report.to_text())
    print(f"\nconv operations: {fatnet.count_conv_ops(net):,} -> {fatnet.count_conv_ops(new):,}")
    print(f"shape changes: {report.shape_changes}")
    fatnet.save_spec(new, args.out)
    print(f"wrote {args.out}")
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return EXIT_OK


def cmd_analyze(args) -> int:
    nets = [_load(p) for p in args.specs]
    geometry = (args.resolution, args.input, args.kernel)
    plan = None
    if any(v is not None for v in geometry):
        if None in geometry:
            raise InputError("--resolution, --input and --kernel must be given together")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", analysis.CapacityWarning)
            plan = analysis.plan_tiling(*geometry)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    batches = args.batch or []
    if batches and plan is None:
        raise InputError("latency needs the tiling geometry: --resolution R --input M --kernel N")
    for b in batches:
        if b > plan.capacity:
            note = "reporting anyway" if args.allow_over_capacity else "latency omitted"
            print(f"warning: batch {b} exceeds tiling capacity {plan.capacity} ({note})", file=sys.stderr)
    report = analysis.compare(nets, batches, args.frame_rate, plan, args.allow_over_capacity)
    print(report.to_text())
    if args.json:
        report.save(args.json)
    return EXIT_OK


def _verify_trials(config: optics.OpticsConfig, image_size: int, kernel_size: int, trials: int, seed: int):
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(trials):
        cases.append(("random", rng.random((image_size, image_size)), rng.random((kernel_size, kernel_size))))
    delta = np.zeros((kernel_size, kernel_size))
    delta[(kernel_size - 1) // 2, (kernel_size - 1) // 2] = 1.0
    cases.append(("delta", rng.random((image_size, image_size)), delta))
    errors = []
    for name, image, kernel in cases:
        ref = conv2d_direct(image[None, None], kernel[None, None])[0, 0]
        out = optics.conv4f_single(image, kernel, config)
        errors.append((name, optics.relative_rms_error(out, ref)))
    return errors


def cmd_verify(args) -> int:
    def make(n):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", optics.PupilTruncationWarning)
            return optics.OpticsConfig(args.wavelength, args.focal_length, args.lens_diameter,
                                       n, args.precision, args.bound)

    try:
        config = make(args.grid)
        errors = _verify_trials(config, args.image_size, args.kernel_size, args.trials, args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    print(f"4f simulation vs direct convolution: grid {args.grid}, pixel {config.pixel_scale * 1e6:.3f} um, "
          f"{args.image_size}x{args.image_size} image, {args.kernel_size}x{args.kernel_size} kernel")
    for i, (name, err) in enumerate(errors):
        print(f"  trial {i:2d} ({name:6s}) relative RMS error {err:.3e}")
    worst = max(e for _, e in errors)
    ok = worst < args.bound
    print(f"worst {worst:.3e} vs bound {args.bound:g}: {'PASS' if ok else 'FAIL'}")

    if args.sweep:
        print("grid convergence (worst error over the same trials):")
        sweep = []
        for n in args.sweep:
            errs = _verify_trials(make(n), args.image_size, args.kernel_size, args.trials, args.seed)
            sweep.append(max(e for _, e in errs))
            print(f"  N={n:5d}  {sweep[-1]:.3e}")
        monotone = all(b < a for a, b in zip(sweep, sweep[1:]))
        print(f"strictly decreasing: {'yes' if monotone else 'no'}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_train_demo(args) -> int:
    cfg = nettrain.demo_config(backend=args.backend, seed=args.seed, epochs=args.epochs)
    log_fh = open(args.log, "w") if args.log else None

    def log(row):
        line = "  ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items())
        print(line, flush=True)
        if log_fh:
            log_fh.write(json.dumps(row) + "\n")

    try:
        history = nettrain.train_demo(cfg, log=log)
    except nettrain.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    finally:
        if log_fh:
            log_fh.close()
    if history:
        print(f"final train accuracy {history[-1]['train_accuracy']:.3f}")
    return EXIT_OK


# -------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fatnet4f", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("transform", help="convert a classifier spec to FatNet form")
    t.add_argument("spec", help="network spec file, or builtin:resnet18_cifar100 / builtin:fatnet_paper")
    t.add_argument("-o", "--out", required=True, help="where to write the transformed spec")
    t.add_argument("--num-classes", type=_positive_int)
    t.add_argument("--reference", choices=("auto", "table1", "none"), default="auto",
                   help="expected deep-layer plan to flag divergences against")
    t.add_argument("--override", type=_override, action="append", default=[],
                   help="ORDINAL=KERNEL: force the kernel of a deep layer (0 = first transformed conv)")
    t.add_argument("--report", help="also write the report as JSON")
    t.set_defaults(func=cmd_transform)

    a = sub.add_parser("analyze", help="conv-op counts, tiling capacity and optical latency")
    a.add_argument("specs", nargs="+")
    a.add_argument("--batch", type=_positive_int, action="append")
    a.add_argument("--frame-rate", type=parse_frequency, default=parse_frequency("2MHz"))
    a.add_argument("--resolution", type=_positive_int, help="frame resolution R in pixels")
    a.add_argument("--input", type=_positive_int, help="input size M in pixels")
    a.add_argument("--kernel", type=_positive_int, help="kernel size N in pixels")
    a.add_argument("--allow-over-capacity", action="store_true")
    a.add_argument("--json", help="write the machine-readable report here")
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="compare the 4f simulation against direct convolution")
    v.add_argument("--grid", type=_positive_int, default=512)
    v.add_argument("--image-size", type=_positive_int, default=32)
    v.add_argument("--kernel-size", type=_positive_int, default=3)
    v.add_argument("--trials", type=_positive_int, default=10)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--sweep", type=lambda s: [_positive_int(x) for x in s.split(",") if x],
                   default=[128, 256, 512], help="comma-separated grid sizes; empty to skip")
    v.add_argument("--wavelength", type=parse_length, default=parse_length("532nm"))
    v.add_argument("--focal-length", type=parse_length, default=parse_length("10mm"))
    v.add_argument("--lens-diameter", type=parse_length, default=parse_length("5mm"))
    v.add_argument("--precision", choices=("float32", "float64"), default="float64")
    v.add_argument("--bound", type=float, default=0.02, help="relative RMS fidelity bound")
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("train-demo", help="train the toy FatNet on synthetic data")
    d.add_argument("--backend", choices=nettrain.BACKENDS, default="direct")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--epochs", type=int, default=200)
    d.add_argument("--log", help="write per-epoch metrics as JSON lines")
    d.set_defaults(func=cmd_train_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
