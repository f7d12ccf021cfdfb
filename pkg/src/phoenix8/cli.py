"""Command-line front end.

    phoenix8 quantize      --model m.phnx --calib calib.npy --format M4E3 --out m.phnq
    phoenix8 infer         --qmodel m.phnq --input x.npy --t 14 [--reference m.phnx] --out run.json
    phoenix8 sweep-formats --model m.phnx --calib calib.npy --out sweep.csv
    phoenix8 simulate      --model m.phnx --preset default [--sweep Np=1..128x2] --out perf.json

Exit status: 0 on success, 2 on usage or parse errors, 3 on numerical
degeneracy (e.g. a layer whose output is identically zero).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .container import ContainerError, atomic_write_bytes, load_model, load_qmodel, save_qmodel
from .datapath import lossless_width
from .graph import GraphError, NetworkGraph
from .inference import infer_quantized
from .minifloat import ALL_FORMATS, MiniFloatFormat
from .perfmodel import PRESETS, parse_sweep, peak_throughput, preset, simulate_network
from .quantizer import STATS_MODES, DegenerateLayerError, apply_divisors, collect_stats, quantize_network
from .toy import alexnet_conv, vgg16_conv, vgg_like_toy

log = logging.getLogger("phoenix8")

EXIT_OK, EXIT_USAGE, EXIT_DEGENERATE = 0, 2, 3

BUILTIN_MODELS = {"alexnet": alexnet_conv, "vgg16": vgg16_conv, "vgg-toy": vgg_like_toy}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    inputs: dict[str, str] = field(default_factory=dict)
    format: str | None = None
    t: int | None = None
    stats_mode: str | None = None
    batch: int | None = None
    preset: str | None = None
    outputs: list[str] = field(default_factory=list)
    seed: int = 0
    version: str = __version__


# ----------------------------------------------------------------- helpers


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PHOENIX_THREADS", "1")))
    except ValueError:
        raise UsageError("PHOENIX_THREADS must be an integer") from None


def _parse_format(s: str) -> MiniFloatFormat:
    try:
        return MiniFloatFormat.parse(s)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _check_t(t: int, fmt: MiniFloatFormat) -> int:
    hi = lossless_width(fmt)
    if not 7 <= t <= hi:
        raise UsageError(f"--t must be in 7..{hi} for {fmt.name}")
    return t


def _load_npy(path: str, what: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    try:
        return np.load(p, allow_pickle=False)
    except (ValueError, OSError) as e:
        raise UsageError(f"cannot read {what} {path}: {e}") from None


def _load_images(path: str, shape, what: str) -> np.ndarray:
    x = _load_npy(path, what).astype(np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(shape):
        raise UsageError(f"{what} shape {x.shape} does not match network input {tuple(shape)}")
    if x.shape[0] == 0:
        raise UsageError(f"{what} is empty")
    return x


def _load_model(spec: str) -> NetworkGraph:
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN_MODELS:
            raise UsageError(f"unknown builtin model {name!r}; choose from {sorted(BUILTIN_MODELS)}")
        return BUILTIN_MODELS[name]()
    if not Path(spec).is_file():
        raise UsageError(f"model file not found: {spec}")
    return load_model(spec)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _emit(report: dict, out: str | None, manifest: RunManifest) -> None:
    report = {"manifest": asdict(manifest), **report}
    if out:
        _write_text(out, _dumps(report))
    else:
        sys.stdout.write(_dumps(report))


def _sibling(out: str, suffix: str) -> str:
    p = Path(out)
    return str(p.with_name(p.stem + suffix))


# ---------------------------------------------------------------- commands


def cmd_quantize(args) -> int:
    fmt = _parse_format(args.format)
    net = _load_model(args.model)
    calib = _load_images(args.calib, net.input_shape, "calibration set")
    stats = collect_stats(net, calib, mode=args.stats_mode, batch=args.batch)
    qnet, report = quantize_network(net, stats, fmt)
    man = RunManifest(
        "quantize",
        {"model": args.model, "calib": args.calib},
        fmt.name,
        stats_mode=args.stats_mode,
        batch=args.batch,
        seed=args.seed,
    )
    payload = {"report": report.to_dict()}
    if args.out:
        save_qmodel(qnet, args.out)
        rep = _sibling(args.out, ".report.json")
        man.outputs = [args.out, rep]
        _emit(payload, rep, man)
    else:
        _emit(payload, None, man)
    return EXIT_OK


def cmd_infer(args) -> int:
    if not Path(args.qmodel).is_file():
        raise UsageError(f"qmodel file not found: {args.qmodel}")
    qnet = load_qmodel(args.qmodel)
    t = _check_t(args.t, qnet.fmt)
    x = _load_images(args.input, qnet.graph.input_shape, "input")
    ref_net = None
    if args.reference:
        raw = _load_model(args.reference)
        if qnet.divisors is None:
            raise UsageError("qmodel carries no normalization divisors; cannot normalize the reference")
        ref_net = apply_divisors(raw, qnet.divisors)
    outputs, reports = [], []
    for img in x:
        q, rep = infer_quantized(qnet, img, t, ref_net)
        outputs.append(q.dequantize())
        reports.append(rep.to_dict())
    man = RunManifest(
        "infer",
        {"qmodel": args.qmodel, "input": args.input, **({"reference": args.reference} if args.reference else {})},
        qnet.fmt.name,
        t=t,
        seed=args.seed,
    )
    summary = {
        "reference": "fp32 normalized" if ref_net is not None else "dequantized parameters",
        "images": len(reports),
        "mean_output_rel_l2_pct": float(np.mean([r["output_rel_l2_pct"] for r in reports])),
        "max_output_rel_l2_pct": float(np.max([r["output_rel_l2_pct"] for r in reports])),
    }
    if args.out:
        npy = _sibling(args.out, ".npy")
        buf = io.BytesIO()
        np.save(buf, np.stack(outputs))
        atomic_write_bytes(npy, buf.getvalue())
        man.outputs = [args.out, npy]
    _emit({"summary": summary, "images": reports}, args.out, man)
    return EXIT_OK


def _sweep_one(net, calib, held, fmt, t, mode, batch):
    try:
        stats = collect_stats(net, calib, mode=mode, batch=batch)
        qnet, _ = quantize_network(net, stats, fmt)
        ref = apply_divisors(net, qnet.divisors)
        tt = min(t, lossless_width(fmt))
        errs = [infer_quantized(qnet, img, tt, ref)[1].output_rel_l2_pct for img in held]
        return {
            "format": fmt.name,
            "t": tt,
            "h_s_act": qnet.h_s_act,
            "mean_rel_l2_pct": float(np.mean(errs)),
            "max_rel_l2_pct": float(np.max(errs)),
            "error": "",
        }
    except (ArithmeticError, ValueError) as e:
        log.warning("%s failed: %s", fmt.name, e)
        nan = float("nan")
        return {"format": fmt.name, "t": t, "h_s_act": "", "mean_rel_l2_pct": nan, "max_rel_l2_pct": nan, "error": str(e)}


def cmd_sweep_formats(args) -> int:
    net = _load_model(args.model)
    images = _load_images(args.calib, net.input_shape, "calibration set")
    calib = images[: args.batch]
    held = images[args.batch :]
    if len(held) == 0:
        log.warning("no held-out images after the calibration batch; evaluating on the calibration images")
        held = calib
    formats = [_parse_format(args.format)] if args.format else list(ALL_FORMATS)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(lambda f: _sweep_one(net, calib, held, f, args.t, args.stats_mode, args.batch), formats))
    man = RunManifest(
        "sweep-formats",
        {"model": args.model, "calib": args.calib},
        args.format,
        t=args.t,
        stats_mode=args.stats_mode,
        batch=args.batch,
        seed=args.seed,
    )
    cols = ["format", "t", "h_s_act", "mean_rel_l2_pct", "max_rel_l2_pct", "error"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if args.out:
        _write_text(args.out, buf.getvalue())
        rep = _sibling(args.out, ".json")
        man.outputs = [args.out, rep]
        _emit({"rows": rows, "held_out_images": len(held)}, rep, man)
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _perf_sweep(net, cfg, name, values) -> list[dict]:
    rows = []
    base = None
    perf_log = logging.getLogger("phoenix8.perfmodel")
    level = perf_log.level
    try:
        for n, v in enumerate(values):
            if n == 1:
                perf_log.setLevel(logging.ERROR)  # unsupported-layer warnings were shown on the first point
            r = simulate_network(net, replace(cfg, **{name: v}))
            base = base or r.total_cycles
            rows.append(
                {
                    name: v,
                    "peak_throughput": peak_throughput(r.config),
                    "compute_cycles": r.compute_cycles,
                    "total_cycles": r.total_cycles,
                    "speedup": base / r.total_cycles if r.total_cycles else float("nan"),
                    "utilization": r.utilization,
                    "min_bandwidth_bytes_per_cycle": r.min_bandwidth,
                }
            )
    finally:
        perf_log.setLevel(level)
    return rows


def cmd_simulate(args) -> int:
    try:
        cfg = preset(args.preset)
    except ValueError as e:
        raise UsageError(str(e)) from None
    net = _load_model(args.model)
    man = RunManifest("simulate", {"model": args.model}, preset=args.preset, seed=args.seed)
    if args.sweep:
        try:
            name, values = parse_sweep(args.sweep)
        except ValueError as e:
            raise UsageError(str(e)) from None
        rows = _perf_sweep(net, cfg, name, values)
        payload = {"config": asdict(cfg), "sweep": args.sweep, "rows": rows}
        if args.out:
            buf = io.StringIO()
            w = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
            csv_path = _sibling(args.out, ".csv")
            _write_text(csv_path, buf.getvalue())
            man.outputs = [args.out, csv_path]
        _emit(payload, args.out, man)
        return EXIT_OK
    report = simulate_network(net, cfg)
    if args.out:
        csv_path = _sibling(args.out, ".csv")
        _write_text(csv_path, report.to_csv())
        man.outputs = [args.out, csv_path]
    _emit({"preset": args.preset, **report.to_dict()}, args.out, man)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phoenix8", description="8-bit floating-point CNN quantization and accelerator model")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output path (default: JSON to stdout)")
        sp.add_argument("--seed", type=int, default=0)

    q = sub.add_parser("quantize", help="normalize, merge and quantize an fp32 model")
    q.add_argument("--model", required=True)
    q.add_argument("--calib", required=True, help=".npy of (N, C, H, W) or (C, H, W) images")
    q.add_argument("--format", default="M4E3")
    q.add_argument("--stats-mode", choices=STATS_MODES, default=STATS_MODES[0])
    q.add_argument("--batch", type=_positive_int, default=1)
    common(q)
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("infer", help="run a quantized model on the emulated datapath")
    i.add_argument("--qmodel", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--t", type=int, default=14)
    i.add_argument("--reference", help="fp32 model for error columns")
    common(i)
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("sweep-formats", help="quantize and infer with every MaEb format")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True, help="first --batch images calibrate, the rest are held out")
    s.add_argument("--format", help="restrict to one format")
    s.add_argument("--t", type=int, default=14, help="clamped to each format's full-precision width")
    s.add_argument("--stats-mode", choices=STATS_MODES, default=STATS_MODES[0])
    s.add_argument("--batch", type=_positive_int, default=1)
    common(s)
    s.set_defaults(func=cmd_sweep_formats)

    m = sub.add_parser("simulate", help="cycle model of the accelerator")
    m.add_argument("--model", required=True, help="fp32 container or builtin:{alexnet,vgg16,vgg-toy}")
    m.add_argument("--preset", default="default", help=f"one of {sorted(PRESETS)}")
    m.add_argument("--sweep", help='e.g. "Np=1..128x2"')
    common(m)
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except DegenerateLayerError as e:
        print(f"phoenix8: numerical degeneracy: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (UsageError, ContainerError, GraphError, ValueError, OSError) as e:
        print(f"phoenix8: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
