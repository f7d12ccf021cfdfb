"""Whole-network inference on the quantized datapath with error reporting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .datapath import ARRAY_T_MAX, NM_DEFAULT, WINDOW_LSB, LayerRunInfo, execute_layer_quantized, lossless_width
from .graph import INPUT, GraphError, NetworkGraph, infer_fp32
from .minifloat import quantize_array
from .quantizer import QuantizedNetwork, QuantizedTensor


@dataclass
class LayerError:
    index: int
    name: str
    kind: str
    rel_l2_pct: float
    max_abs: float
    changed_codes: float | None = None
    lsb_shift: int = 0
    saturated_products: int = 0
    overflow: bool = False


@dataclass
class ErrorReport:
    t: int
    fmt: str
    layers: list[LayerError] = field(default_factory=list)
    output_rel_l2_pct: float = float("nan")
    output_max_abs: float = float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(e) for e in self.layers]
        return d


def relative_l2_pct(got, ref) -> float:
    got = np.asarray(got, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    den = np.linalg.norm(ref)
    num = np.linalg.norm(got - ref)
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(100.0 * num / den)


def quantize_input(qnet: QuantizedNetwork, x) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != qnet.graph.input_shape:
        raise GraphError(f"input shape {tuple(x.shape)} does not match network input {qnet.graph.input_shape}")
    return QuantizedTensor(quantize_array(x, qnet.h_s_act, qnet.fmt), qnet.fmt, qnet.h_s_act)


def run_quantized(
    qnet: QuantizedNetwork,
    x,
    t: int,
    *,
    nm: int = NM_DEFAULT,
    window_lsb: int = WINDOW_LSB,
    spill_every: int | None = None,
) -> tuple[list[QuantizedTensor], list[LayerRunInfo]]:
    """Execute every layer for one (C, H, W) image; returns all layer outputs."""
    xq = quantize_input(qnet, x)
    outs: list[QuantizedTensor] = []
    infos: list[LayerRunInfo] = []
    for i, layer in enumerate(qnet.graph.layers):
        ins = [xq if s == INPUT else outs[s] for s in layer.inputs]
        q, info = execute_layer_quantized(
            layer,
            ins,
            qnet.fmt,
            t,
            qnet.weights.get(i),
            qnet.biases.get(i),
            nm=nm,
            window_lsb=window_lsb,
            spill_every=spill_every,
        )
        outs.append(q)
        infos.append(info)
    return outs, infos


def infer_quantized(
    qnet: QuantizedNetwork,
    x,
    t: int,
    reference: NetworkGraph | None = None,
    *,
    nm: int = NM_DEFAULT,
    window_lsb: int = WINDOW_LSB,
    spill_every: int | None = None,
) -> tuple[QuantizedTensor, ErrorReport]:
    """Run the quantized network and compare every layer to a float reference.

    ``reference`` is the normalization-merged float network (the default
    is ``qnet``'s own dequantized graph, which isolates datapath error).
    Per-layer errors are in normalized units. ``changed_codes`` is the
    fraction of output codes that differ from the full-width run (None for
    wide-exponent formats whose full width exceeds the array path).
    """
    ref_net = reference if reference is not None else qnet.dequantized_graph()
    ref = infer_fp32(ref_net, x)
    outs, infos = run_quantized(qnet, x, t, nm=nm, window_lsb=window_lsb, spill_every=spill_every)
    full = None
    top = lossless_width(qnet.fmt)
    if t != top and top <= ARRAY_T_MAX:
        full, _ = run_quantized(qnet, x, top, nm=nm, window_lsb=window_lsb, spill_every=spill_every)
    report = ErrorReport(t=t, fmt=qnet.fmt.name)
    for i, (layer, q, info) in enumerate(zip(qnet.graph.layers, outs, infos)):
        got = q.dequantize()
        if full is not None:
            changed = float(np.mean(full[i].codes != q.codes))
        else:
            changed = 0.0 if t == top else None
        report.layers.append(
            LayerError(
                index=i,
                name=layer.name,
                kind=layer.kind,
                rel_l2_pct=relative_l2_pct(got, ref[i]),
                max_abs=float(np.max(np.abs(got - ref[i]))),
                changed_codes=changed,
                lsb_shift=info.lsb_shift,
                saturated_products=info.saturated_products,
                overflow=info.overflow,
            )
        )
    last = report.layers[-1]
    report.output_rel_l2_pct = last.rel_l2_pct
    report.output_max_abs = last.max_abs
    return outs[-1], report
