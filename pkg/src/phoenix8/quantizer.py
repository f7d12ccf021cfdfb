"""Post-training MaEb quantization: normalize, merge, quantize.

1. Run float inference on calibration images and record per-tensor
   statistics (second moment, or mean/std).
2. Fold each tensor's normalization divisor into the surrounding conv/fc
   weights and biases so the network computes normalized activations.
3. Pick a power-of-two scale per weight tensor and one global activation
   scale by exhaustive MSE search, then encode weights to 8-bit codes and
   biases to 16-bit fixed point.

Parameter-free layers (relu, pooling, residual add, concat) cannot absorb a
rescale, so every tensor connected through them shares one divisor. Groups
containing a join use the pooled second moment of the join outputs; other
groups use their last tensor; a group containing the network input keeps
divisor 1 because the input is fed unnormalized.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import (
    BATCHNORM,
    INPUT,
    JOIN_KINDS,
    PARAM_KINDS,
    GraphError,
    NetworkGraph,
    infer_fp32,
)
from .minifloat import MiniFloatFormat, dequantize_array, quantize_array

log = logging.getLogger(__name__)

SECOND_MOMENT = "second_moment"
MEAN_STD = "mean_std"
STATS_MODES = (SECOND_MOMENT, MEAN_STD)

SCALE_SEARCH_RANGE = range(-10, 10)
BIAS_BITS = 16
# biases live at the real-domain LSB of the truncation window (2^-12)
BIAS_FRAC_BITS = 12
SAMPLE_CAP = 8192


class DegenerateLayerError(ArithmeticError):
    """A tensor whose normalization divisor would be zero."""


@dataclass(frozen=True)
class LayerStats:
    second_moment: float
    mean: float
    std: float
    count: int

    def __post_init__(self) -> None:
        if self.second_moment < 0 or self.std < 0:
            raise ValueError("moments must be non-negative")


@dataclass
class NetworkStats:
    """Statistics for the input (``input``) and every layer output."""

    input: LayerStats
    layers: list[LayerStats]
    mode: str = SECOND_MOMENT
    batch: int = 1
    samples: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __getitem__(self, idx: int) -> LayerStats:
        return self.input if idx == INPUT else self.layers[idx]


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    fmt: MiniFloatFormat
    h_s: int

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes, dtype=np.uint8)
        self.h_s = int(self.h_s)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return dequantize_array(self.codes, self.h_s, self.fmt)


@dataclass
class QuantizedBias:
    values: np.ndarray
    frac_bits: int = BIAS_FRAC_BITS
    saturated: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.int16)

    def dequantize(self) -> np.ndarray:
        return np.ldexp(self.values.astype(np.float64), -self.frac_bits)


@dataclass
class QuantizedNetwork:
    graph: NetworkGraph  # topology only; weight/bias fields are None
    fmt: MiniFloatFormat
    h_s_act: int
    weights: dict[int, QuantizedTensor]
    biases: dict[int, QuantizedBias]
    stats_mode: str = SECOND_MOMENT
    # normalization divisor of every layer output (None when unknown)
    divisors: list[float] | None = None

    @property
    def h_s_w(self) -> dict[int, int]:
        return {i: q.h_s for i, q in sorted(self.weights.items())}

    @property
    def activation_scales(self) -> list[int]:
        # one shared scale by construction
        return [self.h_s_act] * len(self.graph.layers)

    def dequantized_graph(self) -> NetworkGraph:
        """Float graph whose parameters are the dequantized weights/biases."""
        g = self.graph.copy()
        for i, layer in enumerate(g.layers):
            if i in self.weights:
                layer.weight = self.weights[i].dequantize()
                layer.bias = self.biases[i].dequantize()
        return g


@dataclass
class QuantizationReport:
    fmt: str
    stats_mode: str
    batch: int
    h_s_act: int
    activation_mse: float
    layers: list[dict]

    def to_dict(self) -> dict:
        return {
            "format": self.fmt,
            "stats_mode": self.stats_mode,
            "batch": self.batch,
            "h_s_act": self.h_s_act,
            "activation_mse": self.activation_mse,
            "layers": self.layers,
        }


# ----------------------------------------------------------------- stats


def second_moment(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("second moment of an empty tensor")
    return float(np.mean(x * x))


def _tensor_stats(x: np.ndarray) -> LayerStats:
    x = np.asarray(x, dtype=np.float64)
    return LayerStats(
        second_moment=second_moment(x),
        mean=float(x.mean()),
        std=float(x.std()),
        count=int(x.size),
    )


def _subsample(x: np.ndarray, cap: int = SAMPLE_CAP) -> np.ndarray:
    flat = np.asarray(x, dtype=np.float64).ravel()
    if flat.size <= cap:
        return flat.copy()
    idx = np.linspace(0, flat.size - 1, cap).round().astype(np.int64)
    return flat[idx]


def collect_stats(net: NetworkGraph, calib, mode: str = SECOND_MOMENT, batch: int = 1) -> NetworkStats:
    """Float inference over the first ``batch`` calibration images.

    Each tensor's statistics pool every element of every image in the
    batch, so N = OH * OW * OC * images.
    """
    if mode not in STATS_MODES:
        raise ValueError(f"stats mode must be one of {STATS_MODES}")
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim == 3:
        calib = calib[None]
    if calib.shape[0] == 0:
        raise ValueError("empty calibration set")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if calib.shape[0] < batch:
        log.warning("calibration set has %d images, fewer than batch=%d", calib.shape[0], batch)
    images = calib[:batch]
    outs = infer_fp32(net, images)
    samples = {INPUT: _subsample(images)}
    samples.update({i: _subsample(o) for i, o in enumerate(outs)})
    return NetworkStats(
        input=_tensor_stats(images),
        layers=[_tensor_stats(o) for o in outs],
        mode=mode,
        batch=int(images.shape[0]),
        samples=samples,
    )


# ----------------------------------------------------------------- merge


def normalization_groups(net: NetworkGraph) -> dict[int, int]:
    """Map each tensor id to its group root (union-find over param-free layers)."""
    parent = {INPUT: INPUT, **{i: i for i in range(len(net.layers))}}

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, layer in enumerate(net.layers):
        if layer.kind == BATCHNORM:
            raise GraphError(f"{layer.name}: fold batch-norm before quantization")
        if layer.kind in PARAM_KINDS:
            continue
        for src in layer.inputs:
            ra, rb = find(src), find(i)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    return {t: find(t) for t in parent}


def _norm_scale(s: LayerStats, mode: str) -> float:
    return float(np.sqrt(s.second_moment)) if mode == SECOND_MOMENT else s.std


def normalization_divisors(net: NetworkGraph, stats: NetworkStats) -> dict[int, float]:
    """Divisor applied to every tensor (network input included, always 1)."""
    for i, s in enumerate(stats.layers):
        if _norm_scale(s, stats.mode) == 0.0:
            raise DegenerateLayerError(f"layer {net.layers[i].name!r} has an identically zero output")
    groups = normalization_groups(net)
    members: dict[int, list[int]] = {}
    for t, root in groups.items():
        members.setdefault(root, []).append(t)
    divisor: dict[int, float] = {}
    for root, tensors in members.items():
        if INPUT in tensors:
            d = 1.0
        else:
            joins = [t for t in tensors if net.layers[t].kind in JOIN_KINDS]
            if joins:
                if stats.mode == SECOND_MOMENT:
                    d = float(np.sqrt(np.mean([stats[t].second_moment for t in joins])))
                else:
                    d = float(np.mean([stats[t].std for t in joins]))
            else:
                d = _norm_scale(stats[max(tensors)], stats.mode)
        for t in tensors:
            divisor[t] = d
    return divisor


def merge_normalization(net: NetworkGraph, stats: NetworkStats) -> NetworkGraph:
    """Network whose every tensor equals the original divided by its divisor."""
    return apply_divisors(net, normalization_divisors(net, stats))


def apply_divisors(net: NetworkGraph, div) -> NetworkGraph:
    """Fold per-tensor divisors (mapping or per-layer sequence) into conv/fc parameters."""
    if not isinstance(div, dict):
        div = {INPUT: 1.0, **{i: float(d) for i, d in enumerate(div)}}
    merged = net.copy()
    for i, layer in enumerate(merged.layers):
        if not layer.has_params:
            continue
        d_in, d_out = div[layer.inputs[0]], div[i]
        layer.weight = layer.weight * (d_in / d_out)
        if layer.bias is not None:
            layer.bias = layer.bias / d_out
    return merged


# -------------------------------------------------------------- quantize


def quantization_mse(values, h_s: int, fmt: MiniFloatFormat) -> float:
    v = np.asarray(values, dtype=np.float64)
    q = dequantize_array(quantize_array(v, h_s, fmt), h_s, fmt)
    return float(np.mean((q - v) ** 2))


def search_scale(values, fmt: MiniFloatFormat) -> int:
    """Power-of-two scale in [-10, 10) with least quantization MSE.

    Ties keep the smaller exponent; an all-zero tensor returns 0.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("scale search on an empty tensor")
    if not np.any(v):
        return 0
    best, best_mse = 0, np.inf
    for i in SCALE_SEARCH_RANGE:
        mse = quantization_mse(v, i, fmt)
        if mse < best_mse:
            best, best_mse = i, mse
    return best


def quantize_tensor(values, fmt: MiniFloatFormat, h_s: int | None = None) -> QuantizedTensor:
    v = np.asarray(values, dtype=np.float64)
    if h_s is None:
        h_s = search_scale(v, fmt)
    return QuantizedTensor(quantize_array(v, h_s, fmt), fmt, h_s)


def quantize_bias(values, frac_bits: int = BIAS_FRAC_BITS) -> QuantizedBias:
    """Round-to-nearest-even 16-bit two's complement, saturating."""
    v = np.ldexp(np.asarray(values, dtype=np.float64), frac_bits)
    r = np.rint(v)
    lim = 2 ** (BIAS_BITS - 1) - 1
    sat = int(np.count_nonzero(np.abs(r) > lim))
    return QuantizedBias(np.clip(r, -lim, lim).astype(np.int16), frac_bits, sat)


def quantize_network(
    net: NetworkGraph, stats: NetworkStats, fmt: MiniFloatFormat
) -> tuple[QuantizedNetwork, QuantizationReport]:
    div = normalization_divisors(net, stats)
    merged = apply_divisors(net, div)
    pooled = np.concatenate([stats.samples[t] / div[t] for t in sorted(stats.samples)])
    h_s_act = search_scale(pooled, fmt)
    act_mse = quantization_mse(pooled, h_s_act, fmt)

    weights: dict[int, QuantizedTensor] = {}
    biases: dict[int, QuantizedBias] = {}
    rows = []
    for i, layer in enumerate(merged.layers):
        if not layer.has_params:
            continue
        qw = quantize_tensor(layer.weight, fmt)
        bias = layer.bias if layer.bias is not None else np.zeros(layer.out_channels)
        qb = quantize_bias(bias)
        if qb.saturated:
            log.warning("%s: %d bias values saturated at 16 bits", layer.name, qb.saturated)
        weights[i], biases[i] = qw, qb
        rows.append(
            {
                "index": i,
                "name": layer.name,
                "h_s_w": qw.h_s,
                "weight_mse": quantization_mse(layer.weight, qw.h_s, fmt),
                "bias_saturated": qb.saturated,
                "divisor": div[i],
            }
        )
    topo = merged.copy()
    for layer in topo.layers:
        layer.weight = layer.bias = None
    divisors = [div[i] for i in range(len(net.layers))]
    qnet = QuantizedNetwork(topo, fmt, h_s_act, weights, biases, stats.mode, divisors)
    report = QuantizationReport(fmt.name, stats.mode, stats.batch, h_s_act, act_mse, rows)
    return qnet, report


def join_scales_consistent(qnet: QuantizedNetwork) -> bool:
    """Every tensor entering an add/concat carries the same activation scale."""
    scales = qnet.activation_scales
    for i, layer in enumerate(qnet.graph.layers):
        if layer.kind in JOIN_KINDS:
            srcs = {qnet.h_s_act if s == INPUT else scales[s] for s in layer.inputs}
            if len(srcs) != 1:
                return False
    return True
