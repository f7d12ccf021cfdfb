"""Binary model containers.

fp32 model ("PHNX")::

    magic "PHNX" | u16 version | topology | params

quantized model ("PHNQ")::

    magic "PHNQ" | u16 version | u8 len + format name | i8 h_s_act
    | u8 stats mode | topology | per-layer quantized params

topology::

    u32 C, H, W | u32 n_layers | n x (u32 record length | record)
    record: u8 name length | name | u8 kind | u8 n_inputs | n x i32 input
            | u32 out_channels | u16 kernel | u16 stride | u16 pad
            | u8 flags (1 weight, 2 bias, 4 batch-norm) | f32 eps

fp32 params, for each layer in order, present blocks only: weight and bias
as u32 count + little-endian f32 values; batch-norm as four such arrays
(gamma, beta, mean, var).

quantized params: u32 count, then per layer: u32 layer index | i8 h_s_w
| u32 n codes | codes | u8 bias frac_bits | u32 n biases | i16 LE biases.
A trailing normalization section (u8 present | n_layers x f64 divisor) lets
the float reference be normalized the same way at inference time.

Everything is little-endian; weight shapes follow from the topology.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .graph import FC, LAYER_KINDS, GraphError, Layer, NetworkGraph, fold_batchnorm
from .minifloat import MiniFloatFormat
from .quantizer import STATS_MODES, QuantizedBias, QuantizedNetwork, QuantizedTensor

FP32_MAGIC = b"PHNX"
QUANT_MAGIC = b"PHNQ"
VERSION = 1

_HAS_W, _HAS_B, _HAS_BN = 1, 2, 4
_BN_KEYS = ("gamma", "beta", "mean", "var")


class ContainerError(ValueError):
    """Malformed container; carries the byte offset and the section being read."""

    def __init__(self, message: str, offset: int, section: str):
        super().__init__(f"{message} (section {section!r}, byte offset {offset})")
        self.offset = offset
        self.section = section


class _Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *vals) -> None:
        self.parts.append(struct.pack("<" + fmt, *vals))

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        if len(b) > 255:
            raise ValueError(f"name too long: {s!r}")
        self.pack("B", len(b))
        self.raw(b)

    def f32_array(self, a) -> None:
        a = np.ascontiguousarray(a, dtype="<f4").ravel()
        self.pack("I", a.size)
        self.raw(a.tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0
        self.section = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated: need {n} bytes, have {len(self.data) - self.pos}", self.pos, self.section)
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def string(self) -> str:
        n = self.unpack("B")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError("invalid utf-8 name", self.pos - n, self.section) from None

    def f32_array(self) -> np.ndarray:
        n = self.unpack("I")
        return np.frombuffer(self.take(4 * n), dtype="<f4").copy()

    def fail(self, message: str) -> ContainerError:
        return ContainerError(message, self.pos, self.section)


# --------------------------------------------------------------- topology


def _write_topology(w: _Writer, net: NetworkGraph, with_params: bool) -> None:
    w.pack("3I", *net.input_shape)
    w.pack("I", len(net.layers))
    for layer in net.layers:
        r = _Writer()
        r.string(layer.name)
        r.pack("B", LAYER_KINDS.index(layer.kind))
        r.pack("B", len(layer.inputs))
        for src in layer.inputs:
            r.pack("i", src)
        flags = 0
        if with_params:
            flags |= _HAS_W if layer.weight is not None else 0
            flags |= _HAS_B if layer.bias is not None else 0
            flags |= _HAS_BN if layer.bn is not None else 0
        r.pack("IHHHBf", layer.out_channels, layer.kernel, layer.stride, layer.pad, flags, layer.eps)
        body = r.getvalue()
        w.pack("I", len(body))
        w.raw(body)


def _read_topology(r: _Reader) -> tuple[tuple[int, int, int], list[Layer], list[int]]:
    r.section = "topology"
    shape = r.unpack("3I")
    n = r.unpack("I")
    layers, flags = [], []
    for i in range(n):
        r.section = f"layer record {i}"
        size = r.unpack("I")
        end = r.pos + size
        name = r.string()
        kind_id = r.unpack("B")
        if kind_id >= len(LAYER_KINDS):
            raise r.fail(f"unknown layer kind id {kind_id}")
        n_in = r.unpack("B")
        inputs = tuple(r.unpack("i") for _ in range(n_in))
        oc, k, s, p, fl, eps = r.unpack("IHHHBf")
        if r.pos != end:
            raise r.fail(f"record length {size} does not match contents")
        layers.append(Layer(name, LAYER_KINDS[kind_id], inputs, oc, k, s, p, eps=float(eps)))
        flags.append(fl)
    return shape, layers, flags


def _make_graph(r: _Reader, shape, layers) -> NetworkGraph:
    try:
        return NetworkGraph(shape, layers)
    except GraphError as e:
        raise r.fail(f"invalid topology: {e}") from None


# ------------------------------------------------------------------ fp32


def model_to_bytes(net: NetworkGraph) -> bytes:
    w = _Writer()
    w.raw(FP32_MAGIC)
    w.pack("H", VERSION)
    _write_topology(w, net, with_params=True)
    for layer in net.layers:
        if layer.weight is not None:
            w.f32_array(layer.weight)
        if layer.bias is not None:
            w.f32_array(layer.bias)
        if layer.bn is not None:
            for key in _BN_KEYS:
                w.f32_array(layer.bn[key])
    return w.getvalue()


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise ContainerError(f"bad magic {got!r}, expected {magic!r}", 0, "header")
    version = r.unpack("H")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}", 4, "header")


def model_from_bytes(data: bytes, fold_bn: bool = True) -> NetworkGraph:
    r = _Reader(data)
    _check_header(r, FP32_MAGIC)
    shape, layers, flags = _read_topology(r)
    # weight shapes need input shapes, which need the topology only
    topo = _make_graph(r, shape, [Layer(la.name, la.kind, la.inputs, la.out_channels, la.kernel, la.stride, la.pad) for la in layers])
    shapes = topo.shapes()
    for i, (layer, fl) in enumerate(zip(layers, flags)):
        r.section = f"params of {layer.name}"
        if fl & _HAS_W:
            a = r.f32_array()
            src = layer.inputs[0]
            c, h, wd = topo.input_shape if src < 0 else shapes[src]
            want = (layer.out_channels, c * h * wd) if layer.kind == FC else (layer.out_channels, c, layer.kernel, layer.kernel)
            if a.size != int(np.prod(want)):
                raise r.fail(f"weight size {a.size} does not match shape {want}")
            layer.weight = a.reshape(want)
        if fl & _HAS_B:
            layer.bias = r.f32_array()
        if fl & _HAS_BN:
            layer.bn = {key: r.f32_array() for key in _BN_KEYS}
    if r.pos != len(data):
        raise r.fail(f"{len(data) - r.pos} trailing bytes")
    net = _make_graph(r, shape, layers)
    return fold_batchnorm(net) if fold_bn else net


# ------------------------------------------------------------- quantized


def qmodel_to_bytes(q: QuantizedNetwork) -> bytes:
    w = _Writer()
    w.raw(QUANT_MAGIC)
    w.pack("H", VERSION)
    w.string(q.fmt.name)
    w.pack("b", q.h_s_act)
    w.pack("B", STATS_MODES.index(q.stats_mode))
    _write_topology(w, q.graph, with_params=False)
    w.pack("I", len(q.weights))
    for i in sorted(q.weights):
        qt, qb = q.weights[i], q.biases[i]
        w.pack("Ib", i, qt.h_s)
        w.pack("I", qt.codes.size)
        w.raw(np.ascontiguousarray(qt.codes, dtype=np.uint8).tobytes())
        w.pack("B", qb.frac_bits)
        w.pack("I", qb.values.size)
        w.raw(np.ascontiguousarray(qb.values, dtype="<i2").tobytes())
    if q.divisors is None:
        w.pack("B", 0)
    else:
        w.pack("B", 1)
        w.raw(np.asarray(q.divisors, dtype="<f8").tobytes())
    return w.getvalue()


def qmodel_from_bytes(data: bytes) -> QuantizedNetwork:
    r = _Reader(data)
    _check_header(r, QUANT_MAGIC)
    r.section = "format"
    name = r.string()
    try:
        fmt = MiniFloatFormat.parse(name)
    except ValueError as e:
        raise r.fail(str(e)) from None
    h_s_act = r.unpack("b")
    mode_id = r.unpack("B")
    if mode_id >= len(STATS_MODES):
        raise r.fail(f"unknown stats mode id {mode_id}")
    shape, layers, _ = _read_topology(r)
    net = _make_graph(r, shape, layers)
    shapes = net.shapes()
    r.section = "weights"
    n = r.unpack("I")
    weights, biases = {}, {}
    for _ in range(n):
        idx, h = r.unpack("Ib")
        if not (0 <= idx < len(layers)) or not layers[idx].has_params or idx in weights:
            raise r.fail(f"bad parameter layer index {idx}")
        layer = layers[idx]
        r.section = f"weights of {layer.name}"
        src = layer.inputs[0]
        c, hh, ww = net.input_shape if src < 0 else shapes[src]
        want = (layer.out_channels, c * hh * ww) if layer.kind == FC else (layer.out_channels, c, layer.kernel, layer.kernel)
        count = r.unpack("I")
        if count != int(np.prod(want)):
            raise r.fail(f"code count {count} does not match shape {want}")
        codes = np.frombuffer(r.take(count), dtype=np.uint8).reshape(want).copy()
        r.section = f"biases of {layer.name}"
        frac = r.unpack("B")
        nb = r.unpack("I")
        if nb != layer.out_channels:
            raise r.fail(f"bias count {nb} does not match {layer.out_channels} outputs")
        vals = np.frombuffer(r.take(2 * nb), dtype="<i2").astype(np.int16)
        weights[idx] = QuantizedTensor(codes, fmt, h)
        biases[idx] = QuantizedBias(vals, frac)
    missing = [la.name for i, la in enumerate(layers) if la.has_params and i not in weights]
    if missing:
        raise ContainerError(f"no parameters for {missing}", r.pos, f"weights of {missing[0]}")
    r.section = "normalization"
    divisors = None
    if r.unpack("B"):
        divisors = np.frombuffer(r.take(8 * len(layers)), dtype="<f8").tolist()
    if r.pos != len(data):
        raise r.fail(f"{len(data) - r.pos} trailing bytes")
    return QuantizedNetwork(net, fmt, h_s_act, weights, biases, STATS_MODES[mode_id], divisors)


# ------------------------------------------------------------------ files


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def save_model(net: NetworkGraph, path) -> None:
    atomic_write_bytes(path, model_to_bytes(net))


def load_model(path, fold_bn: bool = True) -> NetworkGraph:
    return model_from_bytes(Path(path).read_bytes(), fold_bn)


def save_qmodel(q: QuantizedNetwork, path) -> None:
    atomic_write_bytes(path, qmodel_to_bytes(q))


def load_qmodel(path) -> QuantizedNetwork:
    return qmodel_from_bytes(Path(path).read_bytes())
