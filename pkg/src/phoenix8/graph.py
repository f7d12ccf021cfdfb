"""CNN layer graph and float reference inference.

Tensors are channel-first. A single image is ``(C, H, W)``; batched inputs
are ``(N, C, H, W)``. Each layer produces exactly one tensor, addressed by
the layer's index; index ``INPUT`` (-1) is the network input. The last layer
is the network output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

INPUT = -1

CONV = "conv"
FC = "fc"
MAXPOOL = "maxpool"
AVGPOOL = "avgpool"
RELU = "relu"
ADD = "add"
CONCAT = "concat"
BATCHNORM = "batchnorm"

LAYER_KINDS = (CONV, FC, MAXPOOL, AVGPOOL, RELU, ADD, CONCAT, BATCHNORM)
PARAM_KINDS = (CONV, FC)
JOIN_KINDS = (ADD, CONCAT)

Shape = tuple[int, int, int]


class GraphError(ValueError):
    """Malformed topology or shape mismatch."""


@dataclass
class Layer:
    """One node of the graph.

    ``weight`` is ``(OC, IC, K, K)`` for conv and ``(OUT, IN)`` for fc, where
    IN is the flattened size of the input tensor. Batch-norm layers carry
    ``gamma, beta, mean, var`` in ``bn`` and are folded away on load.
    """

    name: str
    kind: str
    inputs: tuple[int, ...]
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    bn: dict[str, np.ndarray] | None = None
    eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"{self.name}: unknown layer kind {self.kind!r}")
        self.inputs = tuple(int(i) for i in self.inputs)

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS


@dataclass
class NetworkGraph:
    input_shape: Shape
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def output_index(self) -> int:
        return len(self.layers) - 1

    def validate(self) -> None:
        for i, layer in enumerate(self.layers):
            if not layer.inputs:
                raise GraphError(f"{layer.name}: no inputs")
            for src in layer.inputs:
                if not (src == INPUT or 0 <= src < i):
                    raise GraphError(
                        f"{layer.name}: input {src} is not an earlier layer (graph must be a DAG in topological order)"
                    )
            n_in = len(layer.inputs)
            if layer.kind == ADD and n_in != 2:
                raise GraphError(f"{layer.name}: add takes exactly two inputs")
            if layer.kind not in JOIN_KINDS and n_in != 1:
                raise GraphError(f"{layer.name}: {layer.kind} takes one input")
        if self.layers:
            self.shapes()

    def shapes(self) -> list[Shape]:
        """Output shape of every layer (raises GraphError on mismatch)."""
        out: list[Shape] = []

        def shape_of(idx: int) -> Shape:
            return self.input_shape if idx == INPUT else out[idx]

        for layer in self.layers:
            ins = [shape_of(i) for i in layer.inputs]
            out.append(_layer_shape(layer, ins))
        return out

    def consumers(self) -> dict[int, list[int]]:
        users: dict[int, list[int]] = {INPUT: []}
        for i in range(len(self.layers)):
            users[i] = []
        for i, layer in enumerate(self.layers):
            for src in layer.inputs:
                users[src].append(i)
        return users

    def copy(self) -> "NetworkGraph":
        layers = []
        for layer in self.layers:
            layers.append(
                replace(
                    layer,
                    weight=None if layer.weight is None else layer.weight.copy(),
                    bias=None if layer.bias is None else layer.bias.copy(),
                    bn=None if layer.bn is None else {k: v.copy() for k, v in layer.bn.items()},
                )
            )
        return NetworkGraph(self.input_shape, layers)

    def mac_count(self) -> int:
        """Multiply-accumulates of all conv/fc layers for one image."""
        shapes = self.shapes()
        total = 0
        for i, layer in enumerate(self.layers):
            if layer.kind == CONV:
                ic = self._in_shape(layer, shapes)[0]
                oc, oh, ow = shapes[i]
                total += oc * oh * ow * ic * layer.kernel**2
            elif layer.kind == FC:
                total += shapes[i][0] * int(np.prod(self._in_shape(layer, shapes)))
        return total

    def _in_shape(self, layer: Layer, shapes: list[Shape]) -> Shape:
        src = layer.inputs[0]
        return self.input_shape if src == INPUT else shapes[src]

    def input_shape_of(self, index: int) -> Shape:
        return self._in_shape(self.layers[index], self.shapes())


def _pool_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _layer_shape(layer: Layer, ins: list[Shape]) -> Shape:
    kind = layer.kind
    if kind in (RELU, BATCHNORM):
        return ins[0]
    if kind == ADD:
        if ins[0] != ins[1]:
            raise GraphError(f"{layer.name}: residual operands differ {ins[0]} vs {ins[1]}")
        return ins[0]
    if kind == CONCAT:
        hw = {s[1:] for s in ins}
        if len(hw) != 1:
            raise GraphError(f"{layer.name}: concat operands differ spatially {ins}")
        return (sum(s[0] for s in ins), *ins[0][1:])
    c, h, w = ins[0]
    if kind == FC:
        if layer.weight is not None and layer.weight.shape != (layer.out_channels, c * h * w):
            raise GraphError(f"{layer.name}: fc weight {layer.weight.shape} vs input {ins[0]}")
        return (layer.out_channels, 1, 1)
    oh = _pool_out(h, layer.kernel, layer.stride, layer.pad)
    ow = _pool_out(w, layer.kernel, layer.stride, layer.pad)
    if oh < 1 or ow < 1:
        raise GraphError(f"{layer.name}: kernel {layer.kernel} larger than input {ins[0]}")
    if kind == CONV:
        k = layer.kernel
        if layer.weight is not None and layer.weight.shape != (layer.out_channels, c, k, k):
            raise GraphError(f"{layer.name}: conv weight {layer.weight.shape} vs input channels {c}")
        return (layer.out_channels, oh, ow)
    return (c, oh, ow)


# ------------------------------------------------------------ reference ops


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, stride: int, pad: int) -> np.ndarray:
    """Direct NCHW convolution via sliding windows."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = weight.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, weight, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def pool2d(x: np.ndarray, k: int, stride: int, pad: int, mode: str) -> np.ndarray:
    if pad:
        fill = -np.inf if mode == MAXPOOL else 0.0
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    if mode == MAXPOOL:
        return win.max(axis=(-2, -1))
    return win.mean(axis=(-2, -1))


def run_layer(layer: Layer, ins: Sequence[np.ndarray]) -> np.ndarray:
    kind = layer.kind
    x = ins[0]
    if kind == CONV:
        return conv2d(x, layer.weight, layer.bias, layer.stride, layer.pad)
    if kind == FC:
        flat = x.reshape(x.shape[0], -1)
        out = flat @ layer.weight.T
        if layer.bias is not None:
            out = out + layer.bias
        return out[:, :, None, None]
    if kind in (MAXPOOL, AVGPOOL):
        return pool2d(x, layer.kernel, layer.stride, layer.pad, kind)
    if kind == RELU:
        return np.maximum(x, 0)
    if kind == ADD:
        return ins[0] + ins[1]
    if kind == CONCAT:
        return np.concatenate(list(ins), axis=1)
    if kind == BATCHNORM:
        p = layer.bn
        scale = p["gamma"] / np.sqrt(p["var"] + layer.eps)
        return (x - p["mean"][None, :, None, None]) * scale[None, :, None, None] + p["beta"][None, :, None, None]
    raise GraphError(f"unsupported layer kind {kind}")


def infer_fp32(net: NetworkGraph, x: np.ndarray, dtype=np.float64) -> list[np.ndarray]:
    """Float forward pass returning every layer's output.

    ``x`` may be ``(C, H, W)`` or ``(N, C, H, W)``; outputs keep the batch
    axis only when the input had one. float64 is the default accumulation
    type so reference comparisons are not limited by the reference itself.
    """
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != net.input_shape:
        raise GraphError(f"input shape {tuple(x.shape[1:])} does not match network input {net.input_shape}")
    outs: list[np.ndarray] = []
    for layer in net.layers:
        ins = [x if src == INPUT else outs[src] for src in layer.inputs]
        outs.append(run_layer(layer, ins).astype(dtype, copy=False))
    return [o[0] for o in outs] if single else outs


# --------------------------------------------------------------- BN folding


def fold_batchnorm(net: NetworkGraph) -> NetworkGraph:
    """Fold every batch-norm layer into the conv (or fc) that feeds it."""
    if not any(layer.kind == BATCHNORM for layer in net.layers):
        return net
    net = net.copy()
    users = net.consumers()
    keep: list[int] = []
    remap: dict[int, int] = {INPUT: INPUT}
    for i, layer in enumerate(net.layers):
        if layer.kind != BATCHNORM:
            remap[i] = len(keep)
            keep.append(i)
            continue
        src = layer.inputs[0]
        prev = net.layers[src] if src != INPUT else None
        if prev is None or not prev.has_params or users[src] != [i]:
            raise GraphError(f"{layer.name}: batch-norm must directly follow a conv/fc used only by it")
        p = layer.bn
        scale = p["gamma"] / np.sqrt(p["var"] + layer.eps)
        w = prev.weight
        prev.weight = (w * scale.reshape((-1,) + (1,) * (w.ndim - 1))).astype(w.dtype)
        b = prev.bias if prev.bias is not None else np.zeros(w.shape[0], dtype=w.dtype)
        prev.bias = ((b - p["mean"]) * scale + p["beta"]).astype(w.dtype)
        remap[i] = remap[src]
        log.debug("folded %s into %s", layer.name, prev.name)
    layers = []
    for i in keep:
        layer = net.layers[i]
        layer.inputs = tuple(remap[s] for s in layer.inputs)
        layers.append(layer)
    return NetworkGraph(net.input_shape, layers)
