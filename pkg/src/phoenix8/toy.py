"""Small networks for tests, sweeps and the performance model.

``random_toy_network`` builds desk-scale CNNs with Gaussian weights that
always contain one residual add and one concat. ``alexnet_conv`` and
``vgg16_conv`` are shape-only graphs (no weights) of the convolutional
stacks used for cycle modelling.
"""

from __future__ import annotations

import numpy as np

from .graph import ADD, CONCAT, CONV, FC, INPUT, MAXPOOL, RELU, Layer, NetworkGraph


def _conv(rng, name, src, ic, oc, k, pad, stride=1, gain=1.0):
    fan_in = ic * k * k
    w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(oc, ic, k, k))
    b = rng.normal(0.0, 0.1, size=oc)
    return Layer(name, CONV, (src,), out_channels=oc, kernel=k, stride=stride, pad=pad, weight=w, bias=b)


def random_toy_network(
    rng: np.random.Generator,
    n_param_layers: int | None = None,
    input_shape=(4, 8, 8),
    with_fc: bool | None = None,
) -> NetworkGraph:
    """Random conv net with one residual block and one concat block.

    ``n_param_layers`` counts conv/fc layers (2..6). With two, the concat
    joins the residual output with the stem activation directly.
    """
    if n_param_layers is None:
        n_param_layers = int(rng.integers(2, 7))
    if not 2 <= n_param_layers <= 6:
        raise ValueError("n_param_layers must be in 2..6")
    if with_fc is None:
        with_fc = bool(rng.integers(0, 2)) and n_param_layers >= 4
    c = input_shape[0]
    layers: list[Layer] = []

    def add(layer: Layer) -> int:
        layers.append(layer)
        return len(layers) - 1

    width = int(rng.choice([4, 6, 8]))
    cur = add(_conv(rng, "stem", INPUT, c, width, 3, 1))
    cur = add(Layer("stem_relu", RELU, (cur,)))
    stem, stem_width = cur, width
    extra = n_param_layers - 3 - int(with_fc)
    blocks = ["res", "cat" if extra >= 0 else "skipcat"] + ["conv"] * max(extra, 0)
    rng.shuffle(blocks)
    for n, kind in enumerate(blocks):
        if kind == "res":
            branch = add(_conv(rng, f"res{n}", cur, width, width, 3, 1, gain=0.7))
            cur = add(Layer(f"res{n}_add", ADD, (branch, cur)))
            cur = add(Layer(f"res{n}_relu", RELU, (cur,)))
        elif kind == "cat":
            k = int(rng.choice([1, 3]))
            branch = add(_conv(rng, f"cat{n}", cur, width, width // 2, k, k // 2))
            branch = add(Layer(f"cat{n}_relu", RELU, (branch,)))
            cur = add(Layer(f"cat{n}_concat", CONCAT, (branch, cur)))
            width = width + width // 2
        elif kind == "skipcat":
            cur = add(Layer(f"skip{n}_concat", CONCAT, (cur, stem)))
            width = width + stem_width
        else:
            oc = int(rng.choice([4, 8]))
            cur = add(_conv(rng, f"conv{n}", cur, width, oc, 3, 1))
            cur = add(Layer(f"conv{n}_relu", RELU, (cur,)))
            width = oc
    if with_fc:
        h, w = input_shape[1:]
        cur = add(Layer("pool", MAXPOOL, (cur,), kernel=2, stride=2))
        n_in = width * (h // 2) * (w // 2)
        out = 10
        layers.append(
            Layer(
                "fc",
                FC,
                (cur,),
                out_channels=out,
                weight=rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(out, n_in)),
                bias=rng.normal(0.0, 0.1, size=out),
            )
        )
    return NetworkGraph(tuple(input_shape), layers)


def chain_network(rng: np.random.Generator, input_shape=(8, 8, 8), widths=(8, 8), kernel=3) -> NetworkGraph:
    """Plain conv/relu chain, no joins."""
    layers: list[Layer] = []
    cur, ic = INPUT, input_shape[0]
    for n, oc in enumerate(widths):
        layers.append(_conv(rng, f"conv{n}", cur, ic, oc, kernel, kernel // 2))
        cur = len(layers) - 1
        if n < len(widths) - 1:
            layers.append(Layer(f"relu{n}", RELU, (cur,)))
            cur = len(layers) - 1
        ic = oc
    return NetworkGraph(tuple(input_shape), layers)


def _shape_conv(name, src, oc, k, stride=1, pad=0):
    return Layer(name, CONV, (src,), out_channels=oc, kernel=k, stride=stride, pad=pad)


def alexnet_conv() -> NetworkGraph:
    """AlexNet convolution stack (ungrouped), 227x227 RGB input."""
    L = [
        _shape_conv("CONV1", INPUT, 96, 11, stride=4),
        Layer("relu1", RELU, (0,)),
        Layer("pool1", MAXPOOL, (1,), kernel=3, stride=2),
        _shape_conv("CONV2", 2, 256, 5, pad=2),
        Layer("relu2", RELU, (3,)),
        Layer("pool2", MAXPOOL, (4,), kernel=3, stride=2),
        _shape_conv("CONV3", 5, 384, 3, pad=1),
        Layer("relu3", RELU, (6,)),
        _shape_conv("CONV4", 7, 384, 3, pad=1),
        Layer("relu4", RELU, (8,)),
        _shape_conv("CONV5", 9, 256, 3, pad=1),
    ]
    return NetworkGraph((3, 227, 227), L)


def vgg16_conv() -> NetworkGraph:
    """VGG-16 convolution stack, 224x224 RGB input."""
    cfg = [(1, [64, 64]), (2, [128, 128]), (3, [256, 256, 256]), (4, [512, 512, 512]), (5, [512, 512, 512])]
    layers: list[Layer] = []
    cur = INPUT
    for stage, widths in cfg:
        for j, oc in enumerate(widths, start=1):
            layers.append(_shape_conv(f"CONV{stage}-{j}", cur, oc, 3, pad=1))
            layers.append(Layer(f"relu{stage}-{j}", RELU, (len(layers) - 1,)))
            cur = len(layers) - 1
        if stage < 5:
            layers.append(Layer(f"pool{stage}", MAXPOOL, (cur,), kernel=2, stride=2))
            cur = len(layers) - 1
    return NetworkGraph((3, 224, 224), layers)


def vgg_like_toy(min_oc: int = 128) -> NetworkGraph:
    """Shape-only VGG-style net whose output channels are all >= ``min_oc``."""
    layers: list[Layer] = []
    cur = INPUT
    for n, oc in enumerate([min_oc, min_oc, 2 * min_oc, 2 * min_oc]):
        layers.append(_shape_conv(f"conv{n}", cur, oc, 3, pad=1))
        layers.append(Layer(f"relu{n}", RELU, (len(layers) - 1,)))
        cur = len(layers) - 1
        if n % 2 == 1:
            layers.append(Layer(f"pool{n}", MAXPOOL, (cur,), kernel=2, stride=2))
            cur = len(layers) - 1
    return NetworkGraph((64, 32, 32), layers)
