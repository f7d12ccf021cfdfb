"""Output error of a normalized conv layer versus truncation width t.

Prints one row per t: relative L2 error (%) against the full-width run and
the fraction of output codes that changed.
"""

import argparse

import numpy as np

from phoenix8.datapath import lossless_width
from phoenix8.graph import CONV, INPUT, Layer, NetworkGraph
from phoenix8.inference import relative_l2_pct, run_quantized
from phoenix8.minifloat import MiniFloatFormat
from phoenix8.quantizer import collect_stats, quantize_network


def conv_layer_study(fmt, ic=32, oc=64, k=3, hw=16, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1.0 / np.sqrt(ic * k * k), size=(oc, ic, k, k))
    b = rng.normal(0.0, 0.1, size=oc)
    net = NetworkGraph((ic, hw, hw), [Layer("conv", CONV, (INPUT,), out_channels=oc, kernel=k, pad=k // 2, weight=w, bias=b)])
    x = rng.normal(size=(ic, hw, hw))
    qnet, _ = quantize_network(net, collect_stats(net, x[None]), fmt)
    top = lossless_width(fmt)
    ref = run_quantized(qnet, x, top)[0][-1]
    rows = []
    for t in range(7, top + 1):
        out = run_quantized(qnet, x, t)[0][-1]
        rows.append((t, relative_l2_pct(out.dequantize(), ref.dequantize()), float(np.mean(out.codes != ref.codes))))
    return rows


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--format", default="M4E3")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    fmt = MiniFloatFormat.parse(args.format)
    print("t,rel_l2_pct,changed_codes")
    for t, err, changed in conv_layer_study(fmt, seed=args.seed):
        print(f"{t},{err:.4f},{changed:.4f}")


if __name__ == "__main__":
    main()
