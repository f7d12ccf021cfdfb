"""Speedup and bandwidth versus Np on VGG-16 (or a builtin of choice)."""

import argparse
import logging

from phoenix8.perfmodel import preset, sweep
from phoenix8.toy import alexnet_conv, vgg16_conv, vgg_like_toy

MODELS = {"vgg16": vgg16_conv, "alexnet": alexnet_conv, "vgg-toy": vgg_like_toy}


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--model", choices=sorted(MODELS), default="vgg16")
    p.add_argument("--preset", default="default")
    args = p.parse_args()
    logging.basicConfig(level=logging.ERROR)
    net = MODELS[args.model]()
    results = sweep(net, preset(args.preset), "Np", [2**i for i in range(8)])
    base = results[0][1]
    print("Np,compute_cycles,total_cycles,speedup,utilization_pct,min_bandwidth_GBps")
    for n, r in results:
        print(
            f"{n},{r.compute_cycles},{r.total_cycles:.0f},{base.total_cycles / r.total_cycles:.2f},"
            f"{r.utilization:.1f},{r.min_bandwidth * r.config.clock_hz / 1e9:.1f}"
        )


if __name__ == "__main__":
    main()
