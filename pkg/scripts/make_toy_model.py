"""Write a random toy network and Gaussian calibration images.

    python scripts/make_toy_model.py --out toy.phnx --calib calib.npy --images 9
"""

import argparse

import numpy as np

from phoenix8.container import save_model
from phoenix8.toy import random_toy_network


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="toy.phnx")
    p.add_argument("--calib", default="calib.npy")
    p.add_argument("--images", type=int, default=9)
    p.add_argument("--layers", type=int, default=None, help="conv/fc layers, 2..6")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    rng = np.random.default_rng(args.seed)
    net = random_toy_network(rng, args.layers)
    save_model(net, args.out)
    x = rng.normal(size=(args.images,) + net.input_shape).astype(np.float32)
    np.save(args.calib, x)
    kinds = [layer.kind for layer in net.layers]
    print(f"{args.out}: {len(kinds)} layers ({', '.join(kinds)}), input {net.input_shape}")
    print(f"{args.calib}: {x.shape}")


if __name__ == "__main__":
    main()
