"""Inference latency across generator sizes (single thread). Numbers are for regression tracking only."""

import argparse
import json
import time

import numpy as np
from threadpoolctl import threadpool_limits

from lidarsim import pix2pix

SIZES = [(64, 8, 4), (128, 16, 5), (256, 16, 6), (256, 64, 8)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--skip-large", action="store_true", help="leave out the full-size generator")
    args = ap.parse_args()
    rows = SIZES[:-1] if args.skip_large else SIZES
    with threadpool_limits(1):
        for size, base, depth in rows:
            gen = pix2pix.build_generator(pix2pix.UNetConfig(size, base, depth), seed=0)
            x = np.random.default_rng(0).random((size, size, 3))
            pix2pix.infer(gen, x)
            ms = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                pix2pix.infer(gen, x)
                ms.append(1e3 * (time.perf_counter() - t0))
            print(json.dumps({"input_size": size, "base_channels": base, "depth": depth,
                              "median_ms": round(float(np.median(ms)), 2)}), flush=True)


if __name__ == "__main__":
    main()
