"""Fit the desk-scale generator to one synthetic pair and report inferred L1 as training goes.

    python3 scripts/overfit_single_pair.py --steps 2000 --dropout 0.0
"""

import argparse
import tempfile
import time

import numpy as np

from lidarsim import dataset, fixtures, pix2pix


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--dropout", type=float, default=0.0)
    ap.add_argument("--kind", default="street-box")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--every", type=int, default=250, help="print the training loss every N steps")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        manifest = dataset.load_manifest(fixtures.synth_fixture(args.kind, tmp, seed=args.seed, n_frames=1))
        s = dataset.build_sample(manifest.frames[0], manifest.load_calibration(), "combined", manifest.blur, 64)

    unet = pix2pix.UNetConfig.desk(dropout_rate=args.dropout)
    cfg = pix2pix.TrainConfig(lr=args.lr, steps=args.steps, checkpoint_every=args.steps, seed=args.seed)
    t0 = time.perf_counter()
    print("step  seconds  train_l1 (network scale [-1, 1])")

    def on_step(rec):
        if rec["step"] % args.every == 0:
            print(f"{rec['step']:5d}  {time.perf_counter() - t0:7.1f}  {rec['g_l1']:.4f}", flush=True)

    gen = pix2pix.train([(s.input, s.target)], cfg, unet, pix2pix.PatchGANConfig.desk(), on_step=on_step).generator
    l1 = np.abs(pix2pix.infer(gen, s.input) - s.target).mean()
    print(f"inferred L1 after {args.steps} steps: {l1:.4f} ({time.perf_counter() - t0:.1f}s)")

if __name__ == "__main__":
    main()
