#!/usr/bin/env python3
"""Desk-scale end-to-end run: synth -> train both models -> evaluate.

Produces, under --out-dir:
    dataset/            synthetic triplet PPMs + manifest
    mcae/               trained multi-channel model + loss log
    stanosa/            trained baseline + loss log
    nfmse/              per-triplet NFMSE tables + summary
    hsd/                chroma scatter samples + density SSIM table

Defaults finish in a few minutes on one core.  For a longer run closer to
the full-scale protocol, raise --triplets and --epochs (the full protocol
uses 20,000 triplets and 300 epochs at learning rate 2e-4).
"""

import argparse
import json
import os
import sys

from staininv.cli import main as cli


def run(args):
    rc = cli(args)
    if rc != 0:
        raise SystemExit(rc)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="runs/desk")
    parser.add_argument("--triplets", type=int, default=2000)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--lr", type=float, default=0.001)
    parser.add_argument("--seed", type=int, default=2024)
    args = parser.parse_args()

    out = args.out_dir
    ds = os.path.join(out, "dataset")
    seed = str(args.seed)
    epochs = str(args.epochs)
    lr = str(args.lr)

    run(["synth", "--triplets", str(args.triplets), "--size", str(args.size),
         "--seed", seed, "--out-dir", ds])
    run(["train-mcae", "--dataset", ds, "--epochs", epochs, "--lr", lr,
         "--batch", "32", "--stride", "8", "--seed", seed,
         "--out-dir", os.path.join(out, "mcae")])
    run(["train-stanosa", "--dataset", ds, "--epochs", epochs, "--lr", lr,
         "--seed", seed, "--out-dir", os.path.join(out, "stanosa")])
    run(["eval-nfmse", "--dataset", ds,
         "--model", os.path.join(out, "mcae", "mcae_model.json"),
         "--model", os.path.join(out, "stanosa", "stanosa_model.json"),
         "--seed", seed, "--out-dir", os.path.join(out, "nfmse")])
    run(["eval-hsd", "--dataset", ds, "--pixels", "5000", "--seed", seed,
         "--out-dir", os.path.join(out, "hsd")])

    with open(os.path.join(out, "nfmse", "nfmse_summary.json")) as fh:
        summary = json.load(fh)
    print("\nmean NFMSE on the held-out split:")
    for pair in ("A-B", "A-C", "B-C"):
        ours = summary["models"]["mcae"][pair]["mean"]
        theirs = summary["models"]["stanosa"][pair]["mean"]
        print(f"  {pair}:  mcae {ours:.5f}   stanosa {theirs:.5f}   "
              f"ratio {ours / theirs:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
