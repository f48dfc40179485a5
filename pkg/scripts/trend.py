"""Adaptive vs fixed-stitch vs no-cross on the synthetic two-context task.

Same recipe as the acceptance suite. Prints per-seed validation accuracy and
medians, and optionally writes the full per-epoch history as JSON.

    python3 scripts/trend.py --seeds 0 1 2 --out trend.json
"""
import argparse
import json
import time

import numpy as np

from crosspath import TrainConfig, build_basecnn_x, train
from crosspath.data import SyntheticContextSpec, generate_synthetic, split

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
parser.add_argument("--modes", nargs="+", default=["adaptive", "fixed-stitch", "no-cross"])
parser.add_argument("--epochs", type=int, default=15)
parser.add_argument("--lr", type=float, default=0.02)
parser.add_argument("--noise", type=float, default=0.35)
parser.add_argument("--size", type=int, default=12)
parser.add_argument("--out", help="write per-epoch history here")
args = parser.parse_args()

data = generate_synthetic(SyntheticContextSpec(per_cell=125, size=args.size, noise=args.noise, seed=0))
tr, va = split(data, 0.8, seed=0)
decay = (int(0.6 * args.epochs), int(0.85 * args.epochs))

history = {}
for mode in args.modes:
    accs = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        model = build_basecnn_x(paths=2, classes=data.classes, input_shape=tr.image_shape, mode=mode, seed=seed)
        cfg = TrainConfig(epochs=args.epochs, batch_size=32, lr=args.lr, decay_epochs=decay, seed=seed,
                          shift_pixels=1, mode=mode)
        report = train(model, tr, va, cfg)
        accs.append(report.final.val_acc)
        history[f"{mode}/{seed}"] = [e.val_acc for e in report.epochs]
        print(f"{mode:13s} seed {seed}: val acc {accs[-1]:.3f}  ({time.perf_counter() - t0:.0f}s)", flush=True)
    print(f"{mode:13s} median {np.median(accs):.3f}")

if args.out:
    with open(args.out, "w") as fh:
        json.dump(history, fh, indent=1)
