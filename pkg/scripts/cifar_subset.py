"""BaseCNN-2 vs BaseCNN on a CIFAR-10 training subset.

Needs the binary CIFAR-10 release unpacked somewhere:

    python3 scripts/cifar_subset.py data/cifar-10-batches-bin --subset 10000 --epochs 40

Reports test error for both models. Roughly a day of CPU time at the defaults.
"""
import argparse

from crosspath import TrainConfig, build_basecnn_x, train
from crosspath.data import load_cifar10, split

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("cifar_dir")
parser.add_argument("--subset", type=int, default=10000)
parser.add_argument("--epochs", type=int, default=40)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default="runs/cifar_subset")
args = parser.parse_args()

full_train, test = load_cifar10(args.cifar_dir)
tr, _ = split(full_train, args.subset / len(full_train), seed=args.seed)
test = test.with_stats(tr.mean, tr.std)
cfg = TrainConfig(epochs=args.epochs, batch_size=128, lr=0.05,
                  decay_epochs=(int(0.5 * args.epochs), int(0.75 * args.epochs)), seed=args.seed)

for paths in (1, 2):
    model = build_basecnn_x(paths=paths, seed=args.seed)
    report = train(model, tr, test, cfg, out_dir=f"{args.out}/paths{paths}")
    print(f"BaseCNN-{paths}: test error {100 * (1 - report.final.val_acc):.2f}% "
          f"(best {100 * report.best_val_error:.2f}% at epoch {report.best_epoch})", flush=True)
