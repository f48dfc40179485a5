"""Print parameter totals for BaseCNN-X under each routing mode."""
from crosspath import build_basecnn_x, count_parameters

MODES = ("adaptive", "fixed-stitch", "no-cross")

print(f"{'paths':>5}  " + "  ".join(f"{m:>14}" for m in MODES))
for paths in (1, 2, 3, 4):
    totals = [count_parameters(build_basecnn_x(paths=paths, mode=m))[0] for m in MODES]
    print(f"{paths:>5}  " + "  ".join(f"{t:>14,}" for t in totals))
