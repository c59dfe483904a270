"""Bench every conv3x3/maxpool3 assignment over the 8 blocks of r26 (or a stratified subsample).

    python demos/replacement_sweep.py [--budget 32] [--out sweep.csv]
"""

import argparse

from pfnet.architect import build_resnet
from pfnet.harness import sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--budget", type=int, default=32, help="number of assignments; 256 runs them all")
    ap.add_argument("--out")
    args = ap.parse_args()
    res = sweep(build_resnet("r26"), ["conv3x3", "maxpool3"], budget=args.budget)
    rows = res.sorted_by("median_ms")
    for r in rows[:5] + [None] + rows[-5:]:
        if r is None:
            print("...")
            continue
        print(f"{r['ops']}  replaced {r['replaced']}  {r['params']:>9d} params  {r['median_ms']:6.2f} ms")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(res.to_csv())


if __name__ == "__main__":
    main()
