"""Single-thread forward latency of the four r50 stage patterns.

    python demos/latency_ordering.py [--batch 1] [--input 224] [--reps 20]
"""

import argparse

from pfnet.architect import build_resnet
from pfnet.harness import bench_interleaved

PATTERNS = ("EEEE", "hybrid", "E/B", "BBBB")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--input", type=int, default=224)
    ap.add_argument("--reps", type=int, default=20)
    args = ap.parse_args()
    specs = {p: build_resnet("r50", p) for p in PATTERNS}
    res = bench_interleaved(specs, batch=args.batch, reps=args.reps, warmup=5, threads=1, input_size=args.input)
    for p in PATTERNS:
        r = res[p]
        print(f"{p:7s} median {r.median:8.1f} ms  p10 {r.p10:8.1f}  p90 {r.p90:8.1f}  {r.throughput:7.1f} img/s")


if __name__ == "__main__":
    main()
