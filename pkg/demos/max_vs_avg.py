"""Max-pool versus avg-pool single-bottleneck accuracy at expansion 1/4, three seeds.

Uses the CIFAR-10 binary release when PFNET_CIFAR10 names its directory,
otherwise a synthetic CIFAR-layout stand-in (whose outcome says nothing
about natural images).
"""

import os
from fractions import Fraction

from pfnet.harness import Dataset, TrainConfig, load_cifar10, max_vs_avg, single_bottleneck_grid
from pfnet.harness.data import standardize, synthetic_cifar_pixels


def data():
    path = os.environ.get("PFNET_CIFAR10")
    if path:
        tr, te = load_cifar10(path)
        return tr.subset(2000), te.subset(1000), "CIFAR-10"
    px, lab = synthetic_cifar_pixels(seed=0, n=3000)
    return Dataset(standardize(px[:2000]), lab[:2000], 10), Dataset(standardize(px[2000:]), lab[2000:], 10), "stand-in"


def main():
    tr, te, name = data()
    res = single_bottleneck_grid("train", rhos=(Fraction(1, 4),), ops=("maxpool3", "avgpool3"), widths=(32,),
                                 seeds=(0, 1, 2), dataset=tr, eval_data=te,
                                 cfg=TrainConfig(epochs=3, batch_size=64, lr=0.05))
    print(f"data: {name}")
    for (width, seed), v in max_vs_avg(res.rows).items():
        print(f"width {width} seed {seed}: max {v['max']:.3f}  avg {v['avg']:.3f}  {'max' if v['max_wins'] else 'avg'} wins")


if __name__ == "__main__":
    main()
