"""Train a one-block network of every block kind on the two-class blobs problem."""

from fractions import Fraction

from pfnet.architect import build_single
from pfnet.harness import TrainConfig, synth, train

KINDS = [
    ("conv3x3", None, Fraction(1, 2)),
    ("dwconv3x3", "inverted_bottleneck", 4),
    ("maxpool3", None, Fraction(1, 2)),
    ("avgpool3", None, Fraction(1, 2)),
    ("deform_max", None, Fraction(1, 2)),
    ("shift", None, Fraction(1, 2)),
    ("attention", None, 1),
    ("maxpool3", "efficient_transformer", 1),
]


def main():
    data = synth("blobs", 256, seed=0, size=8)
    cfg = TrainConfig(lr=0.05, batch_size=32, weight_decay=0.0, epochs=100, max_steps=200)
    for op, kind, rho in KINDS:
        spec = build_single(op, 16, rho, 8, 2, kind=kind, patch=2)
        rep = train(spec, data, cfg)
        print(f"{spec.name:48s} loss {rep.losses[0]:.3f} -> {rep.epoch_losses[-1]:.4f}  "
              f"train acc {rep.final_accuracy:.3f} after {rep.steps} steps")


if __name__ == "__main__":
    main()
