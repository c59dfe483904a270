"""Small single-block networks, one per block kind, shared by the training tests."""

from fractions import Fraction

from pfnet.architect import build_single
from pfnet.harness import TrainConfig

# kind -> (spatial op, explicit kind, expansion ratio)
TOY_KINDS = {
    "regular_bottleneck": ("conv3x3", None, Fraction(1, 2)),
    "inverted_bottleneck": ("dwconv3x3", "inverted_bottleneck", 4),
    "efficient_bottleneck": ("maxpool3", None, Fraction(1, 2)),
    "efficient_bottleneck_deform": ("deform_max", None, Fraction(1, 2)),
    "shift_block": ("shift", None, Fraction(1, 2)),
    "transformer": ("attention", None, 1),
    "efficient_transformer": ("maxpool3", "efficient_transformer", 1),
}

TOY_CFG = TrainConfig(lr=0.05, batch_size=32, weight_decay=0.0, epochs=100, max_steps=200)


def toy_spec(name, size=8, classes=2, width=16):
    op, kind, rho = TOY_KINDS[name]
    return build_single(op, width, rho, size, classes, kind=kind, patch=2)
