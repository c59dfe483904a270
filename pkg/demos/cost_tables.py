"""Parameter and MAC counts of the ImageNet-scale presets at 224x224."""

from pfnet.architect import build_resnet, build_vit
from pfnet.costmodel import count, count_diff, fmt_macs, fmt_params

ROWS = [
    ("r50", "BBBB", "conv3x3"),
    ("r50", "E/B", "maxpool3"),
    ("r50", "hybrid", "maxpool3"),
    ("r50", "hybrid", "deform_max"),
    ("r50", "EEEE", "maxpool3"),
    ("r101", "BBBB", "conv3x3"),
    ("r101", "hybrid", "maxpool3"),
    ("wrn50_2", "BBBB", "conv3x3"),
    ("wrn50_2", "hybrid", "maxpool3"),
    ("wrn101_2", "BBBB", "conv3x3"),
    ("wrn101_2", "hybrid", "maxpool3"),
]


def main():
    print(f"{'model':28s} {'params':>8s} {'MACs':>8s}")
    for depth, pattern, variant in ROWS:
        rep = count(build_resnet(depth, pattern, variant), 224)
        print(f"{depth + ' ' + pattern + ' ' + variant:28s} {fmt_params(rep.params):>8s} {fmt_macs(rep.macs):>8s}")
    for layout in ("none", "alternate", "all"):
        rep = count(build_vit("vit_s_like", layout))
        print(f"{'vit_s_like ' + layout:28s} {fmt_params(rep.params):>8s} {fmt_macs(rep.macs):>8s}")
    print()
    for depth in ("r50", "r101", "wrn50_2", "wrn101_2"):
        print(count_diff(build_resnet(depth, "BBBB"), build_resnet(depth, "hybrid")).summary())


if __name__ == "__main__":
    main()
