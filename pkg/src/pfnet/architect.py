"""Whole-network specifications: ResNet-family stage patterns, the hybrid rule,
ViT-style token networks, and the replacement enumerator.

An :class:`ArchSpec` is an immutable value.  It serialises to a versioned JSON
document and renders to a layer table that parses back to an equal spec.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Iterator

from .blocks import COMPATIBLE_OPS, SPATIAL_OPS, TOKEN_KINDS, BlockSpec
from .errors import ConfigError, FormatError

SCHEMA_VERSION = 1

STEM_KINDS = ("resnet_stem", "cifar_stem", "patch_embed")

KIND_TAGS = {
    "regular_bottleneck": "B",
    "efficient_bottleneck": "E",
    "inverted_bottleneck": "I",
    "shift_block": "S",
    "transformer": "T",
    "efficient_transformer": "X",
}


@dataclass(frozen=True)
class StemSpec:
    kind: str = "resnet_stem"
    in_channels: int = 3
    out_channels: int = 64
    patch: int = 16

    def __post_init__(self):
        if self.kind not in STEM_KINDS:
            raise ConfigError(f"unknown stem {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1 or self.patch < 1:
            raise ConfigError("stem sizes must be positive")

    @property
    def reduction(self):
        return {"resnet_stem": 4, "cifar_stem": 1, "patch_embed": self.patch}[self.kind]

    def output_hw(self, h, w):
        if self.kind == "resnet_stem":
            for _ in range(2):  # 7x7/2 conv then 3x3/2 pool, both pad so ceil(h/2)
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            return h, w
        if self.kind == "cifar_stem":
            return h, w
        if h % self.patch or w % self.patch:
            raise ConfigError(f"input {h}x{w} is not divisible by patch {self.patch}")
        return h // self.patch, w // self.patch


@dataclass(frozen=True)
class StageSpec:
    blocks: tuple
    token_pool: bool = False

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ConfigError("a stage needs at least one block")

    @property
    def depth(self):
        return len(self.blocks)

    @property
    def width(self):
        return self.blocks[-1].out_channels

    @property
    def stride(self):
        return self.blocks[0].stride


@dataclass(frozen=True)
class HeadSpec:
    in_features: int
    num_classes: int = 1000
    kind: str = "gap_linear"

    def __post_init__(self):
        if self.kind != "gap_linear":
            raise ConfigError(f"unknown head {self.kind!r}")
        if self.num_classes < 1 or self.in_features < 1:
            raise ConfigError("head sizes must be positive")


@dataclass(frozen=True)
class ArchSpec:
    name: str
    stem: StemSpec
    stages: tuple
    head: HeadSpec
    input_shape: tuple = (3, 224, 224)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    @property
    def is_token(self):
        return self.stem.kind == "patch_embed"

    def iter_blocks(self) -> Iterator[tuple[int, int, BlockSpec]]:
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage.blocks):
                yield si, bi, block

    @property
    def blocks(self) -> list[BlockSpec]:
        return [b for _, _, b in self.iter_blocks()]

    def stage_grids(self):
        """Spatial (or token-grid) size seen by the first block of each stage."""
        c, h, w = self.input_shape
        h, w = self.stem.output_hw(h, w)
        grids = []
        for stage in self.stages:
            if stage.token_pool:
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            grids.append((h, w))
            for block in stage.blocks:
                if block.stride == 2:
                    h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return grids

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if not self.stages:
            raise ConfigError("an architecture needs at least one stage")
        if self.input_shape[0] != self.stem.in_channels:
            raise ConfigError(
                f"input has {self.input_shape[0]} channels, stem expects {self.stem.in_channels}"
            )
        self.stem.output_hw(*self.input_shape[1:])
        width = self.stem.out_channels
        for si, stage in enumerate(self.stages):
            strided = [bi for bi, b in enumerate(stage.blocks) if b.stride == 2]
            if len(strided) > 1 or (strided and strided[0] != 0):
                raise ConfigError(f"stage {si}: only the first block may downsample")
            if stage.token_pool and not self.is_token:
                raise ConfigError(f"stage {si}: token pooling needs a token network")
            for bi, block in enumerate(stage.blocks):
                token_block = block.kind in TOKEN_KINDS
                if token_block != self.is_token:
                    raise ConfigError(f"stage {si} block {bi}: {block.kind} does not fit a {self.stem.kind} network")
                if block.in_channels != width:
                    raise ConfigError(
                        f"stage {si} block {bi}: expects {block.in_channels} channels, receives {width}"
                    )
                width = block.out_channels
        if self.head.in_features != width:
            raise ConfigError(f"head reads {self.head.in_features} features, network emits {width}")
        return self

    def pattern(self) -> str:
        """Per-block kind letters with '|' between stages, e.g. ``BEE|BEEE|...``."""
        return "|".join("".join(KIND_TAGS[b.kind] for b in s.blocks) for s in self.stages)

    def ops(self) -> str:
        return "|".join(",".join(b.spatial_op for b in s.blocks) for s in self.stages)


# ---------------------------------------------------------------------------
# ResNet family


@dataclass(frozen=True)
class DepthConfig:
    depths: tuple
    widths: tuple
    inner_scale: int = 1
    stem: StemSpec = field(default_factory=StemSpec)
    input_shape: tuple = (3, 224, 224)
    num_classes: int = 1000


DEPTH_CONFIGS = {
    "r26": DepthConfig((2, 2, 2, 2), (64, 128, 256, 512), 1, StemSpec("cifar_stem", 3, 16), (3, 32, 32), 10),
    "r50": DepthConfig((3, 4, 6, 3), (256, 512, 1024, 2048)),
    "r101": DepthConfig((3, 4, 23, 3), (256, 512, 1024, 2048)),
    "wrn50_2": DepthConfig((3, 4, 6, 3), (256, 512, 1024, 2048), 2),
    "wrn101_2": DepthConfig((3, 4, 23, 3), (256, 512, 1024, 2048), 2),
}

REGULAR_OPS = COMPATIBLE_OPS["regular_bottleneck"]
EFFICIENT_OPS = COMPATIBLE_OPS["efficient_bottleneck"] + ("shift",)


def _block_tags(pattern: str, cfg: DepthConfig) -> list[list[str]]:
    n = len(cfg.depths)
    if pattern == "hybrid":
        return [["B" if (si > 0 and bi == 0) else "E" for bi in range(d)] for si, d in enumerate(cfg.depths)]
    if pattern == "E/B":
        tags, g = [], 0
        for d in cfg.depths:
            tags.append(["E" if (g + bi) % 2 == 0 else "B" for bi in range(d)])
            g += d
        return tags
    if len(pattern) != n or set(pattern) - {"B", "E"}:
        raise ConfigError(
            f"pattern {pattern!r} must be 'hybrid', 'E/B' or {n} letters from B/E (one per stage)"
        )
    return [[ch] * d for ch, d in zip(pattern, cfg.depths)]


def build_resnet(depth_cfg: str = "r50", pattern: str = "BBBB", spatial_variant: str = "maxpool3",
                 num_classes: int | None = None, input_size: int | None = None) -> ArchSpec:
    """Bottleneck ResNet with a per-stage B/E pattern.

    ``pattern`` is one letter per stage, ``"hybrid"`` (efficient everywhere
    except the stride-2 blocks, which stay regular behind a 2x2 average pool)
    or ``"E/B"`` (block-wise alternation starting with E).  ``spatial_variant``
    picks the operator at E positions when it is parameter-free, or at B
    positions when it is a convolution; the other side keeps its default
    (max-pool for E, 3x3 conv for B).
    """
    if depth_cfg not in DEPTH_CONFIGS:
        raise ConfigError(f"unknown depth config {depth_cfg!r}; choose from {sorted(DEPTH_CONFIGS)}")
    if spatial_variant not in SPATIAL_OPS or spatial_variant == "attention":
        raise ConfigError(f"spatial variant {spatial_variant!r} does not fit a ResNet")
    cfg = DEPTH_CONFIGS[depth_cfg]
    e_op = spatial_variant if spatial_variant in EFFICIENT_OPS else "maxpool3"
    b_op = spatial_variant if spatial_variant in REGULAR_OPS else "conv3x3"
    tags = _block_tags(pattern, cfg)

    stages = []
    width = cfg.stem.out_channels
    for si, (depth, out) in enumerate(zip(cfg.depths, cfg.widths)):
        inner = out // 4 * cfg.inner_scale
        blocks = []
        for bi in range(depth):
            stride = 2 if (si > 0 and bi == 0) else 1
            tag = tags[si][bi]
            if tag == "B":
                kind, op = "regular_bottleneck", b_op
            elif e_op == "shift":
                kind, op = "shift_block", "shift"
            else:
                kind, op = "efficient_bottleneck", e_op
            pre_pool = pattern == "hybrid" and tag == "B" and stride == 2
            blocks.append(
                BlockSpec(kind, width, out, Fraction(inner, width), stride, op, pre_pool=pre_pool)
            )
            width = out
        stages.append(StageSpec(tuple(blocks)))

    shape = cfg.input_shape if input_size is None else (3, input_size, input_size)
    label = pattern.replace("/", "")
    # the variant joins the name only when some block actually uses it
    if any(b.spatial_op == spatial_variant for st in stages for b in st.blocks):
        label += f"-{spatial_variant}"
    return ArchSpec(
        f"{depth_cfg}-{label}",
        cfg.stem,
        tuple(stages),
        HeadSpec(width, num_classes or cfg.num_classes),
        shape,
    )


# ---------------------------------------------------------------------------
# token networks


@dataclass(frozen=True)
class VitConfig:
    patch: int = 16
    dim: int = 384
    stage_depths: tuple = (12,)
    heads: int = 6
    mlp_ratio: int = 4


VIT_CONFIGS = {
    "vit_s_like": VitConfig(),
    # stand-in for a pooling-based ViT: grid halved before stages 2 and 3
    "pit_like": VitConfig(stage_depths=(2, 6, 4)),
}


def build_vit(cfg: str = "vit_s_like", eff_layout: str = "none", input_size: int = 224,
              num_classes: int = 1000, eff_op: str = "maxpool3") -> ArchSpec:
    """Patch-embedded transformer with a GAP head and no class token.

    ``eff_layout`` is ``"none"``, ``"alternate"`` (efficient blocks at odd
    positions) or ``"all"``.
    """
    if cfg not in VIT_CONFIGS:
        raise ConfigError(f"unknown ViT config {cfg!r}; choose from {sorted(VIT_CONFIGS)}")
    if eff_layout not in ("none", "alternate", "all"):
        raise ConfigError(f"eff_layout must be none, alternate or all, got {eff_layout!r}")
    v = VIT_CONFIGS[cfg]
    stages, g = [], 0
    for si, depth in enumerate(v.stage_depths):
        blocks = []
        for _ in range(depth):
            efficient = eff_layout == "all" or (eff_layout == "alternate" and g % 2 == 1)
            kind, op = ("efficient_transformer", eff_op) if efficient else ("transformer", "attention")
            blocks.append(BlockSpec(kind, v.dim, v.dim, 1, 1, op, heads=v.heads, mlp_ratio=v.mlp_ratio))
            g += 1
        stages.append(StageSpec(tuple(blocks), token_pool=si > 0))
    return ArchSpec(
        f"{cfg}-{eff_layout}",
        StemSpec("patch_embed", 3, v.dim, v.patch),
        tuple(stages),
        HeadSpec(v.dim, num_classes),
        (3, input_size, input_size),
    )


def build_single(op: str = "conv3x3", width: int = 32, rho=Fraction(1, 4), input_size: int = 32,
                 num_classes: int = 10, kind: str | None = None, in_channels: int = 3,
                 patch: int = 4, heads: int = 2) -> ArchSpec:
    """Stem, one block, head: the smallest network that exercises ``op``.

    Convolutions are hosted in a regular bottleneck unless ``kind`` says
    otherwise, so every operator sees the same 1x1 reduce/expand and residual.
    Token operators get a patch-embedding stem of width ``width``.
    """
    if kind is None:
        if op == "attention":
            kind = "transformer"
        elif op in REGULAR_OPS:
            kind = "regular_bottleneck"
        elif op == "shift":
            kind = "shift_block"
        else:
            kind = "efficient_bottleneck"
    if kind in TOKEN_KINDS:
        block = BlockSpec(kind, width, width, 1, 1, op, heads=heads)
        stem = StemSpec("patch_embed", in_channels, width, patch)
    else:
        block = BlockSpec(kind, width, width, Fraction(rho), 1, op)
        stem = StemSpec("cifar_stem", in_channels, width)
    return ArchSpec(
        f"single-{kind}-{op}-w{width}-rho{Fraction(rho)}",
        stem,
        (StageSpec((block,)),),
        HeadSpec(width, num_classes),
        (in_channels, input_size, input_size),
    )


PRESETS = tuple(DEPTH_CONFIGS) + tuple(VIT_CONFIGS)


def build_preset(preset: str, pattern: str | None = None, spatial_variant: str = "maxpool3",
                 input_size: int | None = None, num_classes: int | None = None) -> ArchSpec:
    if preset in DEPTH_CONFIGS:
        return build_resnet(preset, pattern or "BBBB", spatial_variant, num_classes, input_size)
    if preset in VIT_CONFIGS:
        return build_vit(preset, pattern or "none", input_size or 224, num_classes or 1000)
    raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")


# ---------------------------------------------------------------------------
# replacement enumeration


def enumerate_replacements(base: ArchSpec, candidate_ops: Iterable[str]) -> Iterator[ArchSpec]:
    """Every assignment of ``candidate_ops`` to the blocks of ``base``, lazily.

    The first block varies slowest.  Widths, strides and expansion ratios stay
    those of ``base``; only the spatial operator (and the block kind that
    hosts it) changes.
    """
    ops = sorted(set(candidate_ops)) if isinstance(candidate_ops, (set, frozenset)) else list(dict.fromkeys(candidate_ops))
    if not ops:
        return
    positions = [(si, bi) for si, bi, _ in base.iter_blocks()]
    for choice in itertools.product(ops, repeat=len(positions)):
        stages = [list(s.blocks) for s in base.stages]
        for (si, bi), op in zip(positions, choice):
            stages[si][bi] = stages[si][bi].with_op(op)
        yield replace(
            base,
            name=f"{base.name}[{''.join(o[0] for o in choice)}]",
            stages=tuple(replace(s, blocks=tuple(b)) for s, b in zip(base.stages, stages)),
        )


def count_replacements(base: ArchSpec, candidate_ops) -> int:
    return len(set(candidate_ops)) ** len(base.blocks)


# ---------------------------------------------------------------------------
# structured documents


def _block_doc(b: BlockSpec) -> dict:
    d = asdict(b)
    d["expansion"] = str(b.expansion)
    return d


def to_document(spec: ArchSpec) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "stem": asdict(spec.stem),
        "stages": [
            {"token_pool": s.token_pool, "blocks": [_block_doc(b) for b in s.blocks]} for s in spec.stages
        ],
        "head": asdict(spec.head),
    }


def _construct(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_document(doc: dict) -> ArchSpec:
    if not isinstance(doc, dict):
        raise FormatError("spec document must be a mapping")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    extra = set(doc) - {"schema_version", "name", "input_shape", "stem", "stages", "head"}
    if extra:
        raise ConfigError(f"unknown spec keys: {sorted(extra)}")
    stages = []
    for si, s in enumerate(doc.get("stages") or []):
        blocks = tuple(
            _construct(BlockSpec, dict(b, expansion=Fraction(b.get("expansion", "1/4"))), f"stage {si} block {bi}")
            for bi, b in enumerate(s.get("blocks", []))
        )
        stages.append(StageSpec(blocks, bool(s.get("token_pool", False))))
    return ArchSpec(
        str(doc.get("name", "unnamed")),
        _construct(StemSpec, doc.get("stem", {}), "stem"),
        tuple(stages),
        _construct(HeadSpec, doc.get("head"), "head"),
        tuple(doc.get("input_shape", (3, 224, 224))),
    )


def dumps(spec: ArchSpec) -> str:
    return json.dumps(to_document(spec), indent=2, sort_keys=False)


def loads(text: str) -> ArchSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"spec is not valid JSON: {exc}") from None
    return from_document(doc)


def save_spec(spec: ArchSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(spec) + "\n")


def load_spec(path) -> ArchSpec:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


_OVERRIDABLE = {
    "name": str,
    "input_size": int,
    "head.num_classes": int,
}


def apply_overrides(spec: ArchSpec, overrides: dict[str, str]) -> ArchSpec:
    """Apply ``key=value`` edits limited to fields that cannot break width chaining."""
    for key, raw in overrides.items():
        if key not in _OVERRIDABLE:
            raise ConfigError(f"cannot override {key!r}; allowed: {', '.join(_OVERRIDABLE)}")
        try:
            value = _OVERRIDABLE[key](raw)
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {key}") from None
        if key == "name":
            spec = replace(spec, name=value)
        elif key == "input_size":
            spec = replace(spec, input_shape=(spec.input_shape[0], value, value))
        else:
            spec = replace(spec, head=replace(spec.head, num_classes=value))
    return spec


# ---------------------------------------------------------------------------
# layer table

_COLUMNS = ("layer", "tag", "kind", "op", "in", "out", "rho", "stride", "flags", "out_shape", "params", "macs")


def _flags(b: BlockSpec) -> str:
    parts = []
    if b.use_se:
        parts.append("se")
    if b.pre_pool:
        parts.append("prepool")
    if b.projection is not None:
        parts.append(f"proj={int(b.projection)}")
    if b.kind in TOKEN_KINDS:
        parts.append(f"heads={b.heads}")
        parts.append(f"mlp={b.mlp_ratio}")
    return ",".join(parts) or "-"


def describe(spec: ArchSpec) -> str:
    """Deterministic layer table: one row per stem, block, token pool and head."""
    from .costmodel import count

    report = count(spec)
    rows = report.blocks()
    c, h, w = spec.input_shape
    st = spec.stem
    lines = [
        f"# arch {spec.name}",
        f"# input {c}x{h}x{w}",
        f"# stem kind={st.kind} in={st.in_channels} out={st.out_channels} patch={st.patch}",
        f"# head kind={spec.head.kind} in={spec.head.in_features} classes={spec.head.num_classes}",
        "\t".join(_COLUMNS),
    ]

    def row(name, tag, kind, op, cin, cout, rho, stride, flags):
        r = rows[name]
        shape = "x".join(str(v) for v in r.output_shape)
        lines.append("\t".join(map(str, (name, tag, kind, op, cin, cout, rho, stride, flags, shape, r.params, r.macs))))

    row("stem", "-", st.kind, "-", st.in_channels, st.out_channels, "-", st.reduction, "-")
    for si, stage in enumerate(spec.stages):
        if stage.token_pool:
            d = stage.blocks[0].in_channels
            row(f"s{si + 1}.pool", "-", "token_pool", "dwconv3x3", d, d, "-", 2, "-")
        for bi, b in enumerate(stage.blocks):
            row(f"s{si + 1}.b{bi + 1}", KIND_TAGS[b.kind], b.kind, b.spatial_op, b.in_channels,
                b.out_channels, b.expansion, b.stride, _flags(b))
    row("head", "-", spec.head.kind, "-", spec.head.in_features, spec.head.num_classes, "-", "-", "-")
    lines.append(f"# total params={report.params} macs={report.macs}")
    return "\n".join(lines) + "\n"


def _parse_kv(text, prefix):
    if not text.startswith(prefix):
        raise FormatError(f"expected a line starting with {prefix!r}, got {text!r}")
    out = {}
    for item in text[len(prefix):].split():
        k, _, v = item.partition("=")
        out[k] = v
    return out


def parse_description(text: str) -> ArchSpec:
    """Inverse of :func:`describe`."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 6 or not lines[0].startswith("# arch "):
        raise FormatError("not a layer table produced by describe()")
    name = lines[0][len("# arch "):]
    shape = tuple(int(v) for v in lines[1][len("# input "):].split("x"))
    s = _parse_kv(lines[2], "# stem ")
    stem = StemSpec(s["kind"], int(s["in"]), int(s["out"]), int(s["patch"]))
    hd = _parse_kv(lines[3], "# head ")
    head = HeadSpec(int(hd["in"]), int(hd["classes"]), hd["kind"])
    if tuple(lines[4].split("\t")) != _COLUMNS:
        raise FormatError("layer table header does not match")

    stages: dict[int, dict] = {}
    for ln in lines[5:]:
        if ln.startswith("#"):
            continue
        cells = dict(zip(_COLUMNS, ln.split("\t")))
        layer = cells["layer"]
        if layer in ("stem", "head"):
            continue
        stage_part, _, pos = layer.partition(".")
        si = int(stage_part[1:]) - 1
        entry = stages.setdefault(si, {"token_pool": False, "blocks": []})
        if pos == "pool":
            entry["token_pool"] = True
            continue
        flags = {}
        if cells["flags"] != "-":
            for f in cells["flags"].split(","):
                k, _, v = f.partition("=")
                flags[k] = v
        entry["blocks"].append(
            BlockSpec(
                cells["kind"],
                int(cells["in"]),
                int(cells["out"]),
                Fraction(cells["rho"]),
                int(cells["stride"]),
                cells["op"],
                use_se="se" in flags,
                pre_pool="prepool" in flags,
                heads=int(flags.get("heads", 0)),
                mlp_ratio=int(flags.get("mlp", 4)),
                projection=bool(int(flags["proj"])) if "proj" in flags else None,
            )
        )
    ordered = [StageSpec(tuple(stages[i]["blocks"]), stages[i]["token_pool"]) for i in sorted(stages)]
    return ArchSpec(name, stem, tuple(ordered), head, shape)
