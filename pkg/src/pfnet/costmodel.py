"""Analytic parameter and multiply-add counts for an :class:`ArchSpec`.

Conventions: a multiply-add counts once; pooling, shift, ReLU, BN and
residual adds cost no MACs; BN holds 2C trainable scalars (running stats are
not parameters).  Deformable pooling pays for its offset predictor and four
multiplies per bilinear sample per channel.  Attention includes both
T x T x D matmuls.  Geometry is traced here independently of the engine so
that the two can be checked against each other.
"""

from __future__ import annotations

import csv
import io
import json
from collections import OrderedDict
from dataclasses import dataclass, field

from .architect import ArchSpec
from .blocks import BlockSpec, deform_spec, se_hidden
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class CostRow:
    name: str
    kind: str
    params: int
    macs: int
    output_shape: tuple


@dataclass
class CostReport:
    spec_name: str
    input_shape: tuple
    rows: list = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def blocks(self) -> "OrderedDict[str, CostRow]":
        """Rows folded to one entry per stem / block / token pool / head."""
        out: OrderedDict[str, CostRow] = OrderedDict()
        for r in self.rows:
            key = _unit(r.name)
            prev = out.get(key)
            if prev is None:
                out[key] = CostRow(key, r.kind, r.params, r.macs, r.output_shape)
            else:
                out[key] = CostRow(key, prev.kind, prev.params + r.params, prev.macs + r.macs, r.output_shape)
        return out

    def summary(self) -> str:
        return f"{self.spec_name}: {fmt_params(self.params)} params / {fmt_macs(self.macs)} MACs at {fmt_shape(self.input_shape)}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "params", "macs", "output_shape"])
        for r in self.rows:
            w.writerow([r.name, r.kind, r.params, r.macs, fmt_shape(r.output_shape)])
        w.writerow(["total", "-", self.params, self.macs, "-"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "spec": self.spec_name,
            "input_shape": list(self.input_shape),
            "params": self.params,
            "macs": self.macs,
            "rows": [
                {"name": r.name, "kind": r.kind, "params": r.params, "macs": r.macs, "output_shape": list(r.output_shape)}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _unit(name):
    head = name.split(".")[0]
    if head in ("stem", "head"):
        return head
    return ".".join(name.split(".")[:2])


def fmt_params(n):
    """Millions with one decimal; thousands below 0.1M."""
    if abs(n) >= 1e5:
        return f"{n / 1e6:.1f}M"
    return f"{n / 1e3:.1f}K" if abs(n) >= 100 else str(n)


def fmt_macs(n):
    """Billions with one decimal; millions below 0.1G."""
    if abs(n) >= 1e8:
        return f"{n / 1e9:.1f}G"
    return f"{n / 1e6:.1f}M" if abs(n) >= 1e5 else str(n)


def fmt_shape(shape):
    return "x".join(str(v) for v in shape)


def rounded(report: CostReport) -> tuple[float, float]:
    """(params in M, MACs in G) rounded to 0.1, the precision used in tables."""
    return round(report.params / 1e6, 1), round(report.macs / 1e9, 1)


# ---------------------------------------------------------------------------
# per-layer formulas


def conv_cost(cin, cout, k, stride, h, w, groups=1, bias=False):
    """(params, macs, (oh, ow)) of a same-padded k x k convolution."""
    oh, ow = (h + 2 * (k // 2) - k) // stride + 1, (w + 2 * (k // 2) - k) // stride + 1
    params = cout * (cin // groups) * k * k + (cout if bias else 0)
    return params, cout * (cin // groups) * k * k * oh * ow, (oh, ow)


def _half(n):
    return (n - 1) // 2 + 1


class _Counter:
    def __init__(self, report):
        self.report = report

    def add(self, name, kind, params, macs, shape):
        self.report.rows.append(CostRow(name, kind, int(params), int(macs), tuple(int(s) for s in shape)))

    def conv(self, name, cin, cout, k, stride, h, w, groups=1, bias=False):
        p, m, (oh, ow) = conv_cost(cin, cout, k, stride, h, w, groups, bias)
        self.add(name, "conv", p, m, (cout, oh, ow))
        return oh, ow

    def bn(self, name, c, h, w):
        self.add(name, "batch_norm", 2 * c, 0, (c, h, w))

    def linear(self, name, fin, fout, tokens=1, shape=None):
        self.add(name, "linear", fin * fout + fout, fin * fout * tokens, shape or (fout,))

    def layer_norm(self, name, d, shape):
        self.add(name, "layer_norm", 2 * d, 0, shape)

    def free(self, name, kind, shape):
        self.add(name, kind, 0, 0, shape)


def _bottleneck(ct: _Counter, name, b: BlockSpec, h, w):
    inner, cin, cout, r = b.inner, b.in_channels, b.out_channels, b.stride
    ct.conv(f"{name}.conv1", cin, inner, 1, 1, h, w)
    ct.bn(f"{name}.bn1", inner, h, w)
    oh, ow = _half(h) if r == 2 else h, _half(w) if r == 2 else w
    if b.kind in ("regular_bottleneck", "inverted_bottleneck"):
        sh, sw, stride = h, w, r
        if b.pre_pool:
            sh, sw, stride = oh, ow, 1
            ct.free(f"{name}.prepool", "avg_pool", (inner, sh, sw))
        if b.spatial_op == "conv3x3":
            ct.conv(f"{name}.conv2", inner, inner, 3, stride, sh, sw)
        elif b.spatial_op == "dwconv3x3":
            ct.conv(f"{name}.conv2", inner, inner, 3, stride, sh, sw, groups=inner)
        elif b.spatial_op == "conv1x1":
            ct.conv(f"{name}.conv2", inner, inner, 1, stride, sh, sw)
        else:
            raise ConfigError(f"no cost rule for {b.spatial_op} in {b.kind}")
        ct.bn(f"{name}.bn2", inner, oh, ow)
    elif b.kind == "shift_block":
        ct.free(f"{name}.shift", "shift", (inner, oh, ow))
    elif b.spatial_op in ("maxpool3", "avgpool3"):
        ct.free(f"{name}.pool", b.spatial_op, (inner, oh, ow))
    elif b.spatial_op in ("deform_max", "deform_avg"):
        d = deform_spec(b)
        k = d.kernel
        ct.conv(f"{name}.offset", inner, d.offset_channels, k, r, h, w, bias=True)
        ct.add(f"{name}.sample", "bilinear_sample", 0, 4 * k * k * inner * oh * ow, (inner, oh, ow))
    else:
        raise ConfigError(f"no cost rule for block {b.kind}/{b.spatial_op}")
    ct.conv(f"{name}.conv3", inner, cout, 1, 1, oh, ow)
    ct.bn(f"{name}.bn3", cout, oh, ow)
    if b.use_se:
        hid = se_hidden(cout)
        ct.linear(f"{name}.se.fc1", cout, hid)
        ct.linear(f"{name}.se.fc2", hid, cout, shape=(cout, 1, 1))
    if b.has_projection:
        ct.conv(f"{name}.shortcut.conv", cin, cout, 1, r, h, w)
        ct.bn(f"{name}.shortcut.bn", cout, oh, ow)
    return oh, ow


def _token_block(ct: _Counter, name, b: BlockSpec, t):
    d = b.in_channels
    shape = (t, d)
    ct.layer_norm(f"{name}.norm1", d, shape)
    if b.kind == "transformer":
        ct.linear(f"{name}.attn.qkv", d, 3 * d, t, (t, 3 * d))
        ct.add(f"{name}.attn.scores", "attention_matmul", 0, t * t * d, (b.heads, t, t))
        ct.add(f"{name}.attn.context", "attention_matmul", 0, t * t * d, shape)
        ct.linear(f"{name}.attn.proj", d, d, t, shape)
    elif b.kind == "efficient_transformer":
        ct.linear(f"{name}.eff.fc1", d, 3 * d, t, (t, 3 * d))
        ct.free(f"{name}.eff.pool", b.spatial_op, (t, 3 * d))
        ct.linear(f"{name}.eff.fc2", 3 * d, d, t, shape)
    else:
        raise ConfigError(f"no cost rule for token block {b.kind}")
    ct.layer_norm(f"{name}.norm2", d, shape)
    hidden = b.mlp_ratio * d
    ct.linear(f"{name}.mlp.fc1", d, hidden, t, (t, hidden))
    ct.linear(f"{name}.mlp.fc2", hidden, d, t, shape)


def count(spec: ArchSpec, input_size: int | tuple | None = None) -> CostReport:
    """Per-layer parameter and MAC breakdown at ``input_size`` (default: the spec's)."""
    c, h, w = spec.input_shape
    if input_size is not None:
        h, w = (input_size, input_size) if isinstance(input_size, int) else tuple(input_size)
    report = CostReport(spec.name, (c, h, w))
    ct = _Counter(report)
    st = spec.stem

    if st.kind == "resnet_stem":
        h, w = ct.conv("stem.conv", c, st.out_channels, 7, 2, h, w)
        ct.bn("stem.bn", st.out_channels, h, w)
        h, w = _half(h), _half(w)
        ct.free("stem.pool", "max_pool", (st.out_channels, h, w))
    elif st.kind == "cifar_stem":
        h, w = ct.conv("stem.conv", c, st.out_channels, 3, 1, h, w)
        ct.bn("stem.bn", st.out_channels, h, w)
    elif st.kind == "patch_embed":
        if h % st.patch or w % st.patch:
            raise ConfigError(f"input {h}x{w} is not divisible by patch {st.patch}")
        h, w = h // st.patch, w // st.patch
        t = h * w
        ct.linear("stem.proj", c * st.patch ** 2, st.out_channels, t, (t, st.out_channels))
        ct.add("stem.pos_embed", "embedding", t * st.out_channels, 0, (t, st.out_channels))
    else:
        raise ConfigError(f"no cost rule for stem {st.kind}")

    for si, stage in enumerate(spec.stages):
        if stage.token_pool:
            d = stage.blocks[0].in_channels
            h, w = ct.conv(f"s{si + 1}.pool.conv", d, d, 3, 2, h, w, groups=d, bias=True)
        for bi, b in enumerate(stage.blocks):
            name = f"s{si + 1}.b{bi + 1}"
            if spec.is_token:
                _token_block(ct, name, b, h * w)
            else:
                h, w = _bottleneck(ct, name, b, h, w)

    hd = spec.head
    if spec.is_token:
        ct.layer_norm("head.norm", hd.in_features, (h * w, hd.in_features))
    ct.free("head.pool", "global_avg_pool", (hd.in_features,))
    ct.linear("head.fc", hd.in_features, hd.num_classes, 1, (hd.num_classes,))
    return report


@dataclass(frozen=True)
class DiffRow:
    name: str
    params_a: int
    params_b: int
    macs_a: int
    macs_b: int

    @property
    def d_params(self):
        return self.params_b - self.params_a

    @property
    def d_macs(self):
        return self.macs_b - self.macs_a


@dataclass
class CostDiff:
    a: CostReport
    b: CostReport
    rows: list

    @property
    def params_change_pct(self) -> float:
        return 100.0 * (self.b.params - self.a.params) / self.a.params

    @property
    def macs_change_pct(self) -> float:
        return 100.0 * (self.b.macs - self.a.macs) / self.a.macs

    def summary(self) -> str:
        return (
            f"{self.a.spec_name} -> {self.b.spec_name}: params {fmt_params(self.a.params)} -> "
            f"{fmt_params(self.b.params)} ({self.params_change_pct:+.1f}%), MACs {fmt_macs(self.a.macs)} -> "
            f"{fmt_macs(self.b.macs)} ({self.macs_change_pct:+.1f}%)"
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["name", "params_a", "params_b", "d_params", "macs_a", "macs_b", "d_macs"])
        for r in self.rows:
            wr.writerow([r.name, r.params_a, r.params_b, r.d_params, r.macs_a, r.macs_b, r.d_macs])
        wr.writerow(["total", self.a.params, self.b.params, self.b.params - self.a.params,
                     self.a.macs, self.b.macs, self.b.macs - self.a.macs])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "a": self.a.spec_name,
            "b": self.b.spec_name,
            "params_change_pct": self.params_change_pct,
            "macs_change_pct": self.macs_change_pct,
            "rows": [
                {"name": r.name, "d_params": r.d_params, "d_macs": r.d_macs} for r in self.rows
            ],
        }


def count_diff(a: ArchSpec, b: ArchSpec, input_size=None) -> CostDiff:
    """Block-aligned cost deltas from ``a`` to ``b``; both must share stage structure."""
    if [s.depth for s in a.stages] != [s.depth for s in b.stages] or a.is_token != b.is_token:
        raise UsageError(f"{a.name} and {b.name} do not share stage structure")
    ra, rb = count(a, input_size), count(b, input_size)
    ba, bb = ra.blocks(), rb.blocks()
    if list(ba) != list(bb):
        raise UsageError(f"{a.name} and {b.name} do not share layer units")
    rows = [DiffRow(k, ba[k].params, bb[k].params, ba[k].macs, bb[k].macs) for k in ba]
    return CostDiff(ra, rb, rows)
