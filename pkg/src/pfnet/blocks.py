"""Building blocks: regular, inverted, shift and efficient bottlenecks, the two
transformer blocks, and deformable pooling.

Each block is a pure function ``f(x, params, spec, train)`` over a params dict
produced by :func:`init_block`.  Batch-norm layers are :class:`BN` bundles
whose running statistics live outside the autodiff graph.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import nn_ops as F
from .engine import Parameter, Tensor, rng_init
from .errors import ConfigError, ShapeError
from .nn_ops import BatchNormState, ConvSpec, PoolSpec, ShiftAssignment

BLOCK_KINDS = (
    "regular_bottleneck",
    "inverted_bottleneck",
    "efficient_bottleneck",
    "shift_block",
    "transformer",
    "efficient_transformer",
)

SPATIAL_OPS = (
    "conv3x3",
    "dwconv3x3",
    "maxpool3",
    "avgpool3",
    "shift",
    "deform_max",
    "deform_avg",
    "conv1x1",
    "attention",
)

COMPATIBLE_OPS = {
    "regular_bottleneck": ("conv3x3", "dwconv3x3", "conv1x1"),
    "inverted_bottleneck": ("dwconv3x3",),
    "efficient_bottleneck": ("maxpool3", "avgpool3", "deform_max", "deform_avg"),
    "shift_block": ("shift",),
    "transformer": ("attention",),
    "efficient_transformer": ("maxpool3", "avgpool3"),
}

POOL_OPS = ("maxpool3", "avgpool3", "deform_max", "deform_avg")
TOKEN_KINDS = ("transformer", "efficient_transformer")


def kind_for_op(op: str) -> str:
    """The bottleneck kind that hosts ``op`` in a CNN stage."""
    if op in COMPATIBLE_OPS["regular_bottleneck"]:
        return "regular_bottleneck"
    if op in COMPATIBLE_OPS["efficient_bottleneck"]:
        return "efficient_bottleneck"
    if op == "shift":
        return "shift_block"
    raise ConfigError(f"no bottleneck kind hosts spatial op {op!r}")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    expansion: Fraction = Fraction(1, 4)
    stride: int = 1
    spatial_op: str = "conv3x3"
    use_se: bool = False
    pre_pool: bool = False
    heads: int = 0
    mlp_ratio: int = 4
    projection: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "expansion", Fraction(self.expansion))
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.spatial_op not in COMPATIBLE_OPS[self.kind]:
            raise ConfigError(f"spatial op {self.spatial_op!r} is not valid in a {self.kind}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel widths must be positive")
        inner = self.expansion * self.in_channels
        if inner.denominator != 1 or inner <= 0:
            raise ConfigError(
                f"expansion {self.expansion} x {self.in_channels} channels is not a positive integer"
            )
        if self.kind in TOKEN_KINDS:
            if self.in_channels != self.out_channels or self.stride != 1:
                raise ConfigError("transformer blocks keep width and resolution")
            if self.heads < 1 or self.in_channels % self.heads:
                raise ConfigError(f"{self.heads} heads do not divide token dim {self.in_channels}")
        if self.pre_pool and (self.kind != "regular_bottleneck" or self.stride != 2):
            raise ConfigError("pre_pool only applies to stride-2 regular bottlenecks")
        if self.projection is False and self.needs_projection_shape():
            raise ConfigError(
                f"{self.in_channels}->{self.out_channels} stride {self.stride} needs a projection shortcut"
            )

    @property
    def inner(self) -> int:
        if self.kind == "efficient_transformer":
            return 3 * self.in_channels
        return int(self.expansion * self.in_channels)

    def needs_projection_shape(self):
        return self.stride != 1 or self.in_channels != self.out_channels

    @property
    def has_projection(self) -> bool:
        if self.kind in TOKEN_KINDS or self.kind == "inverted_bottleneck":
            return False
        if self.projection is None:
            return self.needs_projection_shape()
        return self.projection

    @property
    def has_shortcut(self) -> bool:
        if self.kind == "inverted_bottleneck":
            return not self.needs_projection_shape()
        return True

    def with_op(self, op: str) -> "BlockSpec":
        """Same widths and stride, different spatial operator (and host kind)."""
        if op in COMPATIBLE_OPS[self.kind]:
            kind = self.kind
        elif self.kind in TOKEN_KINDS:
            kind = "transformer" if op == "attention" else "efficient_transformer"
        else:
            kind = kind_for_op(op)
        return replace(self, kind=kind, spatial_op=op, pre_pool=self.pre_pool and kind == "regular_bottleneck")


@dataclass(frozen=True)
class DeformSpec:
    kind: str
    in_channels: int
    kernel: int = 3
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ConfigError(f"deformable pool kind must be max or avg, got {self.kind!r}")

    @property
    def offset_channels(self):
        return 2 * self.kernel * self.kernel

    def predictor(self, stride):
        return ConvSpec(self.in_channels, self.offset_channels, self.kernel, stride)


@dataclass
class BN:
    gamma: Parameter
    beta: Parameter
    state: BatchNormState

    def __call__(self, x, train):
        return F.batch_norm(x, self.gamma, self.beta, self.state, train)


# ---------------------------------------------------------------------------
# parameter allocation


class _Allocator:
    def __init__(self, prefix, seed):
        self.prefix = prefix
        self.seed = seed

    def _seed(self, name):
        return (self.seed, zlib.crc32(name.encode()))

    def param(self, local, shape, scheme):
        name = f"{self.prefix}{local}"
        return Parameter(rng_init(shape, scheme, self._seed(name)).data, name=name)

    def conv(self, local, spec: ConvSpec, bias=False, zero=False):
        out = {f"{local}.weight": self.param(f"{local}.weight", spec.weight_shape, "zeros" if zero else "kaiming_fan_out")}
        if bias:
            out[f"{local}.bias"] = self.param(f"{local}.bias", (spec.out_channels,), "zeros")
        return out

    def bn(self, local, channels):
        return {
            local: BN(
                self.param(f"{local}.gamma", (channels,), "ones"),
                self.param(f"{local}.beta", (channels,), "zeros"),
                BatchNormState.fresh(channels),
            )
        }

    def linear(self, local, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return {
            f"{local}.weight": self.param(f"{local}.weight", (fan_out, fan_in), ("uniform", -bound, bound)),
            f"{local}.bias": self.param(f"{local}.bias", (fan_out,), "zeros"),
        }

    def layer_norm(self, local, dim):
        return {
            f"{local}.gamma": self.param(f"{local}.gamma", (dim,), "ones"),
            f"{local}.beta": self.param(f"{local}.beta", (dim,), "zeros"),
        }


def spatial_conv_spec(spec: BlockSpec) -> ConvSpec:
    inner = spec.inner
    stride = 1 if spec.pre_pool else spec.stride
    if spec.spatial_op == "conv3x3":
        return ConvSpec(inner, inner, 3, stride)
    if spec.spatial_op == "dwconv3x3":
        return ConvSpec(inner, inner, 3, stride, groups=inner)
    if spec.spatial_op == "conv1x1":
        return ConvSpec(inner, inner, 1, stride)
    raise ConfigError(f"{spec.spatial_op} is not a convolution")


def deform_spec(spec: BlockSpec) -> DeformSpec:
    return DeformSpec("max" if spec.spatial_op == "deform_max" else "avg", spec.inner)


def se_hidden(channels):
    return max(1, channels // 16)


def init_block(spec: BlockSpec, seed: int = 0, prefix: str = "") -> dict:
    """Allocate every parameter and batch-norm state ``spec`` needs."""
    a = _Allocator(prefix, seed)
    c_in, c_out, inner = spec.in_channels, spec.out_channels, spec.inner
    p: dict = {}
    if spec.kind in TOKEN_KINDS:
        d = c_in
        p.update(a.layer_norm("norm1", d))
        if spec.kind == "transformer":
            p.update(a.linear("attn.qkv", d, 3 * d))
            p.update(a.linear("attn.proj", d, d))
        else:
            p.update(a.linear("eff.fc1", d, 3 * d))
            p.update(a.linear("eff.fc2", 3 * d, d))
        p.update(a.layer_norm("norm2", d))
        p.update(a.linear("mlp.fc1", d, spec.mlp_ratio * d))
        p.update(a.linear("mlp.fc2", spec.mlp_ratio * d, d))
        return p

    p.update(a.conv("conv1", ConvSpec(c_in, inner, 1)))
    p.update(a.bn("bn1", inner))
    if spec.kind in ("regular_bottleneck", "inverted_bottleneck"):
        p.update(a.conv("conv2", spatial_conv_spec(spec)))
        p.update(a.bn("bn2", inner))
    elif spec.spatial_op in ("deform_max", "deform_avg"):
        p.update(a.conv("offset", deform_spec(spec).predictor(spec.stride), bias=True, zero=True))
    p.update(a.conv("conv3", ConvSpec(inner, c_out, 1)))
    p.update(a.bn("bn3", c_out))
    if spec.use_se:
        hidden = se_hidden(c_out)
        p.update(a.linear("se.fc1", c_out, hidden))
        p.update(a.linear("se.fc2", hidden, c_out))
    if spec.has_projection:
        p.update(a.conv("shortcut.conv", ConvSpec(c_in, c_out, 1, spec.stride)))
        p.update(a.bn("shortcut.bn", c_out))
    return p


def iter_parameters(params: dict):
    for value in params.values():
        if isinstance(value, Parameter):
            yield value
        elif isinstance(value, BN):
            yield value.gamma
            yield value.beta


def iter_bn(params: dict, prefix=""):
    for key, value in params.items():
        if isinstance(value, BN):
            yield f"{prefix}{key}", value


# ---------------------------------------------------------------------------
# forward pieces


def _check_input(x, spec):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"{spec.kind} expects (N,{spec.in_channels},H,W), got {x.shape}")


def _shortcut(x, params, spec, train):
    if spec.has_projection:
        s = F.conv2d(x, params["shortcut.conv.weight"], ConvSpec(spec.in_channels, spec.out_channels, 1, spec.stride))
        return params["shortcut.bn"](s, train)
    return x


def squeeze_excite(x, params):
    n, c = x.shape[:2]
    s = F.global_avg_pool(x).reshape(n, c)
    s = F.relu(F.linear(s, params["se.fc1.weight"], params["se.fc1.bias"]))
    s = F.sigmoid(F.linear(s, params["se.fc2.weight"], params["se.fc2.bias"]))
    return x * s.reshape(n, c, 1, 1)


def _finish(x, h, params, spec, train):
    h = params["bn3"](F.conv2d(h, params["conv3.weight"], ConvSpec(spec.inner, spec.out_channels, 1)), train)
    if spec.use_se:
        h = squeeze_excite(h, params)
    if spec.has_shortcut:
        h = h + _shortcut(x, params, spec, train)
    return F.relu(h)


def _reduce(x, params, spec, train):
    h = F.conv2d(x, params["conv1.weight"], ConvSpec(spec.in_channels, spec.inner, 1))
    return F.relu(params["bn1"](h, train))


def downsample_pool():
    return PoolSpec("avg", kernel=2, stride=2, padding=0, ceil_mode=True)


def regular_bottleneck(x, params, spec: BlockSpec, train=False):
    """1x1 reduce, spatial conv, 1x1 expand, residual add, ReLU."""
    if spec.kind != "regular_bottleneck":
        raise ConfigError(f"regular_bottleneck got a {spec.kind} spec")
    _check_input(x, spec)
    h = _reduce(x, params, spec, train)
    if spec.pre_pool:
        h = F.avg_pool2d(h, downsample_pool())
    h = F.conv2d(h, params["conv2.weight"], spatial_conv_spec(spec))
    h = F.relu(params["bn2"](h, train))
    return _finish(x, h, params, spec, train)


def inverted_bottleneck(x, params, spec: BlockSpec, train=False):
    """1x1 expand, depthwise 3x3, 1x1 project; identity shortcut only when shapes allow."""
    if spec.kind != "inverted_bottleneck":
        raise ConfigError(f"inverted_bottleneck got a {spec.kind} spec")
    _check_input(x, spec)
    h = _reduce(x, params, spec, train)
    h = F.conv2d(h, params["conv2.weight"], spatial_conv_spec(spec))
    h = F.relu(params["bn2"](h, train))
    return _finish(x, h, params, spec, train)


def deformable_pool(x_inner, params, dspec: DeformSpec, stride: int = 1):
    """Max or mean over a k x k grid displaced by predicted per-location offsets.

    The predictor is a k x k convolution emitting (dy, dx) pairs per tap; with
    all-zero predictor weights this reproduces plain pooling exactly.
    """
    if x_inner.shape[1] != dspec.in_channels:
        raise ConfigError(
            f"offset predictor reads {dspec.in_channels} channels, feature has {x_inner.shape[1]}"
        )
    k = dspec.kernel
    kk = k * k
    pad = k // 2
    n, c, h, w = x_inner.shape
    pred = F.conv2d(x_inner, params["offset.weight"], dspec.predictor(stride), bias=params["offset.bias"])
    if dspec.scale != 1.0:
        pred = pred * dspec.scale
    oh, ow = pred.shape[2:]
    offsets = pred.reshape(n, kk, 2, oh, ow).transpose(0, 3, 4, 1, 2)

    taps = np.arange(kk)
    base = np.empty((oh, ow, kk, 2), dtype=pred.dtype)
    base[..., 0] = (np.arange(oh)[:, None, None] * stride - pad + taps // k)
    base[..., 1] = (np.arange(ow)[None, :, None] * stride - pad + taps % k)
    coords = (offsets + base).reshape(n, oh * ow * kk, 2)

    cy, cx = coords.data[..., 0], coords.data[..., 1]
    valid = (cy > -1) & (cy < h) & (cx > -1) & (cx < w)
    samples = F.bilinear_sample(x_inner, coords).reshape(n, c, oh, ow, kk)
    return F.window_reduce(samples, valid.reshape(n, 1, oh, ow, kk), dspec.kind)


def pool_op(h, params, spec: BlockSpec):
    op, r = spec.spatial_op, spec.stride
    if op == "maxpool3":
        return F.max_pool2d(h, PoolSpec("max", 3, r, 1), return_indices=False)
    if op == "avgpool3":
        return F.avg_pool2d(h, PoolSpec("avg", 3, r, 1))
    return deformable_pool(h, params, deform_spec(spec), r)


def efficient_bottleneck(x, params, spec: BlockSpec, train=False):
    """1x1 reduce, parameter-free pooling (which also downsamples), 1x1 expand, residual, ReLU."""
    if spec.kind != "efficient_bottleneck":
        raise ConfigError(f"efficient_bottleneck got a {spec.kind} spec")
    _check_input(x, spec)
    h = _reduce(x, params, spec, train)
    h = pool_op(h, params, spec)
    return _finish(x, h, params, spec, train)


def shift_block(x, params, spec: BlockSpec, train=False, assignment: ShiftAssignment | None = None):
    """1x1 expand, per-channel shift (strided by subsampling), 1x1 project, residual."""
    if spec.kind != "shift_block":
        raise ConfigError(f"shift_block got a {spec.kind} spec")
    _check_input(x, spec)
    h = _reduce(x, params, spec, train)
    h = F.shift(h, assignment or ShiftAssignment.grouped(spec.inner))
    h = F.subsample(h, spec.stride)
    return _finish(x, h, params, spec, train)


# ---------------------------------------------------------------------------
# token blocks


def tokens_to_grid(tokens: Tensor, grid) -> Tensor:
    n, t, d = tokens.shape
    hg, wg = grid
    if hg * wg != t:
        raise ConfigError(f"{t} tokens do not fill a {hg}x{wg} grid")
    return tokens.transpose(0, 2, 1).reshape(n, d, hg, wg)


def grid_to_tokens(x: Tensor) -> Tensor:
    n, d, hg, wg = x.shape
    return x.reshape(n, d, hg * wg).transpose(0, 2, 1)


def _check_tokens(x, spec):
    if x.ndim != 3 or x.shape[2] != spec.in_channels:
        raise ShapeError(f"{spec.kind} expects (N,T,{spec.in_channels}) tokens, got {x.shape}")


def _mlp(x, params):
    h = F.layer_norm(x, params["norm2.gamma"], params["norm2.beta"])
    h = F.gelu(F.linear(h, params["mlp.fc1.weight"], params["mlp.fc1.bias"]))
    return x + F.linear(h, params["mlp.fc2.weight"], params["mlp.fc2.bias"])


def transformer_block(x, params, spec: BlockSpec, train=False, grid=None):
    """Pre-norm self-attention and MLP, each with a residual connection."""
    _check_tokens(x, spec)
    h = F.layer_norm(x, params["norm1.gamma"], params["norm1.beta"])
    h = F.multi_head_attention(
        h,
        params["attn.qkv.weight"],
        params["attn.proj.weight"],
        spec.heads,
        params["attn.qkv.bias"],
        params["attn.proj.bias"],
    )
    return _mlp(x + h, params)


def efficient_transformer_block(x, params, spec: BlockSpec, grid, train=False):
    """Attention replaced by D->3D projection, grid max-pool, 3D->D projection.

    ReLU follows the first projection and the pooling; the MLP half is the
    standard one.
    """
    _check_tokens(x, spec)
    if grid is None or grid[0] * grid[1] != x.shape[1]:
        raise ConfigError(f"{x.shape[1]} tokens do not factor into grid {grid}")
    h = F.layer_norm(x, params["norm1.gamma"], params["norm1.beta"])
    h = F.relu(F.linear(h, params["eff.fc1.weight"], params["eff.fc1.bias"]))
    g = tokens_to_grid(h, grid)
    if spec.spatial_op == "maxpool3":
        g = F.max_pool2d(g, PoolSpec("max", 3, 1, 1), return_indices=False)
    else:
        g = F.avg_pool2d(g, PoolSpec("avg", 3, 1, 1))
    h = grid_to_tokens(F.relu(g))
    h = F.linear(h, params["eff.fc2.weight"], params["eff.fc2.bias"])
    return _mlp(x + h, params)


_FORWARD = {
    "regular_bottleneck": regular_bottleneck,
    "inverted_bottleneck": inverted_bottleneck,
    "efficient_bottleneck": efficient_bottleneck,
    "shift_block": shift_block,
}


def block_forward(x, params, spec: BlockSpec, train=False, grid=None):
    if spec.kind == "transformer":
        return transformer_block(x, params, spec, train)
    if spec.kind == "efficient_transformer":
        return efficient_transformer_block(x, params, spec, grid, train)
    return _FORWARD[spec.kind](x, params, spec, train)
