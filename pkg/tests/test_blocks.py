from fractions import Fraction

import numpy as np
import pytest
from scipy.special import erf

import pfnet.nn_ops as F
from pfnet.blocks import (
    BLOCK_KINDS, COMPATIBLE_OPS, BlockSpec, DeformSpec, block_forward, deformable_pool, grid_to_tokens,
    init_block, iter_parameters, kind_for_op, tokens_to_grid,
)
from pfnet.costmodel import count
from pfnet.architect import build_single
from pfnet.engine import Tensor, op_log
from pfnet.errors import ConfigError, ShapeError
from pfnet.nn_ops import ConvSpec, PoolSpec


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def n_params(params):
    return sum(p.data.size for p in iter_parameters(params))


def randomise(params, seed=1, scale=0.3):
    """Random weights and BN affine terms, with BN running stats made non-trivial."""
    rng = np.random.default_rng(seed)
    for p in iter_parameters(params):
        p.data[...] = (scale * rng.standard_normal(p.shape)).astype(np.float32)
    for key, bn in params.items():
        if hasattr(bn, "state"):
            c = bn.state.running_mean.shape[0]
            bn.state.running_mean[...] = rng.standard_normal(c) * 0.1
            bn.state.running_var[...] = rng.uniform(0.5, 1.5, c)
    return params


# numpy oracles built from the verified kernels, eval-mode BN written out by hand


def o_bn(x, bn):
    s = bn.state
    shape = (1, -1, 1, 1)
    return ((x - s.running_mean.reshape(shape)) / np.sqrt(s.running_var.reshape(shape) + s.eps)
            * bn.gamma.data.reshape(shape) + bn.beta.data.reshape(shape))


def o_conv(x, w, stride=1, groups=1):
    k = w.shape[-1]
    spec = ConvSpec(x.shape[1], w.shape[0], k, stride, groups=groups)
    return F.conv2d_reference(x, w.data, spec)[0]


def relu(x):
    return np.maximum(x, 0)


def o_finish(x, h, p, spec):
    h = o_bn(o_conv(h, p["conv3.weight"]), p["bn3"])
    if spec.use_se:
        s = h.mean(axis=(2, 3))
        s = relu(s @ p["se.fc1.weight"].data.T + p["se.fc1.bias"].data)
        s = 1 / (1 + np.exp(-(s @ p["se.fc2.weight"].data.T + p["se.fc2.bias"].data)))
        h = h * s[:, :, None, None]
    if spec.has_projection:
        h = h + o_bn(o_conv(x, p["shortcut.conv.weight"], spec.stride), p["shortcut.bn"])
    elif spec.has_shortcut:
        h = h + x
    return relu(h)


def check_eval(spec, oracle, x, seed=1, atol=1e-4):
    p = randomise(init_block(spec, seed=0), seed)
    got = block_forward(Tensor(x), p, spec, train=False).data
    np.testing.assert_allclose(got, oracle(x.astype(np.float64), p, spec), atol=atol, rtol=1e-4)


# ---------------------------------------------------------------------------
# spec validation


def test_kinds_and_ops():
    assert set(COMPATIBLE_OPS) == set(BLOCK_KINDS)
    assert kind_for_op("maxpool3") == "efficient_bottleneck"
    assert kind_for_op("conv3x3") == "regular_bottleneck"
    with pytest.raises(ConfigError):
        kind_for_op("attention")


@pytest.mark.parametrize("kwargs", [
    dict(kind="efficient_bottleneck", spatial_op="conv3x3"),
    dict(kind="regular_bottleneck", spatial_op="attention"),
    dict(kind="regular_bottleneck", stride=3),
    dict(kind="regular_bottleneck", expansion=Fraction(1, 3)),
    dict(kind="transformer", spatial_op="attention", heads=3),
    dict(kind="regular_bottleneck", projection=False, out_channels=16),
    dict(kind="efficient_bottleneck", spatial_op="maxpool3", pre_pool=True, stride=2),
    dict(kind="warp_block"),
])
def test_block_spec_rejects(kwargs):
    base = dict(kind="regular_bottleneck", in_channels=8, out_channels=8, spatial_op="conv3x3")
    base.update(kwargs)
    with pytest.raises(ConfigError):
        BlockSpec(**base)


def test_with_op_switches_host_kind():
    b = BlockSpec("regular_bottleneck", 64, 256, stride=2, pre_pool=True)
    e = b.with_op("maxpool3")
    assert e.kind == "efficient_bottleneck" and not e.pre_pool and e.stride == 2
    assert e.with_op("conv3x3").kind == "regular_bottleneck"
    t = BlockSpec("transformer", 8, 8, 1, spatial_op="attention", heads=2)
    assert t.with_op("maxpool3").kind == "efficient_transformer"


def test_input_shape_checked():
    spec = BlockSpec("efficient_bottleneck", 8, 8, spatial_op="maxpool3")
    with pytest.raises(ShapeError):
        block_forward(Tensor(rnd(1, 4, 5, 5)), init_block(spec), spec)


# ---------------------------------------------------------------------------
# regular bottleneck


def o_regular(x, p, spec):
    h = relu(o_bn(o_conv(x, p["conv1.weight"]), p["bn1"]))
    if spec.pre_pool:
        h = F.avg_pool2d(Tensor(h), F.PoolSpec("avg", 2, 2, 0, ceil_mode=True)).data
    groups = spec.inner if spec.spatial_op == "dwconv3x3" else 1
    stride = 1 if spec.pre_pool else spec.stride
    h = relu(o_bn(o_conv(h, p["conv2.weight"], stride, groups), p["bn2"]))
    return o_finish(x, h, p, spec)


@pytest.mark.parametrize("spec", [
    BlockSpec("regular_bottleneck", 8, 8),
    BlockSpec("regular_bottleneck", 8, 16, stride=2),
    BlockSpec("regular_bottleneck", 8, 16, stride=2, pre_pool=True),
    BlockSpec("regular_bottleneck", 8, 8, use_se=True),
    BlockSpec("regular_bottleneck", 8, 8, spatial_op="dwconv3x3"),
    BlockSpec("regular_bottleneck", 8, 8, spatial_op="conv1x1"),
])
def test_regular_matches_composed_oracle(spec):
    check_eval(spec, o_regular, rnd(1, 8, 8, 8))


def test_regular_zero_input_zero_gamma():
    spec = BlockSpec("regular_bottleneck", 8, 8)
    p = init_block(spec)
    p["bn3"].gamma.data[...] = 0
    assert not block_forward(Tensor(np.zeros((1, 8, 5, 5))), p, spec).data.any()


def test_regular_identity_configuration_doubles():
    spec = BlockSpec("regular_bottleneck", 4, 4, expansion=1)
    p = init_block(spec)
    eye = np.eye(4, dtype=np.float32)
    p["conv1.weight"].data[...] = eye.reshape(4, 4, 1, 1)
    p["conv3.weight"].data[...] = eye.reshape(4, 4, 1, 1)
    p["conv2.weight"].data[...] = 0
    p["conv2.weight"].data[np.arange(4), np.arange(4), 1, 1] = 1
    for key in ("bn1", "bn2", "bn3"):
        p[key].state.eps = 0.0
    x = np.abs(rnd(2, 4, 5, 5))
    np.testing.assert_allclose(block_forward(Tensor(x), p, spec).data, 2 * x, rtol=1e-6)


def test_regular_blocks_keep_batch_and_size():
    spec = BlockSpec("regular_bottleneck", 8, 8)
    assert block_forward(Tensor(rnd(3, 8, 6, 5)), init_block(spec), spec).shape == (3, 8, 6, 5)


# ---------------------------------------------------------------------------
# inverted bottleneck and shift


def o_inverted(x, p, spec):
    h = relu(o_bn(o_conv(x, p["conv1.weight"]), p["bn1"]))
    h = relu(o_bn(o_conv(h, p["conv2.weight"], spec.stride, spec.inner), p["bn2"]))
    return o_finish(x, h, p, spec)


@pytest.mark.parametrize("spec", [
    BlockSpec("inverted_bottleneck", 4, 4, expansion=4, spatial_op="dwconv3x3"),
    BlockSpec("inverted_bottleneck", 4, 8, expansion=2, stride=2, spatial_op="dwconv3x3"),
])
def test_inverted_matches_composed_oracle(spec):
    check_eval(spec, o_inverted, rnd(2, 4, 6, 6))


def test_inverted_impulse_kernel_is_pointwise():
    spec = BlockSpec("inverted_bottleneck", 4, 4, expansion=2, spatial_op="dwconv3x3")
    p = randomise(init_block(spec))
    p["conv2.weight"].data[...] = 0
    p["conv2.weight"].data[:, 0, 1, 1] = 1
    x = rnd(1, 4, 5, 5)
    got = block_forward(Tensor(x), p, spec).data
    h = relu(o_bn(o_conv(x.astype(np.float64), p["conv1.weight"]), p["bn1"]))
    expect = o_finish(x, relu(o_bn(h, p["bn2"])), p, spec)
    np.testing.assert_allclose(got, expect, atol=1e-5)


def test_inverted_no_shortcut_when_shape_changes():
    spec = BlockSpec("inverted_bottleneck", 4, 8, expansion=2, stride=2, spatial_op="dwconv3x3")
    assert not spec.has_shortcut and not spec.has_projection


def o_shift(x, p, spec):
    h = relu(o_bn(o_conv(x, p["conv1.weight"]), p["bn1"]))
    a = F.ShiftAssignment.grouped(spec.inner)
    h = o_conv(h, Tensor(a.one_hot_kernels()), 1, spec.inner)[:, :, ::spec.stride, ::spec.stride]
    return o_finish(x, h, p, spec)


@pytest.mark.parametrize("stride,cout", [(1, 4), (2, 8)])
def test_shift_block_matches_composed_oracle(stride, cout):
    check_eval(BlockSpec("shift_block", 4, cout, expansion=2, stride=stride, spatial_op="shift"), o_shift,
               rnd(2, 4, 6, 6))


# ---------------------------------------------------------------------------
# efficient bottleneck and deformable pooling


def o_efficient(x, p, spec):
    h = relu(o_bn(o_conv(x, p["conv1.weight"]), p["bn1"]))
    kind = "max" if spec.spatial_op.endswith("max") or spec.spatial_op == "maxpool3" else "avg"
    h = h.astype(np.float32)
    if kind == "max":
        h = F.max_pool2d(Tensor(h), PoolSpec("max", 3, spec.stride, 1), return_indices=False).data
    else:
        h = F.avg_pool2d(Tensor(h), PoolSpec("avg", 3, spec.stride, 1)).data
    return o_finish(x, h.astype(np.float64), p, spec)


@pytest.mark.parametrize("op", ["maxpool3", "avgpool3"])
@pytest.mark.parametrize("stride,cout,se", [(1, 8, False), (2, 16, False), (1, 8, True)])
def test_efficient_matches_composed_oracle(op, stride, cout, se):
    spec = BlockSpec("efficient_bottleneck", 8, cout, stride=stride, spatial_op=op, use_se=se)
    check_eval(spec, o_efficient, rnd(2, 8, 7, 7))


def test_efficient_constant_inner_reduces_to_pointwise():
    spec = BlockSpec("efficient_bottleneck", 4, 4, expansion=1, spatial_op="maxpool3")
    p = randomise(init_block(spec))
    p["conv1.weight"].data[...] = 0  # inner feature becomes the constant relu(bn1(0))
    x = rnd(1, 4, 5, 5)
    inner = relu(o_bn(np.zeros((1, 4, 5, 5)), p["bn1"]))
    np.testing.assert_allclose(block_forward(Tensor(x), p, spec).data, o_finish(x, inner, p, spec), atol=1e-5)


def test_efficient_stage1_block_params():
    spec = BlockSpec("efficient_bottleneck", 256, 256, spatial_op="maxpool3")
    p = init_block(spec)
    assert n_params(p) == 256 * 64 + 64 * 256 + 2 * 64 + 2 * 256 == 33408
    regular = init_block(BlockSpec("regular_bottleneck", 256, 256))
    assert n_params(regular) - n_params(p) == 9 * 64 * 64 + 2 * 64


@pytest.mark.parametrize("cin,cout,stride", [(64, 256, 1), (256, 512, 2), (128, 128, 1)])
def test_efficient_saving_is_exactly_the_spatial_triplet(cin, cout, stride):
    e = BlockSpec("efficient_bottleneck", cin, cout, stride=stride, spatial_op="maxpool3")
    b = BlockSpec("regular_bottleneck", cin, cout, stride=stride)
    assert n_params(init_block(b)) - n_params(init_block(e)) == 9 * e.inner ** 2 + 2 * e.inner


@pytest.mark.parametrize("kind", ["max", "avg"])
@pytest.mark.parametrize("stride", [1, 2])
def test_deform_zero_predictor_equals_plain_pool(kind, stride):
    x = rnd(2, 3, 7, 6)
    d = DeformSpec(kind, 3)
    params = {"offset.weight": Tensor(np.zeros(d.predictor(stride).weight_shape)),
              "offset.bias": Tensor(np.zeros(d.offset_channels))}
    got = deformable_pool(Tensor(x), params, d, stride).data
    spec = PoolSpec(kind, 3, stride, 1)
    ref = F.max_pool2d(Tensor(x), spec, return_indices=False) if kind == "max" else F.avg_pool2d(Tensor(x), spec)
    assert np.array_equal(got, ref.data)


def test_deform_constant_input_constant_output():
    x = np.full((1, 2, 8, 8), 3.25, dtype=np.float32)
    d = DeformSpec("avg", 2)
    rng = np.random.default_rng(3)
    params = {"offset.weight": Tensor(np.zeros(d.predictor(1).weight_shape)),
              "offset.bias": Tensor(rng.uniform(-0.4, 0.4, d.offset_channels))}
    # offsets stay below 1, so taps of cells two away from the border stay inside the map
    out = deformable_pool(Tensor(x), params, d, 1).data
    np.testing.assert_allclose(out[:, :, 2:-2, 2:-2], 3.25, rtol=1e-6)


@pytest.mark.parametrize("kind", ["max", "avg"])
def test_deform_matches_sample_then_reduce_oracle(kind):
    rng = np.random.default_rng(4)
    c, h, w, stride = 2, 6, 5, 2
    x = rng.standard_normal((1, c, h, w))
    d = DeformSpec(kind, c)
    wt = rng.standard_normal(d.predictor(stride).weight_shape) * 0.2
    bias = rng.standard_normal(d.offset_channels) * 0.5
    got = deformable_pool(Tensor(x.astype(np.float32)), {"offset.weight": Tensor(wt), "offset.bias": Tensor(bias)},
                          d, stride).data
    pred = F.conv2d_reference(x, wt, d.predictor(stride), bias=bias)[0][0]
    oh, ow = pred.shape[1:]

    def sample(ch, cy, cx):
        total = 0.0
        for dy in (0, 1):
            for dx in (0, 1):
                r, s = int(np.floor(cy)) + dy, int(np.floor(cx)) + dx
                wgt = (1 - abs(cy - r)) * (1 - abs(cx - s))
                if 0 <= r < h and 0 <= s < w:
                    total += wgt * x[0, ch, r, s]
        return total

    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                vals = []
                for t in range(9):
                    cy = i * stride - 1 + t // 3 + pred[2 * t, i, j]
                    cx = j * stride - 1 + t % 3 + pred[2 * t + 1, i, j]
                    if -1 < cy < h and -1 < cx < w:
                        vals.append(sample(ch, cy, cx))
                expect = max(vals) if kind == "max" else sum(vals) / len(vals)
                assert got[0, ch, i, j] == pytest.approx(expect, abs=1e-5)


def test_deform_predictor_is_zero_initialised():
    spec = BlockSpec("efficient_bottleneck", 8, 8, spatial_op="deform_max")
    p = init_block(spec)
    assert p["offset.weight"].shape == (18, 2, 3, 3)
    assert not p["offset.weight"].data.any() and not p["offset.bias"].data.any()


def test_deform_channel_mismatch():
    d = DeformSpec("max", 4)
    with pytest.raises(ConfigError):
        deformable_pool(Tensor(rnd(1, 3, 5, 5)), {}, d)


# ---------------------------------------------------------------------------
# transformer blocks


def ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps) * g + b


def lin(x, p, name):
    return x @ p[f"{name}.weight"].data.T + p[f"{name}.bias"].data


def o_mlp(x, p):
    h = lin(ln(x, p["norm2.gamma"].data, p["norm2.beta"].data), p, "mlp.fc1")
    h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
    return x + lin(h, p, "mlp.fc2")


def o_transformer(x, p, spec):
    n, t, d = x.shape
    hd = d // spec.heads
    h = ln(x, p["norm1.gamma"].data, p["norm1.beta"].data)
    qkv = lin(h, p, "attn.qkv")
    out = np.zeros_like(h)
    for b in range(n):
        for head in range(spec.heads):
            sl = slice(head * hd, (head + 1) * hd)
            q, k, v = qkv[b, :, :d][:, sl], qkv[b, :, d:2 * d][:, sl], qkv[b, :, 2 * d:][:, sl]
            s = q @ k.T / np.sqrt(hd)
            a = np.exp(s - s.max(-1, keepdims=True))
            out[b, :, sl] = (a / a.sum(-1, keepdims=True)) @ v
    return o_mlp(x + lin(out, p, "attn.proj"), p)


def o_eff_transformer(x, p, spec, grid):
    n, t, d = x.shape
    h = relu(lin(ln(x, p["norm1.gamma"].data, p["norm1.beta"].data), p, "eff.fc1"))
    g = h.transpose(0, 2, 1).reshape(n, 3 * d, *grid).astype(np.float32)
    if spec.spatial_op == "maxpool3":
        g = F.max_pool2d(Tensor(g), PoolSpec("max", 3, 1, 1), return_indices=False).data
    else:
        g = F.avg_pool2d(Tensor(g), PoolSpec("avg", 3, 1, 1)).data
    h = relu(g.astype(np.float64)).reshape(n, 3 * d, t).transpose(0, 2, 1)
    return o_mlp(x + lin(h, p, "eff.fc2"), p)


def test_transformer_matches_composed_oracle():
    spec = BlockSpec("transformer", 8, 8, 1, spatial_op="attention", heads=2)
    p = randomise(init_block(spec), scale=0.4)
    x = rnd(2, 4, 8)
    np.testing.assert_allclose(block_forward(Tensor(x), p, spec).data, o_transformer(x.astype(np.float64), p, spec),
                               atol=1e-5)


@pytest.mark.parametrize("op,grid", [("maxpool3", (2, 2)), ("avgpool3", (2, 3)), ("maxpool3", (3, 2))])
def test_eff_transformer_matches_composed_oracle(op, grid):
    spec = BlockSpec("efficient_transformer", 4, 4, 1, spatial_op=op, heads=1)
    p = randomise(init_block(spec), scale=0.4)
    x = rnd(2, grid[0] * grid[1], 4)
    got = block_forward(Tensor(x), p, spec, grid=grid).data
    np.testing.assert_allclose(got, o_eff_transformer(x.astype(np.float64), p, spec, grid), atol=1e-5)


def test_transformer_zero_projections_is_identity():
    spec = BlockSpec("transformer", 8, 8, 1, spatial_op="attention", heads=2)
    p = randomise(init_block(spec))
    for key in ("attn.proj", "mlp.fc2"):
        p[f"{key}.weight"].data[...] = 0
        p[f"{key}.bias"].data[...] = 0
    x = rnd(1, 5, 8)
    assert np.array_equal(block_forward(Tensor(x), p, spec).data, x)


def test_eff_transformer_zero_projection_is_identity():
    spec = BlockSpec("efficient_transformer", 4, 4, 1, spatial_op="maxpool3", heads=1)
    p = randomise(init_block(spec))
    for key in ("eff.fc2", "mlp.fc2"):
        p[f"{key}.weight"].data[...] = 0
        p[f"{key}.bias"].data[...] = 0
    x = rnd(1, 6, 4)
    assert np.array_equal(block_forward(Tensor(x), p, spec, grid=(2, 3)).data, x)


def test_transformer_single_token_is_pointwise():
    spec = BlockSpec("transformer", 4, 4, 1, spatial_op="attention", heads=2)
    p = randomise(init_block(spec))
    x = rnd(3, 1, 4).astype(np.float64)
    h = ln(x, p["norm1.gamma"].data, p["norm1.beta"].data)
    v = lin(h, p, "attn.qkv")[..., 8:]
    expect = o_mlp(x + lin(v, p, "attn.proj"), p)
    np.testing.assert_allclose(block_forward(Tensor(x.astype(np.float32)), p, spec).data, expect, atol=1e-5)


def test_eff_transformer_single_token():
    spec = BlockSpec("efficient_transformer", 4, 4, 1, spatial_op="maxpool3", heads=1)
    p = randomise(init_block(spec))
    x = rnd(2, 1, 4)
    got = block_forward(Tensor(x), p, spec, grid=(1, 1)).data
    np.testing.assert_allclose(got, o_eff_transformer(x.astype(np.float64), p, spec, (1, 1)), atol=1e-5)


def test_eff_transformer_runs_no_attention():
    spec = BlockSpec("efficient_transformer", 4, 4, 1, spatial_op="maxpool3", heads=1)
    with op_log() as log:
        block_forward(Tensor(rnd(1, 4, 4)), init_block(spec), spec, grid=(2, 2))
    assert log["multi_head_attention"] == 0 and log["max_pool2d"] == 1


def test_eff_transformer_grid_mismatch():
    spec = BlockSpec("efficient_transformer", 4, 4, 1, spatial_op="maxpool3", heads=1)
    with pytest.raises(ConfigError):
        block_forward(Tensor(rnd(1, 5, 4)), init_block(spec), spec, grid=(2, 2))


def test_token_grid_round_trip():
    x = rnd(2, 6, 5)
    g = tokens_to_grid(Tensor(x), (2, 3))
    assert g.shape == (2, 5, 2, 3)
    assert g.data[1, 4, 1, 2] == x[1, 5, 4]
    assert np.array_equal(grid_to_tokens(g).data, x)
    with pytest.raises(ConfigError):
        tokens_to_grid(Tensor(x), (4, 2))


# ---------------------------------------------------------------------------
# init


def test_init_deterministic_and_named():
    spec = BlockSpec("regular_bottleneck", 8, 16, stride=2)
    a, b = init_block(spec, seed=3, prefix="s1.b1."), init_block(spec, seed=3, prefix="s1.b1.")
    for pa, pb in zip(iter_parameters(a), iter_parameters(b)):
        assert pa.name == pb.name and pa.name.startswith("s1.b1.")
        assert pa.data.tobytes() == pb.data.tobytes()
    names = [p.name for p in iter_parameters(a)]
    assert len(names) == len(set(names))


def test_block_params_agree_with_costmodel():
    for op in ("conv3x3", "maxpool3", "dwconv3x3", "deform_avg"):
        spec = build_single(op, 16, Fraction(1, 2), 16, 10)
        block = spec.stages[0].blocks[0]
        rows = count(spec).blocks()
        assert rows["s1.b1"].params == n_params(init_block(block))
