"""Gradient checks over every differentiable op and block kind.

Each case builds a function of a few float arrays and is checked at three
input shapes.  Weights that are not under test are drawn once per shape with
a fixed seed so the suite is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import engine as E
from . import nn_ops as F
from .blocks import BlockSpec, DeformSpec, block_forward, deformable_pool, grid_to_tokens, init_block, tokens_to_grid
from .engine import Tensor, grad_check
from .nn_ops import BatchNormState, ConvSpec, PoolSpec, ShiftAssignment

DEFAULT_TOL = 1e-2
TIGHT_TOL = 1e-3
# the numeric side runs in float64, so a small step costs no precision and
# keeps ReLU zeros and max ties out of the difference stencil more often
SUITE_EPS = 1e-4


@dataclass
class GradCase:
    name: str
    make: Callable  # (shape_index, rng) -> (fn, inputs)
    tol: float = DEFAULT_TOL
    max_coords: int | None = 48


def _r(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


def _conv_case(name, spec_for):
    def make(i, rng):
        n, c, h = [(1, 3, 5), (2, 4, 6), (2, 6, 7)][i]
        spec = spec_for(c)
        x = _r(rng, n, c, h, h)
        w = _r(rng, *spec.weight_shape, scale=0.5)
        b = _r(rng, spec.out_channels)
        return (lambda x, w, b: F.conv2d(x, w, spec, bias=b)), [x, w, b]

    return GradCase(name, make)


def _unary(name, fn, shapes, tol=DEFAULT_TOL, scale=1.0):
    def make(i, rng):
        return fn, [_r(rng, *shapes[i], scale=scale)]

    return GradCase(name, make, tol)


IMG = [(1, 2, 4, 4), (2, 3, 5, 5), (2, 4, 7, 6)]
TOK = [(1, 3, 4), (2, 4, 6), (2, 9, 8)]
MAT = [(3, 4), (5, 2), (4, 7)]


def _binary(name, fn, shapes_a, shapes_b):
    def make(i, rng):
        return fn, [_r(rng, *shapes_a[i]), _r(rng, *shapes_b[i])]

    return GradCase(name, make)


def _bn_case(train):
    def make(i, rng):
        shape = IMG[i]
        c = shape[1]
        state = BatchNormState(rng.standard_normal(c).astype(np.float32),
                               rng.uniform(0.5, 2.0, c).astype(np.float32))

        def fn(x, g, b):
            st = BatchNormState(state.running_mean.copy(), state.running_var.copy())
            return F.batch_norm(x, g, b, st, train)

        return fn, [_r(rng, *shape), 1 + 0.3 * _r(rng, c), _r(rng, c)]

    return GradCase(f"batch_norm[{'train' if train else 'eval'}]", make)


def _layer_norm(i, rng):
    shape = TOK[i]
    d = shape[-1]
    return (lambda x, g, b: F.layer_norm(x, g, b)), [_r(rng, *shape), 1 + 0.3 * _r(rng, d), _r(rng, d)]


def _linear(i, rng):
    fin, fout = [(3, 2), (4, 5), (6, 3)][i]
    return (lambda x, w, b: F.linear(x, w, b)), [_r(rng, 2, 3, fin), _r(rng, fout, fin), _r(rng, fout)]


def _cross_entropy(i, rng):
    n, k = [(2, 3), (4, 5), (3, 10)][i]
    t = rng.dirichlet(np.ones(k), size=n)
    return (lambda z: F.cross_entropy(z, t)), [_r(rng, n, k)]


def _attention(i, rng):
    n, t, d, heads = [(1, 3, 4, 1), (2, 4, 6, 2), (1, 5, 8, 4)][i]
    return (
        lambda x, wqkv, wo, bqkv, bo: F.multi_head_attention(x, wqkv, wo, heads, bqkv, bo)
    ), [_r(rng, n, t, d), _r(rng, 3 * d, d, scale=0.5), _r(rng, d, d, scale=0.5), _r(rng, 3 * d), _r(rng, d)]


def _bilinear(i, rng):
    n, c, h, s = [(1, 2, 4, 5), (2, 3, 5, 7), (1, 4, 6, 9)][i]
    # keep coordinates away from integers, where bilinear weights have kinks
    coords = rng.uniform(-0.8, h - 0.2, size=(n, s, 2))
    coords = np.floor(coords) + np.clip(coords - np.floor(coords), 0.15, 0.85)
    return (lambda x, cds: F.bilinear_sample(x, cds)), [_r(rng, n, c, h, h), coords]


def _window_reduce(kind):
    def make(i, rng):
        shape = [(2, 3, 4), (1, 2, 3, 5), (2, 2, 2, 9)][i]
        valid = rng.random(shape) > 0.3
        return (lambda s: F.window_reduce(s, valid, kind)), [_r(rng, *shape)]

    return GradCase(f"window_reduce[{kind}]", make, TIGHT_TOL if kind == "avg" else DEFAULT_TOL)


def _deform(kind):
    def make(i, rng):
        n, c, h, stride = [(1, 2, 5, 1), (2, 3, 6, 2), (1, 4, 7, 1)][i]
        d = DeformSpec(kind, c)
        pred = d.predictor(stride)
        params = {"offset.bias": Tensor(_r(rng, d.offset_channels, scale=0.3))}

        def fn(x, w):
            return deformable_pool(x, {**params, "offset.weight": w}, d, stride)

        return fn, [_r(rng, n, c, h, h), _r(rng, *pred.weight_shape, scale=0.2)]

    return GradCase(f"deformable_pool[{kind}]", make)


def _shift(i, rng):
    shape = IMG[i]
    a = ShiftAssignment.grouped(shape[1])
    return (lambda x: F.shift(x, a)), [_r(rng, *shape)]


def _tokens_grid(i, rng):
    n, hg, wg, d = [(1, 2, 2, 3), (2, 3, 2, 4), (1, 3, 3, 5)][i]
    return (lambda x: grid_to_tokens(tokens_to_grid(x, (hg, wg)) * 2.0)), [_r(rng, n, hg * wg, d)]


BLOCK_SHAPES = {
    "regular_bottleneck": [(8, 8, 1, "conv3x3"), (8, 16, 2, "conv3x3"), (8, 8, 1, "dwconv3x3")],
    "inverted_bottleneck": [(4, 4, 1, "dwconv3x3"), (4, 8, 2, "dwconv3x3"), (6, 6, 1, "dwconv3x3")],
    "efficient_bottleneck": [(8, 8, 1, "maxpool3"), (8, 16, 2, "avgpool3"), (8, 8, 2, "deform_max")],
    "shift_block": [(4, 4, 1, "shift"), (4, 8, 2, "shift"), (6, 6, 1, "shift")],
    "transformer": [(4, 4, 1, "attention"), (6, 6, 1, "attention"), (8, 8, 1, "attention")],
    "efficient_transformer": [(4, 4, 1, "maxpool3"), (6, 6, 1, "avgpool3"), (8, 8, 1, "maxpool3")],
}


def _block_case(kind):
    def make(i, rng):
        cin, cout, stride, op = BLOCK_SHAPES[kind][i]
        token = kind in ("transformer", "efficient_transformer")
        rho = 2 if kind in ("inverted_bottleneck", "shift_block") else Fraction(1, 2)
        spec = BlockSpec(kind, cin, cout, 1 if token else rho, stride, op,
                         heads=2 if token else 0, use_se=(kind == "regular_bottleneck" and i == 2))
        params = init_block(spec, seed=i)
        for key, value in list(params.items()):
            if key.endswith("bias") and isinstance(value, Tensor):
                # non-zero biases so every branch carries signal
                value.data[...] = (0.1 * rng.standard_normal(value.shape)).astype(np.float32)
        if "offset.weight" in params:
            params["offset.weight"].data[...] = (0.2 * rng.standard_normal(params["offset.weight"].shape)).astype(np.float32)
        wkey = "mlp.fc1.weight" if token else "conv1.weight"
        grid = (2, 3) if token else None
        x = _r(rng, 2, 6, cin) if token else _r(rng, 2, cin, 5, 5)

        def fn(x, w):
            return block_forward(x, {**params, wkey: w}, spec, train=True, grid=grid)

        return fn, [x, params[wkey].data.astype(np.float64)]

    return GradCase(f"block[{kind}]", make, max_coords=40)


def cases() -> list[GradCase]:
    return [
        _binary("add", lambda a, b: a + b, [(3, 4), (2, 3, 4), (4, 1)], [(3, 4), (3, 4), (4, 5)]),
        _binary("sub", lambda a, b: a - b, [(3, 4), (2, 3, 4), (4, 1)], [(4,), (1, 4), (1, 5)]),
        _binary("mul", lambda a, b: a * b, [(3, 4), (2, 3, 4), (4, 1)], [(3, 4), (3, 1), (4, 5)]),
        _binary("matmul", lambda a, b: a @ b, [(3, 4), (2, 3, 4), (2, 2, 5)], [(4, 2), (2, 4, 3), (5, 3)]),
        _unary("reshape", lambda x: x.reshape(-1, 2) * 1.5, MAT),
        _unary("transpose", lambda x: x.transpose(1, 0) @ Tensor(np.arange(x.shape[0] * 2, dtype=float).reshape(-1, 2)), MAT),
        _unary("getitem", lambda x: x[1:, ::2] * 2.0, MAT),
        _unary("sum", lambda x: x.sum(axis=0), MAT),
        _unary("mean", lambda x: x.mean(axis=1, keepdims=True), MAT),
        _binary("concatenate", lambda a, b: E.concatenate([a, b], axis=1) * 1.0,
                [(2, 3), (1, 4), (3, 2)], [(2, 1), (1, 2), (3, 3)]),
        _conv_case("conv2d[3x3]", lambda c: ConvSpec(c, 3, 3, 1)),
        _conv_case("conv2d[3x3/2]", lambda c: ConvSpec(c, 4, 3, 2)),
        _conv_case("conv2d[1x1/2]", lambda c: ConvSpec(c, 5, 1, 2)),
        _conv_case("conv2d[depthwise]", lambda c: ConvSpec(c, c, 3, 2, groups=c)),
        _conv_case("conv2d[grouped]", lambda c: ConvSpec(c, c, 3, 1, groups=c // 2 if c > 3 else 1)),
        _unary("max_pool2d[3/1]", lambda x: F.max_pool2d(x, PoolSpec("max", 3, 1, 1), return_indices=False), IMG),
        _unary("max_pool2d[3/2]", lambda x: F.max_pool2d(x, PoolSpec("max", 3, 2, 1), return_indices=False), IMG),
        _unary("avg_pool2d[3/1]", lambda x: F.avg_pool2d(x, PoolSpec("avg", 3, 1, 1)), IMG, TIGHT_TOL),
        _unary("avg_pool2d[2/2 ceil]", lambda x: F.avg_pool2d(x, PoolSpec("avg", 2, 2, 0, ceil_mode=True)), IMG, TIGHT_TOL),
        _unary("global_avg_pool", F.global_avg_pool, IMG, TIGHT_TOL),
        _unary("subsample", lambda x: F.subsample(x, 2), IMG),
        GradCase("shift", _shift),
        _bn_case(True),
        _bn_case(False),
        GradCase("layer_norm", _layer_norm),
        _unary("relu", F.relu, IMG),
        _unary("gelu", F.gelu, IMG),
        _unary("sigmoid", F.sigmoid, IMG),
        GradCase("linear", _linear, TIGHT_TOL),
        _unary("softmax", lambda x: F.softmax(x, axis=-1), TOK),
        _unary("log_softmax", lambda x: F.log_softmax(x, axis=1), TOK),
        GradCase("cross_entropy", _cross_entropy),
        GradCase("multi_head_attention", _attention),
        GradCase("bilinear_sample", _bilinear),
        _window_reduce("max"),
        _window_reduce("avg"),
        _deform("max"),
        _deform("avg"),
        GradCase("tokens_to_grid", _tokens_grid),
    ] + [_block_case(kind) for kind in BLOCK_SHAPES]


@dataclass
class GradResult:
    name: str
    errors: list
    tol: float

    @property
    def worst(self):
        return max(self.errors)

    @property
    def ok(self):
        return self.worst < self.tol


def run_case(case: GradCase, seed: int = 0) -> GradResult:
    errors = []
    for i in range(3):
        rng = np.random.default_rng([seed, i, sum(map(ord, case.name))])
        fn, inputs = case.make(i, rng)
        errors.append(grad_check(fn, inputs, eps=SUITE_EPS, seed=seed + 101 * (i + 1), max_coords=case.max_coords))
    return GradResult(case.name, errors, case.tol)


def run_suite(seed: int = 0, names=None) -> list[GradResult]:
    return [run_case(c, seed) for c in cases() if names is None or c.name in names]
