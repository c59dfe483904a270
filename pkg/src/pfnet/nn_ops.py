"""Kernel layer: every primitive the blocks need, forward and backward.

All functions take and return :class:`~pfnet.engine.Tensor` and record on the
active tape.  They compute in the dtype of their inputs, so the same code runs
in float32 for training and float64 for the gradient-check oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .engine import Tensor, as_tensor, log_op, make_output, needs_grad, unbroadcast
from .errors import ConfigError, GeometryError, ShapeError

__all__ = [
    "ConvSpec",
    "PoolSpec",
    "ShiftAssignment",
    "BatchNormState",
    "conv2d",
    "conv2d_reference",
    "max_pool2d",
    "avg_pool2d",
    "shift",
    "batch_norm",
    "layer_norm",
    "relu",
    "gelu",
    "sigmoid",
    "linear",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "global_avg_pool",
    "multi_head_attention",
    "bilinear_sample",
    "window_reduce",
    "subsample",
]


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    groups: int = 1

    def __post_init__(self):
        if self.padding is None:
            object.__setattr__(self, "padding", self.kernel // 2)
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups {self.groups}"
            )

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_hw(self, h, w):
        k, r, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // r + 1, (w + 2 * p - k) // r + 1


@dataclass(frozen=True)
class PoolSpec:
    kind: str = "max"
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    avg_count_excludes_padding: bool = True
    ceil_mode: bool = False

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ConfigError(f"pool kind must be 'max' or 'avg', got {self.kind!r}")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError("pool kernel and stride must be >= 1")
        if not 0 <= self.padding <= self.kernel // 2:
            raise ConfigError(f"padding {self.padding} exceeds kernel//2 for kernel {self.kernel}")

    def output_hw(self, h, w):
        return _pool_out(h, self), _pool_out(w, self)


def _pool_out(n, spec):
    k, r, p = spec.kernel, spec.stride, spec.padding
    span = n + 2 * p - k
    if span < 0:
        raise GeometryError(f"pool window {k} larger than padded input {n + 2 * p}")
    out = (-(-span // r) if spec.ceil_mode else span // r) + 1
    # a window that starts in the right padding sees nothing real
    if spec.ceil_mode and (out - 1) * r >= n + p:
        out -= 1
    if (out - 1) * r - p >= n or (out - 1) * r - p + k <= 0:
        raise GeometryError(f"pool geometry {spec} leaves a window entirely in padding")
    return out


@dataclass(frozen=True)
class ShiftAssignment:
    """Per-channel displacement table; channel v reads from (i + h_v, j + w_v)."""

    offsets: tuple
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple((int(h), int(w)) for h, w in self.offsets))
        reach = self.kernel // 2
        for v, (h, w) in enumerate(self.offsets):
            if abs(h) > reach or abs(w) > reach:
                raise ConfigError(f"channel {v}: offset ({h}, {w}) exceeds kernel reach {reach}")

    @classmethod
    def grouped(cls, channels, kernel=3):
        """Split channels evenly over the k*k displacements, row-major."""
        reach = kernel // 2
        taps = [(h, w) for h in range(-reach, reach + 1) for w in range(-reach, reach + 1)]
        per = -(-channels // len(taps))
        return cls(tuple(taps[min(v // per, len(taps) - 1)] for v in range(channels)), kernel)

    def one_hot_kernels(self):
        """The depthwise (C, 1, k, k) kernel equivalent to this shift."""
        k, reach = self.kernel, self.kernel // 2
        w = np.zeros((len(self.offsets), 1, k, k), dtype=np.float32)
        for v, (h, dw) in enumerate(self.offsets):
            w[v, 0, h + reach, dw + reach] = 1.0
        return w


@dataclass
class BatchNormState:
    """Running statistics and constants for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels, eps=1e-5, momentum=0.1):
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), eps, momentum)


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x, w, spec):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (N,C,H,W) input, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, spec says {spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"conv2d weight shape {w.shape} != expected {spec.weight_shape}")


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _tap(xp, a, b, r, oh, ow):
    return xp[:, :, a : a + r * (oh - 1) + 1 : r, b : b + r * (ow - 1) + 1 : r]


def _im2col(xp, k, r, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = _tap(xp, a, b, r, oh, ow)
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(cols, padded_shape, k, r, oh, ow):
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, k, k, oh, ow)
    dxp = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            dxp[:, :, a : a + r * (oh - 1) + 1 : r, b : b + r * (ow - 1) + 1 : r] += cols[:, :, a, b]
    return dxp


def _unpad(dxp, p):
    return dxp[:, :, p:-p, p:-p] if p else dxp


def _gemm(w2, cols):
    # (o, K) @ (n, K, L); tiny L makes per-sample GEMMs inefficient, so fold
    # the batch into one GEMM instead
    n, kdim, l = cols.shape
    if l > 16 or n == 1:
        return np.matmul(w2, cols)
    y = cols.transpose(0, 2, 1).reshape(n * l, kdim) @ w2.T
    return np.ascontiguousarray(y.reshape(n, l, -1).transpose(0, 2, 1))


def _conv_dense(x, w, k, r, p, oh, ow):
    n, c, h, wd = x.shape
    o = w.shape[0]
    if k == 1 and p == 0:
        xs = x[:, :, ::r, ::r] if r > 1 else x
        cols = xs.reshape(n, c, oh * ow)
        y = _gemm(w.reshape(o, c), cols)

        def back(g):
            g2 = g.reshape(n, o, oh * ow)
            gw = np.einsum("nol,ncl->oc", g2, cols).reshape(w.shape)
            gxs = np.matmul(w.reshape(o, c).T, g2).reshape(n, c, oh, ow)
            if r > 1:
                gx = np.zeros_like(x)
                gx[:, :, ::r, ::r] = gxs
            else:
                gx = gxs
            return gx, gw

        return y.reshape(n, o, oh, ow), back

    xp = _pad(x, p)
    cols = _im2col(xp, k, r, oh, ow)
    w2 = w.reshape(o, -1)
    y = _gemm(w2, cols)

    def back(g):
        g2 = g.reshape(n, o, oh * ow)
        gw = np.einsum("nol,nkl->ok", g2, cols).reshape(w.shape)
        gcols = np.matmul(w2.T, g2)
        gx = _unpad(_col2im(gcols, xp.shape, k, r, oh, ow), p)
        return gx, gw

    return y.reshape(n, o, oh, ow), back


def _conv_depthwise(x, w, k, r, p, oh, ow):
    xp = _pad(x, p)
    wk = w[:, 0]
    y = None
    for a in range(k):
        for b in range(k):
            term = _tap(xp, a, b, r, oh, ow) * wk[None, :, a, b, None, None]
            y = term if y is None else y + term

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for a in range(k):
            for b in range(k):
                gw[:, 0, a, b] = np.einsum("nchw,nchw->c", g, _tap(xp, a, b, r, oh, ow))
                gxp[:, :, a : a + r * (oh - 1) + 1 : r, b : b + r * (ow - 1) + 1 : r] += (
                    g * wk[None, :, a, b, None, None]
                )
        return _unpad(gxp, p), gw

    return y, back


def conv2d(x: Tensor, w: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    """Zero-padded 2-D cross-correlation, grouped when ``spec.groups > 1``."""
    _check_conv(x, w, spec)
    k, r, p, g = spec.kernel, spec.stride, spec.padding, spec.groups
    n, c, h, wd = x.shape
    oh, ow = spec.output_hw(h, wd)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and {spec}")
    xd, wdat = x.data, w.data
    if g == 1:
        y, back = _conv_dense(xd, wdat, k, r, p, oh, ow)
    elif g == c == spec.out_channels:
        y, back = _conv_depthwise(xd, wdat, k, r, p, oh, ow)
    else:
        cin, cout = c // g, spec.out_channels // g
        parts, backs = [], []
        for gi in range(g):
            yi, bi = _conv_dense(
                xd[:, gi * cin : (gi + 1) * cin], wdat[gi * cout : (gi + 1) * cout], k, r, p, oh, ow
            )
            parts.append(yi)
            backs.append(bi)
        y = np.concatenate(parts, axis=1)

        def back(gy):
            gx = np.empty_like(xd)
            gw = np.empty_like(wdat)
            for gi, bi in enumerate(backs):
                gxi, gwi = bi(gy[:, gi * cout : (gi + 1) * cout])
                gx[:, gi * cin : (gi + 1) * cin] = gxi
                gw[gi * cout : (gi + 1) * cout] = gwi
            return gx, gw

    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)

    def vjp(gy):
        gx, gw = back(gy)
        gb = gy.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    return make_output(y, (x, w, bias), vjp, "conv2d")


def conv2d_reference(x, w, spec: ConvSpec, bias=None):
    """Loop-based direct convolution over the padded input.

    Returns ``(output, multiplications)``; the count includes taps that land on
    zero padding, which is the multiply-add convention the cost model uses.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    k, r, p, g = spec.kernel, spec.stride, spec.padding, spec.groups
    n, c, h, wd = x.shape
    oh, ow = spec.output_hw(h, wd)
    cin, cout = c // g, spec.out_channels // g
    xp = _pad(x, p)
    y = np.zeros((n, spec.out_channels, oh, ow))
    mults = 0
    for b in range(n):
        for o in range(spec.out_channels):
            gi = o // cout
            for i in range(oh):
                for j in range(ow):
                    window = xp[b, gi * cin : (gi + 1) * cin, i * r : i * r + k, j * r : j * r + k]
                    y[b, o, i, j] = np.sum(window * w[o])
                    mults += window.size
    if bias is not None:
        y += np.asarray(bias.data if isinstance(bias, Tensor) else bias).reshape(1, -1, 1, 1)
    return y, mults


# ---------------------------------------------------------------------------
# pooling


def _windows(xp, k, r, oh, ow):
    taps = [_tap(xp, a, b, r, oh, ow) for a in range(k) for b in range(k)]
    return np.stack(taps, axis=-1)


def _pool_pad(x, spec, oh, ow, value):
    # ceil mode may need extra cells on the bottom/right beyond the nominal padding
    k, r, p = spec.kernel, spec.stride, spec.padding
    h, w = x.shape[2:]
    extra_h = max(0, (oh - 1) * r + k - (h + 2 * p))
    extra_w = max(0, (ow - 1) * r + k - (w + 2 * p))
    if p == 0 and extra_h == 0 and extra_w == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p + extra_h), (p, p + extra_w)), constant_values=value)


def max_pool2d(x: Tensor, spec: PoolSpec, return_indices: bool = True):
    """Window maximum with -inf padding.

    Returns ``(y, argmax)`` where ``argmax[n, c, i, j]`` is the flat ``H*W``
    index of the selected input cell; ties go to the lowest flat index.
    """
    if spec.kind != "max":
        raise ConfigError("max_pool2d needs a PoolSpec with kind='max'")
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    k, r, p = spec.kernel, spec.stride, spec.padding
    xp = _pool_pad(x.data, spec, oh, ow, -np.inf)
    grad = needs_grad(x)

    if not grad and not return_indices:
        y = None
        for a in range(k):
            for b in range(k):
                t = _tap(xp, a, b, r, oh, ow)
                y = t.copy() if y is None else np.maximum(y, t, out=y)
        log_op("max_pool2d")
        return Tensor._wrap(y)

    win = _windows(xp, k, r, oh, ow)
    local = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * r - p + local // k
    cols = np.arange(ow)[None, :] * r - p + local % k
    argmax = rows * w + cols

    def vjp(g):
        base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
        flat = np.bincount((argmax + base).ravel(), weights=g.ravel(), minlength=n * c * h * w)
        return (flat.reshape(n, c, h, w).astype(g.dtype),)

    out = make_output(y, (x,), vjp, "max_pool2d")
    return (out, argmax) if return_indices else out


def _avg_counts(shape_hw, spec, oh, ow, dtype):
    k, r, p = spec.kernel, spec.stride, spec.padding
    lo, hi_pad = (0, 0) if spec.avg_count_excludes_padding else (-p, p)

    def axis_counts(n, out):
        start = np.arange(out) * r - p
        return np.minimum(start + k, n + hi_pad) - np.maximum(start, lo)

    counts = np.outer(axis_counts(shape_hw[0], oh), axis_counts(shape_hw[1], ow))
    return counts.astype(dtype).reshape(1, 1, oh, ow)


def avg_pool2d(x: Tensor, spec: PoolSpec) -> Tensor:
    """Window mean; the divisor skips padded cells unless the spec says otherwise."""
    if spec.kind != "avg":
        raise ConfigError("avg_pool2d needs a PoolSpec with kind='avg'")
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = spec.output_hw(h, w)
    k, r = spec.kernel, spec.stride
    xp = _pool_pad(x.data, spec, oh, ow, 0.0)
    acc = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            acc = acc + _tap(xp, a, b, r, oh, ow)
    counts = _avg_counts((h, w), spec, oh, ow, x.dtype)
    y = acc / counts

    def vjp(g):
        gs = g / counts
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                gxp[:, :, a : a + r * (oh - 1) + 1 : r, b : b + r * (ow - 1) + 1 : r] += gs
        p = spec.padding
        return (gxp[:, :, p : p + h, p : p + w],)

    return make_output(y, (x,), vjp, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W, keeping an (N, C, 1, 1) shape."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape

    def vjp(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_output(x.data.mean(axis=(2, 3), keepdims=True), (x,), vjp, "global_avg_pool")


def subsample(x: Tensor, stride: int) -> Tensor:
    if stride == 1:
        return x
    h, w = x.shape[2:]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, ::stride, ::stride] = g
        return (gx,)

    return make_output(x.data[:, :, ::stride, ::stride].copy(), (x,), vjp, "subsample")


# ---------------------------------------------------------------------------
# shift


def _shift_array(data, offsets, sign):
    y = np.zeros_like(data)
    h, w = data.shape[2:]
    groups: dict[tuple, list] = {}
    for v, off in enumerate(offsets):
        groups.setdefault(off, []).append(v)
    for (dh, dw), chans in groups.items():
        dh, dw = sign * dh, sign * dw
        idx = np.asarray(chans) if len(chans) != data.shape[1] else slice(None)
        dst_r = slice(max(0, -dh), min(h, h - dh))
        src_r = slice(max(0, dh), min(h, h + dh))
        dst_c = slice(max(0, -dw), min(w, w - dw))
        src_c = slice(max(0, dw), min(w, w + dw))
        if dst_r.start >= dst_r.stop or dst_c.start >= dst_c.stop:
            continue
        if isinstance(idx, slice):
            y[:, :, dst_r, dst_c] = data[:, :, src_r, src_c]
        else:
            y[:, idx, dst_r, dst_c] = data[:, idx, src_r, src_c]
    return y


def shift(x: Tensor, assignment: ShiftAssignment) -> Tensor:
    """``y[n, v, i, j] = x[n, v, i + h_v, j + w_v]`` with zeros outside the map."""
    if x.ndim != 4:
        raise ShapeError(f"shift expects (N,C,H,W), got {x.shape}")
    if len(assignment.offsets) != x.shape[1]:
        raise ConfigError(
            f"shift assignment covers {len(assignment.offsets)} channels, input has {x.shape[1]}"
        )
    offsets = assignment.offsets

    def vjp(g):
        return (_shift_array(g, offsets, -1),)

    return make_output(_shift_array(x.data, offsets, 1), (x,), vjp, "shift")


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    Train mode uses batch statistics (biased variance) and updates the running
    estimates in ``state`` (unbiased variance); eval mode reads them.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} do not match C={c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    gd = gamma.data.reshape(bshape)
    bd = beta.data.reshape(bshape)
    if train:
        n = xd.shape[0]
        m = xd.size // c
        flat = xd.reshape(n, c, -1)
        mu = np.einsum("ncl->c", flat) / m
        centered = xd - mu.reshape(bshape)
        cflat = centered.reshape(n, c, -1)
        var = np.einsum("ncl,ncl->c", cflat, cflat) / m
        inv = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
        scale = (gd.reshape(c) * inv).reshape(bshape)
        y = centered * scale
        y += bd
        mom = state.momentum
        unbiased = var * (m / max(m - 1, 1))
        state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(np.float32)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(np.float32)

        def vjp(g):
            # dx = a*g + b*(x - mu) + c with per-channel a, b, c
            gflat = g.reshape(n, c, -1)
            gb = np.einsum("ncl->c", gflat)
            gg = np.einsum("ncl,ncl->c", gflat, cflat) * inv
            a = gd.reshape(c) * inv
            b = -a * inv * gg / m
            cc = -a * gb / m
            gx = g * a.reshape(bshape)
            gx += centered * b.reshape(bshape)
            gx += cc.reshape(bshape)
            return gx, gg, gb

    else:
        rm = state.running_mean.reshape(bshape).astype(xd.dtype)
        inv = (1.0 / np.sqrt(state.running_var.astype(xd.dtype) + state.eps)).reshape(bshape)
        scale = gd * inv
        y = xd * scale + (bd - rm * scale)

        def vjp(g):
            xhat = (xd - rm) * inv
            return g * scale, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    return make_output(y, (x, gamma, beta), vjp, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with a per-feature affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes do not match feature size {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gg = np.sum(g * xhat, axis=lead)
        gb = np.sum(g, axis=lead)
        dxhat = g * gamma.data
        gx = (inv / d) * (
            d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return make_output(y, (x, gamma, beta), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# pointwise and dense


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (y > 0),)

    return make_output(y, (x,), vjp, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + xd * pdf)).astype(g.dtype, copy=False),)

    return make_output((xd * cdf).astype(xd.dtype, copy=False), (x,), vjp, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def vjp(g):
        return (g * s * (1 - s),)

    return make_output(s.astype(x.dtype, copy=False), (x,), vjp, "sigmoid")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ W.T + b`` over the last axis; ``W`` has shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in-features {w.shape[1]}")
    xd, wd = x.data, w.data
    y = xd @ wd.T
    if b is not None:
        y = y + b.data

    def vjp(g):
        x2 = xd.reshape(-1, xd.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    return make_output(y, (x, w, b), vjp, "linear")


def _axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_output(s, (x,), vjp, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_output(out, (x,), vjp, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of (N, K) logits against (N, K) target distributions."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    logp = log_softmax(logits, axis=-1)
    n = logits.shape[0]
    per = logp * Tensor._wrap(t)
    return per.sum() * (-1.0 / n)


# ---------------------------------------------------------------------------
# attention


def multi_head_attention(
    x: Tensor,
    wqkv: Tensor,
    wo: Tensor,
    heads: int,
    bqkv: Tensor | None = None,
    bo: Tensor | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over (N, T, D) tokens.

    ``wqkv`` is (3D, D) holding the query, key and value projections stacked
    in that order; ``wo`` is the (D, D) output projection.
    """
    if x.ndim != 3:
        raise ShapeError(f"attention expects (N, T, D) tokens, got {x.shape}")
    n, t, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigError(f"token dim {d} not divisible by {heads} heads")
    if wqkv.shape != (3 * d, d) or wo.shape != (d, d):
        raise ShapeError(f"attention weights {wqkv.shape}/{wo.shape} do not fit D={d}")
    log_op("multi_head_attention")
    dh = d // heads
    qkv = linear(x, wqkv, bqkv).reshape(n, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    out = linear(ctx, wo, bo)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# deformable sampling


_NEIGHBOURS = ((0, 0), (0, 1), (1, 0), (1, 1))


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Bilinear lookups at fractional (row, col) positions shared by all channels.

    ``x`` is (N, C, H, W) and ``coords`` is (N, S, 2); the result is (N, C, S).
    Neighbours outside the map read as zero.  Gradients flow to both inputs.
    """
    coords = as_tensor(coords)
    if x.ndim != 4 or coords.ndim != 3 or coords.shape[2] != 2 or coords.shape[0] != x.shape[0]:
        raise ShapeError(f"bilinear_sample shapes {x.shape} / {coords.shape} are incompatible")
    n, c, h, w = x.shape
    s = coords.shape[1]
    dtype = np.result_type(x.dtype, coords.dtype)
    cy = coords.data[..., 0].astype(dtype, copy=False)
    cx = coords.data[..., 1].astype(dtype, copy=False)
    y0 = np.floor(cy)
    x0 = np.floor(cx)
    ly, lx = cy - y0, cx - x0
    hy, hx = 1 - ly, 1 - lx
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    xf = x.data.reshape(n, c, h * w).astype(dtype, copy=False)

    weights, values, flat, valid = [], [], [], []
    for dy, dx in _NEIGHBOURS:
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        v = np.take_along_axis(xf, np.broadcast_to(idx[:, None, :], (n, c, s)), axis=2)
        v = np.where(ok[:, None, :], v, 0).astype(dtype, copy=False)
        wgt = (ly if dy else hy) * (lx if dx else hx)
        weights.append(wgt)
        values.append(v)
        flat.append(idx)
        valid.append(ok)

    out = weights[0][:, None, :] * values[0]
    for wgt, v in zip(weights[1:], values[1:]):
        out = out + wgt[:, None, :] * v

    def vjp(g):
        gx = None
        if x.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            total = np.zeros(n * c * h * w, dtype=np.float64)
            for wgt, idx, ok in zip(weights, flat, valid):
                contrib = g * (wgt * ok)[:, None, :]
                total += np.bincount(
                    (base + idx[:, None, :]).ravel(), weights=contrib.ravel(), minlength=n * c * h * w
                )
            gx = total.reshape(x.shape).astype(x.dtype)
        gc = None
        if coords.requires_grad:
            v00, v01, v10, v11 = values
            dcy = -hx[:, None, :] * v00 - lx[:, None, :] * v01 + hx[:, None, :] * v10 + lx[:, None, :] * v11
            dcx = -hy[:, None, :] * v00 + hy[:, None, :] * v01 - ly[:, None, :] * v10 + ly[:, None, :] * v11
            gc = np.stack([(g * dcy).sum(axis=1), (g * dcx).sum(axis=1)], axis=-1).astype(coords.dtype)
        return gx, gc

    return make_output(out, (x, coords), vjp, "bilinear_sample")


def window_reduce(samples: Tensor, valid: np.ndarray, kind: str) -> Tensor:
    """Reduce the last axis of ``samples`` over its ``valid`` entries.

    ``max`` ignores invalid entries (ties go to the first index); ``avg`` sums
    every entry in index order and divides by the number of valid ones.  A
    window with no valid entry yields 0.
    """
    sd = samples.data
    taps = sd.shape[-1]
    count = valid.sum(axis=-1)
    if kind == "max":
        masked = np.where(valid, sd, -np.inf)
        local = np.argmax(masked, axis=-1)
        y = np.take_along_axis(masked, local[..., None], axis=-1)[..., 0]
        empty = count == 0
        y = np.where(empty, 0, y).astype(sd.dtype, copy=False)

        def vjp(g):
            gs = np.zeros_like(sd)
            np.put_along_axis(gs, local[..., None], np.where(empty, 0, g)[..., None], axis=-1)
            return (gs,)

    elif kind == "avg":
        acc = np.zeros(sd.shape[:-1], dtype=sd.dtype)
        for t in range(taps):
            acc = acc + sd[..., t]
        denom = np.maximum(count, 1).astype(sd.dtype)
        y = acc / denom

        def vjp(g):
            return (np.repeat((g / denom)[..., None], taps, axis=-1),)

    else:
        raise ConfigError(f"unknown reduction {kind!r}")
    return make_output(y, (samples,), vjp, "window_reduce")
