"""Tensor storage, deterministic initialization and tape-based reverse-mode autodiff.

A forward pass run inside ``with Tape() as tape:`` records one node per
differentiable operation.  ``backward(tape, loss)`` walks those nodes in reverse
and returns a :class:`Gradients` map keyed by tensor.  Outside a tape nothing is
recorded, which is the fast path used for inference and benchmarking.
"""

from __future__ import annotations

import contextlib
import itertools
import re
import struct
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "Gradients",
    "backward",
    "rng_init",
    "grad_check",
    "dtype_scope",
    "default_dtype",
    "op_log",
    "save_checkpoint",
    "load_checkpoint",
]

_uids = itertools.count()
_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily change the dtype new tensors are created with.

    Used by :func:`grad_check` to evaluate its finite-difference oracle in
    float64 while the analytic path under test stays in float32.
    """
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _op_logs():
    logs = getattr(_local, "op_logs", None)
    if logs is None:
        logs = _local.op_logs = []
    return logs


@contextlib.contextmanager
def op_log():
    """Count operations executed inside the block, by name."""
    counts = Counter()
    logs = _op_logs()
    logs.append(counts)
    try:
        yield counts
    finally:
        logs.remove(counts)


def log_op(name):
    for counts in _op_logs():
        counts[name] += 1


class Tensor:
    """Dense float array plus autodiff bookkeeping.

    Tensors are treated as immutable once an op has produced them.  Only the
    optimizer writes to :class:`Parameter` storage in place.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.uid = next(_uids)

    @classmethod
    def _wrap(cls, arr):
        # op outputs keep the dtype they were computed in
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        t.uid = next(_uids)
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar; all of these record on the active tape
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A trainable tensor with a persistent gradient buffer and a dotted name."""

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    vjp: Callable
    op: str


class Tape:
    """Define-by-run record of the ops executed while it is active."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: Gradients | None = None
        self._produced: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, tensor):
        return tensor.uid in self._produced

    def record(self, out, inputs, vjp, op):
        self.nodes.append(Node(out, inputs, vjp, op))
        self._produced.add(out.uid)


def recording():
    """True when an op output should be recorded on a tape."""
    return bool(_tape_stack())


def make_output(data, inputs, vjp, op):
    """Wrap ``data`` as an op output and record it if any input needs grads."""
    out = Tensor._wrap(data)
    log_op(op)
    stack = _tape_stack()
    if stack and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].record(out, tuple(inputs), vjp, op)
    return out


def needs_grad(*tensors):
    return bool(_tape_stack()) and any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


class Gradients(Mapping):
    """Gradient map keyed by tensor (or tensor uid)."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def _key(self, key):
        return key.uid if isinstance(key, Tensor) else key

    def __getitem__(self, key):
        return Tensor._wrap(self._grads[self._key(key)])

    def __contains__(self, key):
        return self._key(key) in self._grads

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def array(self, key):
        return self._grads[self._key(key)]

    def tensor(self, uid):
        return self._tensors[uid]


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Propagate d(loss)/d(.) through ``tape``.

    Gradients of :class:`Parameter` leaves are also accumulated into their
    ``.grad`` buffers, which is what the optimizer reads.
    """
    if loss.uid not in tape._produced:
        raise UsageError("loss was not produced on this tape")
    if loss.size != 1:
        raise UsageError(f"loss must have exactly one element, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {loss.uid: loss}
    for node in reversed(tape.nodes):
        g = grads.get(node.out.uid)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(
                    f"{node.op}: gradient shape {gi.shape} does not match input {t.shape}"
                )
            if t.uid in grads:
                grads[t.uid] = grads[t.uid] + gi
            else:
                grads[t.uid] = gi
                tensors[t.uid] = t
    for uid, t in tensors.items():
        if isinstance(t, Parameter):
            t.grad = t.grad + grads[uid].astype(t.grad.dtype, copy=False)
    result = Gradients(grads, tensors)
    tape.gradients = result
    return result


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=default_dtype()))


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)

    def vjp(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_output(ad + bd, (a, b), vjp, "add")


def sub(a, b):
    ad, bd = _data(a), _data(b)
    sa, sb = np.shape(ad), np.shape(bd)

    def vjp(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return make_output(ad - bd, (a, b), vjp, "sub")


def mul(a, b):
    ad, bd = _data(a), _data(b)

    def vjp(g):
        ga = unbroadcast(g * bd, np.shape(ad)) if isinstance(a, Tensor) else None
        gb = unbroadcast(g * ad, np.shape(bd)) if isinstance(b, Tensor) else None
        return ga, gb

    return make_output(ad * bd, (a, b), vjp, "mul")


def matmul(a, b):
    ad, bd = a.data, b.data

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_output(ad @ bd, (a, b), vjp, "matmul")


def reshape(x, shape):
    src = x.shape

    def vjp(g):
        return (g.reshape(src),)

    return make_output(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return make_output(np.transpose(x.data, axes), (x,), vjp, "transpose")


def getitem(x, key):
    src_shape, dtype = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(src_shape, dtype=dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return make_output(x.data[key], (x,), vjp, "getitem")


def tsum(x, axis=None, keepdims=False):
    src_shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src_shape).copy(),)

    return make_output(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    src_shape = x.shape
    count = x.size if axis is None else int(np.prod([src_shape[a] for a in np.atleast_1d(axis)]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src_shape).copy(),)

    return make_output(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), vjp, "mean")


def concatenate(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return make_output(data, tuple(tensors), vjp, "concatenate")


# ---------------------------------------------------------------------------
# initialization

_UNIFORM = re.compile(r"^uniform\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\)$")


def _seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


def rng_init(shape, scheme, seed) -> Tensor:
    """Fill a new float32 tensor of ``shape`` according to ``scheme``.

    ``scheme`` is one of ``"kaiming_fan_out"``, ``"zeros"``, ``"ones"``,
    ``"uniform(a,b)"`` or the tuple ``("uniform", a, b)``.  Identical
    arguments always give bit-identical tensors.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ConfigError(f"negative dimension in shape {shape}")
    rng = np.random.default_rng(_seed_sequence(seed))
    if isinstance(scheme, tuple) and len(scheme) == 3 and scheme[0] == "uniform":
        lo, hi = float(scheme[1]), float(scheme[2])
        scheme = "uniform"
    elif isinstance(scheme, str) and _UNIFORM.match(scheme.replace(" ", "")):
        m = _UNIFORM.match(scheme.replace(" ", ""))
        lo, hi = float(m.group(1)), float(m.group(2))
        scheme = "uniform"

    if scheme == "zeros":
        data = np.zeros(shape, dtype=np.float32)
    elif scheme == "ones":
        data = np.ones(shape, dtype=np.float32)
    elif scheme == "kaiming_fan_out":
        if len(shape) < 2:
            raise ConfigError("kaiming_fan_out needs at least a 2-D weight shape")
        fan_out = shape[0] * int(np.prod(shape[2:], dtype=np.int64))
        std = np.sqrt(2.0 / max(fan_out, 1))
        data = (rng.standard_normal(shape) * std).astype(np.float32)
    elif scheme == "uniform":
        if not hi >= lo:
            raise ConfigError(f"uniform bounds out of order: ({lo}, {hi})")
        data = rng.uniform(lo, hi, size=shape).astype(np.float32)
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    return Tensor(data)


# ---------------------------------------------------------------------------
# gradient checking


def _relative_error(analytic, numeric):
    # normalised by the largest gradient entry of the tensor so near-zero
    # coordinates do not turn finite-difference truncation into huge ratios
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-4)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def _grad_check_once(fn, arrays, eps, rng, max_coords, kink_tol):
    projection = None

    # analytic route: the engine itself, in float32
    with dtype_scope(np.float32):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            out = fn(*leaves)
            projection = rng.standard_normal(out.shape)
            loss = tsum(mul(out, Tensor(projection)))
        grads = backward(tape, loss)
        analytic = [
            grads.array(t).astype(np.float64) if t in grads else np.zeros(t.shape)
            for t in leaves
        ]

    # numeric route: central differences of a float64 evaluation
    def objective(values):
        with dtype_scope(np.float64):
            ts = [Tensor(v) for v in values]
            y = fn(*ts).data.astype(np.float64)
        return float(np.sum(y * projection))

    values = [np.array(a, dtype=np.float64) for a in arrays]
    base = objective(values)
    worst = 0.0
    kinks = checked = 0
    for idx, v in enumerate(values):
        flat = v.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic[idx].reshape(-1)
        scale = max(np.max(np.abs(a_flat), initial=0.0), 1e-4)
        kept_a, kept_n = [], []
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = objective(values)
            flat[c] = orig - eps
            down = objective(values)
            flat[c] = orig
            fwd, bwd = (up - base) / eps, (base - down) / eps
            checked += 1
            # a jump in slope inside the stencil means a kink (ReLU zero, max tie)
            if abs(fwd - bwd) > kink_tol * max(scale, abs(fwd), abs(bwd)):
                kinks += 1
                continue
            kept_a.append(a_flat[c])
            kept_n.append((up - down) / (2 * eps))
        worst = max(worst, _relative_error(np.array(kept_a), np.array(kept_n)))
    return worst, kinks / max(checked, 1)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-3,
    seed: int = 0,
    max_coords: int | None = None,
    kink_tol: float = 0.01,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Per input tensor the error is max|analytic - numeric| over the checked
    coordinates divided by the largest gradient magnitude in that tensor.

    ``inputs`` holds arrays or shapes (shapes are filled with standard normal
    values).  The scalar objective is ``sum(fn(*inputs) * R)`` for a fixed
    random ``R``.  Coordinates where the one-sided differences disagree sit on
    a kink (ReLU zero, max-pool tie) and are left out.  If more than a quarter
    of the checked coordinates are kinks the inputs are resampled once and the
    draw with fewer kinks is reported.
    """
    rng = np.random.default_rng(seed)

    def draw():
        out = []
        for item in inputs:
            if isinstance(item, (tuple, list)) and all(isinstance(s, (int, np.integer)) for s in item):
                out.append(rng.standard_normal(tuple(item)))
            else:
                out.append(np.asarray(_data(item), dtype=np.float64))
        return out

    arrays = draw()
    worst, kinks = _grad_check_once(fn, arrays, eps, rng, max_coords, kink_tol)
    if kinks > 0.25:
        again, kinks_again = _grad_check_once(fn, draw(), eps, rng, max_coords, kink_tol)
        if kinks_again < kinks:
            worst = again
    return worst


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PFNT"
_VERSION = 1


def _as_array(value):
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def save_checkpoint(path, params: Mapping[str, object]) -> None:
    """Write named arrays in the flat ``PFNT`` binary layout.

    Arrays of rank below four are padded with trailing unit dimensions.
    """
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    for name, value in params.items():
        arr = _as_array(value)
        if arr.ndim > 4:
            raise ShapeError(f"{name}: rank {arr.ndim} does not fit the 4-entry shape header")
        shape = tuple(arr.shape) + (1,) * (4 - arr.ndim)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ConfigError(f"parameter name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<4I", *shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a ``PFNT`` file back into ``{name: float32 array of rank 4}``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: missing PFNT header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            shape = struct.unpack_from("<4I", blob, pos)
            pos += 16
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(blob):
                raise FormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def parameters_of(items: Iterable) -> list[Parameter]:
    return [p for p in items if isinstance(p, Parameter)]
