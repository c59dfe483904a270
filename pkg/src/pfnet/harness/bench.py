"""Forward-pass latency measurement."""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from ..architect import ArchSpec
from ..costmodel import count
from ..errors import ConfigError, ResourceError
from ..network import Network

MIN_REPS = 20
MIN_WARMUP = 5


def resolve_threads(threads=None) -> int:
    """Thread count from the argument, else ``PFNET_THREADS``, else 1."""
    env = os.environ.get("PFNET_THREADS")
    if env:
        try:
            threads = int(env)
        except ValueError:
            raise ConfigError(f"PFNET_THREADS must be an integer, got {env!r}") from None
    if threads in (None, "single"):
        return 1
    if threads == "multi":
        return os.cpu_count() or 1
    threads = int(threads)
    if threads < 1:
        raise ConfigError("thread count must be positive")
    return threads


@dataclass
class BenchResult:
    spec_id: str
    batch: int
    reps: int
    warmup: int
    input_shape: tuple
    threads: int
    latencies_ms: list = field(default_factory=list)

    @property
    def thread_mode(self):
        return "single" if self.threads == 1 else f"multi({self.threads})"

    @property
    def median(self) -> float:
        return float(np.median(self.latencies_ms))

    @property
    def p10(self) -> float:
        return float(np.percentile(self.latencies_ms, 10))

    @property
    def p90(self) -> float:
        return float(np.percentile(self.latencies_ms, 90))

    @property
    def throughput(self) -> float:
        """Images per second at the median latency."""
        return 1000.0 * self.batch / self.median

    def stable_with(self, other: "BenchResult", tol: float = 0.10) -> bool:
        """Whether two medians agree within ``tol`` of the smaller one."""
        lo, hi = sorted((self.median, other.median))
        return hi <= lo * (1 + tol)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(median=self.median, p10=self.p10, p90=self.p90, thread_mode=self.thread_mode,
                 statistic="median after warmup")
        return d


def _estimate_bytes(spec: ArchSpec, batch: int, shape) -> int:
    # two live activations plus an im2col buffer nine times the largest one
    largest = max(int(np.prod(r.output_shape)) for r in count(spec, shape[1:]).rows)
    return 4 * batch * largest * 12


def _available_bytes():
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def bench(spec: ArchSpec, batch: int = 1, reps: int = MIN_REPS, warmup: int = MIN_WARMUP,
          threads=None, seed: int = 0, input_size: int | None = None, net: Network | None = None) -> BenchResult:
    """Time ``reps`` eval-mode forward passes on one fixed random batch."""
    if reps < MIN_REPS:
        raise ConfigError(f"reported results need at least {MIN_REPS} repetitions")
    if warmup < MIN_WARMUP:
        raise ConfigError(f"warmup must be at least {MIN_WARMUP}")
    if batch < 1:
        raise ConfigError("batch must be positive")
    threads = resolve_threads(threads)
    c, h, w = spec.input_shape
    if input_size is not None:
        h = w = input_size
        spec = replace(spec, input_shape=(c, h, w))
    need, avail = _estimate_bytes(spec, batch, (c, h, w)), _available_bytes()
    if avail is not None and need > avail:
        raise ResourceError(f"batch {batch} needs ~{need / 2**30:.1f} GiB, {avail / 2**30:.1f} GiB free", batch)

    net = net if net is not None else Network(spec, seed)
    x = np.random.default_rng(seed).standard_normal((batch, c, h, w)).astype(np.float32)
    result = BenchResult(spec.name, batch, reps, warmup, (c, h, w), threads)
    try:
        with threadpool_limits(limits=threads):
            for _ in range(warmup):
                net(x, train=False)
            for _ in range(reps):
                t0 = time.perf_counter()
                net(x, train=False)
                result.latencies_ms.append((time.perf_counter() - t0) * 1000.0)
    except MemoryError:
        raise ResourceError(f"out of memory at batch {batch}", batch) from None
    return result


def bench_interleaved(specs: dict, batch: int = 1, reps: int = MIN_REPS, warmup: int = MIN_WARMUP,
                      threads=None, seed: int = 0, input_size: int | None = None) -> dict:
    """Bench several specs with their timed passes interleaved round-robin.

    Interleaving spreads slow drifts of machine speed evenly over the
    candidates, which matters when comparing them.
    """
    if reps < MIN_REPS or warmup < MIN_WARMUP:
        raise ConfigError(f"need reps >= {MIN_REPS} and warmup >= {MIN_WARMUP}")
    threads = resolve_threads(threads)
    nets, inputs, results = {}, {}, {}
    for key, spec in specs.items():
        c, h, w = spec.input_shape
        if input_size is not None:
            h = w = input_size
            spec = replace(spec, input_shape=(c, h, w))
        nets[key] = Network(spec, seed)
        inputs[key] = np.random.default_rng(seed).standard_normal((batch, c, h, w)).astype(np.float32)
        results[key] = BenchResult(spec.name, batch, reps, warmup, (c, h, w), threads)
    try:
        with threadpool_limits(limits=threads):
            for key in specs:
                for _ in range(warmup):
                    nets[key](inputs[key])
            for _ in range(reps):
                for key in specs:
                    t0 = time.perf_counter()
                    nets[key](inputs[key])
                    results[key].latencies_ms.append((time.perf_counter() - t0) * 1000.0)
    except MemoryError:
        raise ResourceError(f"out of memory at batch {batch}", batch) from None
    return results
