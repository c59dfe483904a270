"""Training, benchmarking and sweep drivers."""

from .bench import BenchResult, bench, bench_interleaved, resolve_threads
from .data import Dataset, load_cifar10, synth, write_cifar_format
from .manifest import manifest, write_manifest
from .sweep import SweepResult, max_vs_avg, single_bottleneck_grid, sweep
from .train import TrainConfig, TrainReport, accuracy, train, train_preset

__all__ = [
    "BenchResult", "bench", "bench_interleaved", "resolve_threads",
    "Dataset", "load_cifar10", "synth", "write_cifar_format",
    "manifest", "write_manifest",
    "SweepResult", "max_vs_avg", "single_bottleneck_grid", "sweep",
    "TrainConfig", "TrainReport", "accuracy", "train", "train_preset",
]
