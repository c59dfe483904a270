"""Datasets: the CIFAR-10 binary format and small synthetic problems."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, FormatError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
# per-channel statistics of the CIFAR-10 training set after scaling to [0, 1]
CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigError(f"images {self.images.shape} and labels {self.labels.shape} do not pair up")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ConfigError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, n: int, seed: int = 0) -> "Dataset":
        """``n`` examples drawn without replacement, spread evenly over classes."""
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        per = [rng.permutation(np.flatnonzero(self.labels == k)) for k in range(self.classes)]
        order = [idx for group in zip(*per) for idx in group] if all(len(p) for p in per) else []
        if len(order) < n:
            order = list(rng.permutation(len(self)))
        idx = np.sort(np.asarray(order[:n]))
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.split)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


# ---------------------------------------------------------------------------
# CIFAR-10


def _read_batch(path):
    if not os.path.isfile(path):
        raise FormatError(f"{path}: missing CIFAR-10 batch file")
    size = os.path.getsize(path)
    if size != CIFAR_RECORD * CIFAR_PER_FILE:
        raise FormatError(
            f"{path}: {size} bytes, expected {CIFAR_RECORD * CIFAR_PER_FILE} ({CIFAR_PER_FILE} records)"
        )
    raw = np.fromfile(path, dtype=np.uint8).reshape(CIFAR_PER_FILE, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} outside 0..9")
    return raw[:, 1:].reshape(-1, 3, 32, 32), labels


def standardize(pixels: np.ndarray) -> np.ndarray:
    x = pixels.astype(np.float32) / 255.0
    return (x - CIFAR_MEAN.reshape(1, 3, 1, 1)) / CIFAR_STD.reshape(1, 3, 1, 1)


def load_cifar10(path) -> tuple[Dataset, Dataset]:
    """Read the binary CIFAR-10 release from ``path`` as (train, test).

    Every file is checked before any is decoded so a bad directory never
    yields a partial dataset.
    """
    files = [os.path.join(path, f) for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,)]
    for f in files:
        if not os.path.isfile(f):
            raise FormatError(f"{f}: missing CIFAR-10 batch file")
        if os.path.getsize(f) != CIFAR_RECORD * CIFAR_PER_FILE:
            raise FormatError(
                f"{f}: {os.path.getsize(f)} bytes, expected {CIFAR_RECORD * CIFAR_PER_FILE}"
            )
    parts = [_read_batch(f) for f in files]
    train_x = np.concatenate([p[0] for p in parts[:5]])
    train_y = np.concatenate([p[1] for p in parts[:5]])
    test_x, test_y = parts[5]
    return (
        Dataset(standardize(train_x), train_y, 10, "train"),
        Dataset(standardize(test_x), test_y, 10, "test"),
    )


def write_cifar_format(path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 (N, 3, 32, 32) pixels and labels as CIFAR-10 batch files.

    N must be 60000; the first 50000 go to the five train files.
    """
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if pixels.shape != (6 * CIFAR_PER_FILE, 3, 32, 32) or labels.shape != (6 * CIFAR_PER_FILE,):
        raise ConfigError("CIFAR-format output needs exactly 60000 images of 3x32x32")
    os.makedirs(path, exist_ok=True)
    names = CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,)
    for i, name in enumerate(names):
        sl = slice(i * CIFAR_PER_FILE, (i + 1) * CIFAR_PER_FILE)
        rec = np.concatenate([labels[sl, None], pixels[sl].reshape(CIFAR_PER_FILE, -1)], axis=1)
        rec.tofile(os.path.join(path, name))


def synthetic_cifar_pixels(seed: int = 0, n: int = 6 * CIFAR_PER_FILE):
    """Class-dependent coloured textures in CIFAR layout, used when the real set is absent.

    Each class has its own mean colour and oriented grating; noise keeps the
    problem from being trivially separable.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32)
    colours = rng.uniform(100, 160, size=(10, 3)).astype(np.float32)
    angles = np.linspace(0, np.pi, 10, endpoint=False)
    freqs = rng.uniform(0.3, 0.9, size=10)
    pixels = np.empty((n, 3, 32, 32), dtype=np.uint8)
    for start in range(0, n, 5000):
        lab = labels[start : start + 5000]
        phase = rng.uniform(0, 2 * np.pi, size=(len(lab), 1, 1))
        proj = np.cos(angles[lab])[:, None, None] * xx + np.sin(angles[lab])[:, None, None] * yy
        grating = 25 * np.sin(freqs[lab][:, None, None] * proj + phase)
        img = colours[lab][:, :, None, None] + grating[:, None] + rng.normal(0, 70, size=(len(lab), 3, 32, 32))
        pixels[start : start + 5000] = np.clip(img, 0, 255).astype(np.uint8)
    return pixels, labels.astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic problems


SYNTH_KINDS = ("blobs", "stripes", "checker")


def synth(kind: str, n: int, seed: int = 0, size: int = 8, channels: int = 3) -> Dataset:
    """Deterministic two-class image problems.

    ``blobs``: two Gaussian clouds in pixel space, linearly separable by a wide
    margin.  ``stripes``: horizontal vs vertical bars.  ``checker``: the two
    phases of a 2x2 checkerboard.
    """
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic dataset {kind!r}; choose from {SYNTH_KINDS}")
    if n < 2:
        raise ConfigError("need at least two examples")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    shape = (n, channels, size, size)
    if kind == "blobs":
        centre = rng.standard_normal((channels, size, size))
        centre /= np.sqrt(np.mean(centre ** 2))
        sign = (2 * labels - 1)[:, None, None, None]
        images = sign * centre + 0.5 * rng.standard_normal(shape)
    elif kind == "stripes":
        idx = np.arange(size)
        horiz = np.broadcast_to(((idx // 2) % 2)[:, None], (size, size))
        pattern = np.where(labels[:, None, None] == 0, horiz, horiz.T)
        images = 2.0 * pattern[:, None] - 1 + 0.3 * rng.standard_normal(shape)
    else:
        yy, xx = np.mgrid[0:size, 0:size]
        board = ((yy // 2 + xx // 2) % 2).astype(np.float64)
        pattern = np.where(labels[:, None, None] == 0, board, 1 - board)
        images = 2.0 * pattern[:, None] - 1 + 0.3 * rng.standard_normal(shape)
    return Dataset(images.astype(np.float32), labels, 2, kind)
