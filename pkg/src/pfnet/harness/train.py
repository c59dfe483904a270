"""Toy-scale training: SGD with Nesterov momentum, step or cosine schedule,
label-smoothed cross-entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .. import nn_ops as F
from ..architect import ArchSpec
from ..engine import Tape, Tensor, backward
from ..errors import ConfigError, TrainingDiverged
from ..network import Network
from .data import Dataset

UNSUPPORTED_AUGMENTATIONS = ("randaug", "random_erasing", "ema")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd_nesterov"
    momentum: float = 0.9
    schedule: str = "step"
    lr: float = 0.1
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 128
    label_smoothing: float = 0.0
    seed: int = 0
    max_steps: int | None = None
    threads: int = 1
    augment: tuple = ()

    def __post_init__(self):
        if self.optimizer != "sgd_nesterov":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("step", "cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if not 0.0 <= self.label_smoothing <= 0.2:
            raise ConfigError("label_smoothing must lie in [0, 0.2]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        for flag in self.augment:
            if flag in UNSUPPORTED_AUGMENTATIONS:
                raise ConfigError(f"augmentation {flag!r} is not supported by this harness")
            raise ConfigError(f"unknown augmentation {flag!r}")


TRAIN_PRESETS = {
    "desk": TrainConfig(),
    "imagenet90": TrainConfig(momentum=0.9, batch_size=256, lr=0.4, weight_decay=1e-4, epochs=90),
    # the long recipe also used RandAugment, random erasing and weight EMA,
    # none of which exist here; request them through ``augment`` to get a clear error
    "imagenetlong": TrainConfig(schedule="cosine", lr=0.5, batch_size=512, label_smoothing=0.1,
                             weight_decay=1e-5, epochs=300),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown training preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    return replace(TRAIN_PRESETS[name], **overrides)


def smooth_targets(labels, classes: int, eps: float = 0.0) -> np.ndarray:
    """One-hot rows mixed with the uniform distribution: (1 - eps) * onehot + eps / K."""
    labels = np.asarray(labels)
    t = np.full((len(labels), classes), eps / classes, dtype=np.float32)
    t[np.arange(len(labels)), labels] += 1.0 - eps
    return t


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant" or total <= 1:
        return cfg.lr
    if cfg.schedule == "cosine":
        return cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))
    drops = (step >= total / 3) + (step >= 2 * total / 3)
    return cfg.lr * 0.1 ** drops


class SGDNesterov:
    """v <- mu v + (g + wd p);  p <- p - lr ((g + wd p) + mu v)."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        mu, wd = self.momentum, self.weight_decay
        for p, v in zip(self.params, self.velocity):
            g = p.grad if wd == 0 else p.grad + wd * p.data
            v *= mu
            v += g
            p.data -= (lr * (g + mu * v)).astype(p.data.dtype)


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    steps: int = 0
    final_accuracy: float = float("nan")
    network: Network | None = None

    @property
    def final_params(self):
        return self.network.state_dict() if self.network is not None else {}


def accuracy(net: Network, data: Dataset, batch_size: int = 256) -> float:
    correct = 0
    for x, y in data.batches(batch_size):
        logits = net(x, train=False).data
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return correct / max(len(data), 1)


def _diagnostics(net, lr, step):
    norms = {name: float(np.linalg.norm(p.data)) for name, p in net.named_parameters()}
    return {"lr": lr, "step": step, "layer_norms": norms}


def train(model, dataset: Dataset, cfg: TrainConfig = TrainConfig()) -> TrainReport:
    """Optimise ``model`` (an ArchSpec or a Network) on ``dataset``.

    A fixed seed with ``cfg.threads == 1`` reproduces the loss curve exactly.
    Raises TrainingDiverged with lr, step and per-layer norms on a
    non-finite loss.
    """
    net = model if isinstance(model, Network) else Network(model, seed=cfg.seed)
    spec: ArchSpec = net.spec
    if spec.head.num_classes != dataset.classes:
        raise ConfigError(f"head predicts {spec.head.num_classes} classes, dataset has {dataset.classes}")
    if dataset.image_shape != spec.input_shape:
        raise ConfigError(f"dataset images {dataset.image_shape} do not match input {spec.input_shape}")

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    opt = SGDNesterov(net.parameters(), cfg.momentum, cfg.weight_decay)
    report = TrainReport(network=net)

    with threadpool_limits(limits=cfg.threads):
        step = 0
        for _ in range(cfg.epochs):
            if step >= total:
                break
            epoch_loss, seen, correct = 0.0, 0, 0
            for x, y in dataset.batches(cfg.batch_size, rng):
                if step >= total:
                    break
                lr = learning_rate(cfg, step, total)
                net.zero_grad()
                with Tape() as tape:
                    logits = net(Tensor(x), train=True)
                    loss = F.cross_entropy(logits, smooth_targets(y, dataset.classes, cfg.label_smoothing))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss became {value} at step {step} (lr {lr:g})",
                                           _diagnostics(net, lr, step))
                backward(tape, loss)
                opt.step(lr)
                report.losses.append(value)
                report.lrs.append(lr)
                epoch_loss += value * len(y)
                seen += len(y)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
                step += 1
            report.epoch_losses.append(epoch_loss / max(seen, 1))
            report.epoch_accuracy.append(correct / max(seen, 1))
        report.steps = step
        report.final_accuracy = accuracy(net, dataset)
    return report
