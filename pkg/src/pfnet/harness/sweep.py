"""Replacement sweeps and the single-bottleneck grid."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from ..architect import ArchSpec, build_single
from ..costmodel import count
from ..errors import ConfigError
from .bench import MIN_REPS, MIN_WARMUP, bench
from .data import Dataset
from .manifest import to_csv
from .train import TrainConfig, accuracy, train

SWEEP_HEADER = ("index", "pattern", "ops", "replaced", "params", "macs", "median_ms", "p10_ms", "p90_ms", "accuracy")
GRID_HEADER = ("width", "rho", "op", "seed", "params", "macs", "median_ms", "p10_ms", "p90_ms", "accuracy")
GRID_RHOS = (Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2))
GRID_OPS = ("conv3x3", "dwconv3x3", "maxpool3", "avgpool3")
GRID_WIDTHS = (32, 64)


@dataclass
class SweepResult:
    header: tuple
    rows: list = field(default_factory=list)
    total: int = 0
    complete: bool = True

    def to_csv(self) -> str:
        text = to_csv(self.header, self.rows)
        if not self.complete:
            text += f"# incomplete: {len(self.rows)} of {self.total} specs\n"
        return text

    def sorted_by(self, key):
        return sorted(self.rows, key=lambda r: r[key])


def _apply(base: ArchSpec, choice) -> ArchSpec:
    it = iter(choice)
    stages = tuple(replace(s, blocks=tuple(b.with_op(next(it)) for b in s.blocks)) for s in base.stages)
    tag = "".join(op[0] for op in choice)
    return replace(base, name=f"{base.name}[{tag}]", stages=stages)


def _stratum_size(n, k_other, m):
    return math.comb(n, m) * k_other ** m


def _stratum(base_ops, others, m):
    for pos in itertools.combinations(range(len(base_ops)), m):
        for repl in itertools.product(*(others[p] for p in pos)):
            choice = list(base_ops)
            for p, op in zip(pos, repl):
                choice[p] = op
            yield tuple(choice)


def subsample_assignments(base_ops, ops, budget, seed=0):
    """Up to ``budget`` distinct assignments, spread evenly over replacement counts.

    The replacement count of an assignment is the number of blocks whose
    operator differs from the base.  Quotas are dealt round-robin over the
    counts 0..n, capped by how many assignments each count admits; inside a
    count the assignments are drawn uniformly.
    """
    if any(b not in ops for b in base_ops):
        raise ConfigError("subsampling needs every base operator among the candidates")
    n, k = len(base_ops), len(ops)
    rng = np.random.default_rng(seed)
    others = [[o for o in ops if o != b] for b in base_ops]
    sizes = [math.comb(n, m) * (k - 1) ** m for m in range(n + 1)]
    quota = [0] * (n + 1)
    left = budget
    while left > 0 and any(q < s for q, s in zip(quota, sizes)):
        for m in range(n + 1):
            if left and quota[m] < sizes[m]:
                quota[m] += 1
                left -= 1
    out = []
    for m, q in enumerate(quota):
        if q == 0:
            continue
        if sizes[m] <= max(4 * q, 1 << 12):
            pool = list(_stratum(base_ops, others, m))
            out.extend(pool[i] for i in sorted(rng.choice(len(pool), size=q, replace=False)))
            continue
        seen = set()
        while len(seen) < q:
            choice = list(base_ops)
            for p in rng.choice(n, size=m, replace=False):
                choice[p] = others[p][rng.integers(k - 1)]
            seen.add(tuple(choice))
        out.extend(sorted(seen))
    return out


def _measure(spec, mode, dataset, cfg, batch, reps, warmup, threads, seed, eval_data=None):
    cost = count(spec)
    res = bench(spec, batch=batch, reps=reps, warmup=warmup, threads=threads, seed=seed)
    row = {
        "params": cost.params,
        "macs": cost.macs,
        "median_ms": res.median,
        "p10_ms": res.p10,
        "p90_ms": res.p90,
        "accuracy": float("nan"),
    }
    if mode == "train":
        report = train(spec, dataset, replace(cfg, seed=seed))
        row["accuracy"] = (
            accuracy(report.network, eval_data) if eval_data is not None else report.final_accuracy
        )
    return row


def sweep(base: ArchSpec, candidate_ops, mode: str = "bench", budget: int | None = None, *,
          dataset: Dataset | None = None, cfg: TrainConfig | None = None, eval_data: Dataset | None = None,
          batch: int = 1, reps: int = MIN_REPS, warmup: int = MIN_WARMUP, threads=1, seed: int = 0,
          time_budget: float | None = None) -> SweepResult:
    """One row per replacement of ``base`` by ``candidate_ops``.

    With ``budget`` smaller than the number of assignments, a stratified
    subsample (see :func:`subsample_assignments`) is measured instead.  When
    ``time_budget`` seconds run out the result is returned flagged incomplete.
    """
    if mode not in ("bench", "train"):
        raise ConfigError(f"sweep mode must be bench or train, got {mode!r}")
    if mode == "train" and dataset is None:
        raise ConfigError("train mode needs a dataset")
    ops = sorted(set(candidate_ops))
    if not ops:
        raise ConfigError("no candidate operators")
    cfg = cfg or TrainConfig()
    base_ops = tuple(b.spatial_op for b in base.blocks)
    total = len(ops) ** len(base_ops)
    if budget is None or budget >= total:
        choices = itertools.product(ops, repeat=len(base_ops))
        planned = total
    else:
        choices = subsample_assignments(base_ops, ops, budget, seed)
        planned = len(choices)
    result = SweepResult(SWEEP_HEADER, total=planned)
    start = time.perf_counter()
    for i, choice in enumerate(choices):
        if time_budget is not None and time.perf_counter() - start > time_budget:
            result.complete = False
            break
        spec = _apply(base, choice)
        row = {
            "index": i,
            "pattern": spec.pattern(),
            "ops": "".join(op[0] for op in choice),
            "replaced": sum(a != b for a, b in zip(choice, base_ops)),
        }
        row.update(_measure(spec, mode, dataset, cfg, batch, reps, warmup, threads, seed, eval_data))
        result.rows.append(row)
    return result


def single_bottleneck_grid(mode: str = "bench", *, rhos=GRID_RHOS, ops=GRID_OPS, widths=GRID_WIDTHS,
                           seeds=(0,), dataset: Dataset | None = None, cfg: TrainConfig | None = None,
                           eval_data: Dataset | None = None,
                           input_size: int = 32, num_classes: int = 10, batch: int = 1,
                           reps: int = MIN_REPS, warmup: int = MIN_WARMUP, threads=1,
                           time_budget: float | None = None) -> SweepResult:
    """Stem + one bottleneck + head, over expansion ratio x spatial op x width."""
    if mode not in ("bench", "train"):
        raise ConfigError(f"grid mode must be bench or train, got {mode!r}")
    if mode == "train" and dataset is None:
        raise ConfigError("train mode needs a dataset")
    cfg = cfg or TrainConfig()
    if dataset is not None:
        input_size = dataset.image_shape[1]
        num_classes = dataset.classes
    cells = list(itertools.product(widths, rhos, ops, seeds))
    result = SweepResult(GRID_HEADER, total=len(cells))
    start = time.perf_counter()
    for width, rho, op, seed in cells:
        if time_budget is not None and time.perf_counter() - start > time_budget:
            result.complete = False
            break
        spec = build_single(op, width, Fraction(rho), input_size, num_classes)
        row = {"width": width, "rho": str(Fraction(rho)), "op": op, "seed": seed}
        row.update(_measure(spec, mode, dataset, cfg, batch, reps, warmup, threads, seed, eval_data))
        result.rows.append(row)
    return result


def max_vs_avg(rows, rho=Fraction(1, 4)) -> dict:
    """Per (width, seed): accuracy of max-pool and avg-pool cells at ``rho``."""
    out: dict = {}
    for r in rows:
        if Fraction(r["rho"]) != Fraction(rho) or r["op"] not in ("maxpool3", "avgpool3"):
            continue
        out.setdefault((r["width"], r["seed"]), {})[r["op"]] = r["accuracy"]
    return {
        key: {"max": v["maxpool3"], "avg": v["avgpool3"], "max_wins": v["maxpool3"] >= v["avgpool3"]}
        for key, v in sorted(out.items())
        if "maxpool3" in v and "avgpool3" in v
    }
