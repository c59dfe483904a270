"""Command-line entry point: ``pfnet <subcommand> ...``.

Exit status is 0 on success, 1 when the input is invalid (bad flags, bad
spec files, unknown presets) and 2 when a valid request fails at run time
(out of memory, divergence, a gradient check over tolerance).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from fractions import Fraction

from .architect import PRESETS, apply_overrides, build_preset, describe, dumps, load_spec
from .costmodel import count, count_diff
from .errors import ConfigError, FormatError, PfnetError, ShapeError, UsageError
from .gradsuite import run_suite
from .harness.bench import MIN_REPS, MIN_WARMUP, bench, resolve_threads
from .harness.data import SYNTH_KINDS, load_cifar10, synth
from .harness.manifest import manifest, to_csv
from .harness.sweep import GRID_OPS, GRID_RHOS, GRID_WIDTHS, single_bottleneck_grid, sweep
from .harness.train import TRAIN_PRESETS, accuracy, train, train_preset

VALIDATION_ERRORS = (ConfigError, ShapeError, FormatError, UsageError)


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we reserve 2 for run-time failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _ArgumentError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# argument groups


def _spec_args(p, required=True):
    src = p.add_mutually_exclusive_group(required=required)
    src.add_argument("--spec", help="architecture spec file (JSON)")
    src.add_argument("--preset", choices=PRESETS, help="named architecture")
    p.add_argument("--pattern", help="block pattern for presets, e.g. BBBB, EEEE, hybrid, E/B, alternate")
    p.add_argument("--variant", default="maxpool3", help="spatial op of efficient blocks (default maxpool3)")
    p.add_argument("--input", type=int, help="input side length")
    p.add_argument("--classes", type=int, help="number of output classes")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a spec field (name, input_size, head.num_classes); repeatable")


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", default=None, help="thread count, 'single' or 'multi' (env PFNET_THREADS wins)")
    p.add_argument("--out", help="output file (or directory for bench/train/sweep)")


def _data_args(p):
    p.add_argument("--data", default="blobs",
                   help=f"dataset: one of {', '.join(SYNTH_KINDS)} or cifar10:PATH")
    p.add_argument("--n", type=int, default=256, help="number of training examples")
    p.add_argument("--size", type=int, default=8, help="image side for synthetic datasets")
    p.add_argument("--train-preset", choices=sorted(TRAIN_PRESETS), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pfnet", description="Parameter-free spatial operators: build, count, bench, train.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="validate a spec and write it in normalised form")
    _spec_args(p)
    _common(p)

    p = sub.add_parser("describe", help="print the layer table of a spec")
    _spec_args(p)
    _common(p)

    p = sub.add_parser("count", help="parameter and MAC counts")
    _spec_args(p)
    _common(p)
    p.add_argument("--format", choices=("summary", "csv", "json"), default="summary")

    p = sub.add_parser("diff", help="block-aligned cost difference between two specs")
    _spec_args(p)
    _common(p)
    other = p.add_mutually_exclusive_group(required=True)
    other.add_argument("--vs-spec", help="spec file to compare against")
    other.add_argument("--vs-pattern", help="pattern for the same preset to compare against")
    p.add_argument("--format", choices=("summary", "csv", "json"), default="summary")

    p = sub.add_parser("bench", help="forward latency")
    _spec_args(p)
    _common(p)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=MIN_REPS)
    p.add_argument("--warmup", type=int, default=MIN_WARMUP)

    p = sub.add_parser("train", help="train a spec and report loss and accuracy per epoch")
    _spec_args(p)
    _common(p)
    _data_args(p)

    p = sub.add_parser("sweep", help="replacement sweep or single-bottleneck grid")
    _spec_args(p, required=False)
    _common(p)
    _data_args(p)
    p.add_argument("--grid", action="store_true", help="run the single-bottleneck grid instead of a replacement sweep")
    p.add_argument("--mode", choices=("bench", "train"), default="bench")
    p.add_argument("--ops", help="comma-separated candidate operators")
    p.add_argument("--budget", type=int, help="measure a stratified subsample of this many specs")
    p.add_argument("--widths", help="grid widths, comma-separated")
    p.add_argument("--rhos", help="grid expansion ratios, comma-separated (fractions allowed)")
    p.add_argument("--seeds", help="grid seeds, comma-separated")
    p.add_argument("--time-budget", type=float, help="stop after this many seconds and flag the CSV incomplete")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=MIN_REPS)
    p.add_argument("--warmup", type=int, default=MIN_WARMUP)

    p = sub.add_parser("gradcheck", help="run the gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", action="append", help="run only this case; repeatable")
    p.add_argument("--out", help="write results as CSV")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _overrides(pairs):
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load(args, path=None, pattern=None):
    path = path if path is not None else args.spec
    if path is not None:
        if args.pattern and path == args.spec:
            raise ConfigError("--pattern applies to presets, not spec files")
        if not os.path.isfile(path):
            raise ConfigError(f"spec file not found: {path}")
        spec = load_spec(path)
        if args.input is not None:
            spec = replace(spec, input_shape=(spec.input_shape[0], args.input, args.input))
        if args.classes is not None:
            spec = replace(spec, head=replace(spec.head, num_classes=args.classes))
    else:
        spec = build_preset(args.preset, pattern or args.pattern, args.variant, args.input, args.classes)
    return apply_overrides(spec, _overrides(args.set))


def _emit(text, out=None):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _emit_table(csv_text, meta, out, stem):
    """CSV and manifest into directory ``out``, or CSV to stdout and manifest to stderr."""
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, f"{stem}.csv"), "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {os.path.join(out, stem + '.csv')} and manifest.json")
    else:
        sys.stdout.write(csv_text)
        sys.stderr.write(json.dumps(meta, sort_keys=True) + "\n")


def _dataset(args, input_size=None):
    if args.data.startswith("cifar10:"):
        train_set, test_set = load_cifar10(args.data.split(":", 1)[1])
        return train_set.subset(args.n, args.seed), test_set
    size = input_size or args.size
    return synth(args.data, args.n, seed=args.seed, size=size), None


def _train_cfg(args, threads):
    edits = {k: getattr(args, k) for k in ("epochs", "lr", "batch_size", "weight_decay", "max_steps")
             if getattr(args, k) is not None}
    return train_preset(args.train_preset, seed=args.seed, threads=threads, **edits)


def _csv_list(text, cast):
    return tuple(cast(v.strip()) for v in text.split(",") if v.strip())


# ---------------------------------------------------------------------------
# subcommands


def cmd_build(args):
    _emit(dumps(_load(args)), args.out)


def cmd_describe(args):
    _emit(describe(_load(args)), args.out)


def _format_cost(obj, fmt):
    if fmt == "csv":
        return obj.to_csv()
    if fmt == "json":
        return json.dumps(obj.to_dict(), indent=2)
    return obj.summary()


def cmd_count(args):
    _emit(_format_cost(count(_load(args)), args.format), args.out)


def cmd_diff(args):
    a = _load(args)
    if args.vs_spec:
        b = _load(args, path=args.vs_spec)
    else:
        if args.preset is None:
            raise ConfigError("--vs-pattern needs --preset")
        b = _load(args, pattern=args.vs_pattern)
    _emit(_format_cost(count_diff(a, b), args.format), args.out)


def cmd_bench(args):
    spec = _load(args)
    threads = resolve_threads(args.threads)
    res = bench(spec, batch=args.batch, reps=args.reps, warmup=args.warmup, threads=threads, seed=args.seed)
    header = ("spec", "batch", "threads", "reps", "warmup", "median_ms", "p10_ms", "p90_ms", "images_per_s")
    row = {"spec": spec.name, "batch": args.batch, "threads": res.thread_mode, "reps": args.reps,
           "warmup": args.warmup, "median_ms": res.median, "p10_ms": res.p10, "p90_ms": res.p90,
           "images_per_s": res.throughput}
    meta = manifest(args.seed, spec, threads, command="bench",
                    extra={"latencies_ms": res.latencies_ms, "statistic": "median after warmup"})
    _emit_table(to_csv(header, [row]), meta, args.out, "bench")


def cmd_train(args):
    spec = _load(args)
    threads = resolve_threads(args.threads)
    data, test = _dataset(args, spec.input_shape[1])
    if data.classes != spec.head.num_classes:
        spec = replace(spec, head=replace(spec.head, num_classes=data.classes))
    if data.image_shape != spec.input_shape:
        raise ConfigError(f"dataset images {data.image_shape} do not match spec input {spec.input_shape}; use --input")
    cfg = _train_cfg(args, threads)
    report = train(spec, data, cfg)
    header = ("epoch", "loss", "train_accuracy")
    rows = [{"epoch": i + 1, "loss": l, "train_accuracy": a}
            for i, (l, a) in enumerate(zip(report.epoch_losses, report.epoch_accuracy))]
    extra = {"steps": report.steps, "final_train_accuracy": report.final_accuracy, "data": args.data}
    if test is not None:
        extra["test_accuracy"] = accuracy(report.network, test)
    meta = manifest(args.seed, spec, threads, command="train", extra=extra)
    _emit_table(to_csv(header, rows), meta, args.out, "train")
    if args.out:
        report.network.save(os.path.join(args.out, "checkpoint.pfnt"))


def cmd_sweep(args):
    threads = resolve_threads(args.threads)
    data = test = cfg = None
    if args.mode == "train":
        size = args.input or (32 if args.data.startswith("cifar10:") else args.size)
        data, test = _dataset(args, size)
        cfg = _train_cfg(args, threads)
    common = dict(dataset=data, cfg=cfg, eval_data=test, batch=args.batch, reps=args.reps,
                  warmup=args.warmup, threads=threads, time_budget=args.time_budget)
    if args.grid:
        if args.spec or args.preset:
            raise ConfigError("--grid builds its own specs; drop --spec/--preset")
        result = single_bottleneck_grid(
            args.mode,
            rhos=_csv_list(args.rhos, Fraction) if args.rhos else GRID_RHOS,
            ops=_csv_list(args.ops, str) if args.ops else GRID_OPS,
            widths=_csv_list(args.widths, int) if args.widths else GRID_WIDTHS,
            seeds=_csv_list(args.seeds, int) if args.seeds else (args.seed,),
            input_size=args.input or 32,
            num_classes=args.classes or 10,
            **common,
        )
        specs = []
    else:
        if not (args.spec or args.preset):
            raise ConfigError("a replacement sweep needs --spec or --preset")
        if not args.ops:
            raise ConfigError("a replacement sweep needs --ops")
        base = _load(args)
        if data is not None:
            base = replace(base, head=replace(base.head, num_classes=data.classes),
                           input_shape=data.image_shape)
        result = sweep(base, _csv_list(args.ops, str), args.mode, args.budget, seed=args.seed, **common)
        specs = [base]
    meta = manifest(args.seed, specs, threads, command="sweep",
                    extra={"mode": args.mode, "grid": args.grid, "complete": result.complete,
                           "measured": len(result.rows), "planned": result.total})
    _emit_table(result.to_csv(), meta, args.out, "grid" if args.grid else "sweep")


def cmd_gradcheck(args):
    results = run_suite(args.seed, names=set(args.only) if args.only else None)
    if not results:
        raise ConfigError(f"no gradient case named {args.only}")
    rows = []
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:32s} max error {r.worst:.3e} (tol {r.tol:g})")
        rows.append({"case": r.name, "max_error": r.worst, "tol": r.tol, "ok": r.ok})
    if args.out:
        _emit(to_csv(("case", "max_error", "tol", "ok"), rows), args.out)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} cases within tolerance")
    return 2 if failed else 0


COMMANDS = {
    "build": cmd_build,
    "describe": cmd_describe,
    "count": cmd_count,
    "diff": cmd_diff,
    "bench": cmd_bench,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args) or 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except _ArgumentError as exc:
        print(exc, file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"pfnet: invalid input: {exc}", file=sys.stderr)
        return 1
    except (PfnetError, MemoryError, OSError) as exc:
        print(f"pfnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
