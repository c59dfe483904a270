"""Reproducibility manifests and schema-stable CSV output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import sys
import time

import numpy as np
from threadpoolctl import threadpool_info

from ..architect import ArchSpec, dumps


def spec_hash(spec: ArchSpec) -> str:
    return hashlib.sha256(dumps(spec).encode()).hexdigest()[:16]


def machine_fingerprint() -> dict:
    blas = [
        {k: info.get(k) for k in ("internal_api", "version", "num_threads")}
        for info in threadpool_info()
    ]
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "blas": blas,
    }


def manifest(seed, specs=(), threads=1, command=None, extra=None) -> dict:
    specs = [specs] if isinstance(specs, ArchSpec) else list(specs)
    return {
        "seed": seed,
        "specs": {s.name: spec_hash(s) for s in specs},
        "thread_mode": "single" if threads == 1 else f"multi({threads})",
        "command": command,
        "machine": machine_fingerprint(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        **(extra or {}),
    }


def write_manifest(path, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def format_cell(value) -> str:
    """Locale-independent text for a CSV cell."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return "nan" if np.isnan(value) else format(float(value), ".6g")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def to_csv(header, rows) -> str:
    """CSV text with a fixed header; each row is a mapping keyed by header names."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_cell(row.get(k, "")) for k in header])
    return buf.getvalue()
