"""On-disk formats shared by the pipeline stages.

Everything written here is deterministic: rows are sorted, JSON keys are
sorted and floats use ``repr``, so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .datamodel import UNDETERMINED, Histogram, Prototype, format_value, parse_value
from .recon_diff import PartialReconstruction
from .recon_opt import RankedPrototype, RankedReconstruction
from .tabulate import TableInstance, Tabulation, Workload


def _plain(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=1) + "\n"


def write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj))


def read_json(path: Path) -> Any:
    with open(path) as fh:
        return json.load(fh)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _writer(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def write_tables(directory: Path, tabulation: Tabulation, workloads: Sequence[Workload]) -> list[Path]:
    """One wide CSV per workload (``unit`` then one column per cell label)."""
    paths = []
    for w in workloads:
        units = sorted(u for u, t in tabulation.items() if w.name in t)
        path = directory / f"{w.name}.csv"
        fh, out = _writer(path)
        with fh:
            out.writerow(("unit",) + w.labels)
            for u in units:
                out.writerow([u] + [int(x) for x in tabulation[u][w.name].counts])
        paths.append(path)
    return paths


def read_tables(directory: Path, workloads: Sequence[Workload]) -> Tabulation:
    result: Tabulation = {}
    for w in workloads:
        path = directory / f"{w.name}.csv"
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = tuple(rows[0][1:])
        if header != w.labels:
            raise ValueError(f"{path}: cell labels do not match workload {w.name}")
        for row in rows[1:]:
            counts = np.array([int(x) for x in row[1:]], dtype=np.int64)
            result.setdefault(row[0], {})[w.name] = TableInstance(w.name, row[0], w.labels, counts)
    return result


# ---------------------------------------------------------------------------
# Reconstructions
# ---------------------------------------------------------------------------


def write_partial(path: Path, partial: PartialReconstruction) -> None:
    fh, out = _writer(path)
    with fh:
        out.writerow(partial.attrs + ("multiplicity", "determined"))
        for p, n in partial.histogram.sorted_items():
            determined = int(all(v is not UNDETERMINED for v in p.values))
            out.writerow([format_value(v) for v in p.values] + [n, determined])


def read_histogram(path: Path) -> Histogram:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    n_attrs = header.index("multiplicity")
    attrs = tuple(header[:n_attrs])
    items = []
    for row in rows[1:]:
        values = tuple(parse_value(v, a) for a, v in zip(attrs, row[:n_attrs]))
        items.append((Prototype(attrs, values), int(row[n_attrs])))
    return Histogram(attrs, items)


def write_ranked(path: Path, ranked: RankedReconstruction) -> None:
    fh, out = _writer(path)
    with fh:
        out.writerow(("rank",) + ranked.attrs + ("frequency", "occurrences", "mean_multiplicity"))
        for e in ranked.entries:
            vals = [format_value(v) for v in e.prototype.values]
            out.writerow([e.rank] + vals + [e.frequency, e.occurrences, repr(float(e.mean_multiplicity))])


def read_ranked(path: Path, n_runs: int) -> RankedReconstruction:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    attrs = tuple(header[1:-3])
    entries = []
    for row in rows[1:]:
        values = tuple(parse_value(v, a) for a, v in zip(attrs, row[1:-3]))
        entries.append(
            RankedPrototype(int(row[0]), Prototype(attrs, values), int(row[-3]), int(row[-2]), float(row[-1]))
        )
    return RankedReconstruction(attrs, n_runs, entries)


def write_losses(path: Path, losses: Sequence[Sequence[float]]) -> None:
    """Long format: run, iteration, loss."""
    fh, out = _writer(path)
    with fh:
        out.writerow(("run", "iteration", "loss"))
        for r, hist in enumerate(losses):
            for i, loss in enumerate(hist):
                out.writerow((r, i, repr(float(loss))))


def write_scatter(path: Path, pairs: Iterable[tuple[int, int]]) -> None:
    fh, out = _writer(path)
    with fh:
        out.writerow(("multiplicity", "frequency"))
        out.writerows(pairs)
