"""Census table workloads as counting queries, and their evaluation.

Every predicate is a product of per-attribute accepted sets over
``sex x age x race_group x hispanic``.  Tabulation therefore reduces to
building one count cube of shape :data:`CUBE_SHAPE` per geographic unit and
multiplying it by a 0/1 cell matrix per workload.
"""
from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .datamodel import (
    AGE_P12_BUCKETS,
    AGE_PCT12_BUCKETS,
    FEMALE,
    HISPANIC,
    MALE,
    MAX_AGE,
    NOT_HISPANIC,
    RACE_GROUPS,
    Dataset,
    SchemaError,
    geo_key_attr,
)

CUBE_AXES = ("sex", "age", "race_group", "hispanic")
CUBE_SHAPE = (2, MAX_AGE + 1, 7, 2)
CUBE_SIZE = int(np.prod(CUBE_SHAPE))
# value of the first category on each cube axis
_AXIS_OFFSET = {"sex": MALE, "age": 0, "race_group": 1, "hispanic": NOT_HISPANIC}

RACE_LABELS = {1: "white", 2: "black", 3: "aian", 4: "asian", 5: "nhpi", 6: "other", 7: "two_or_more"}
SEX_LABELS = {MALE: "male", FEMALE: "female"}
_SEX_CODES = {"male": MALE, "m": MALE, "female": FEMALE, "f": FEMALE}
_HISP_CODES = {"hispanic": HISPANIC, "yes": HISPANIC, "not_hispanic": NOT_HISPANIC, "no": NOT_HISPANIC}
_RACE_CODES = {v: k for k, v in RACE_LABELS.items()}

RACE_ITERATION_LETTERS = "ABCDEFG"  # race groups 1..7
NOT_HISPANIC_LETTERS = "IJKLMNO"  # race groups 1..7, not Hispanic


@dataclass(frozen=True)
class Predicate:
    """Accepted values per attribute; ``None`` accepts everything.

    ``age`` is an inclusive interval, ``race`` a set of race groups (1..7).
    """

    sex: frozenset[int] | None = None
    age: tuple[int, int] | None = None
    race: frozenset[int] | None = None
    hispanic: frozenset[int] | None = None

    def __post_init__(self):
        for name in ("sex", "race", "hispanic"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, frozenset(int(x) for x in v))
        if self.sex is not None and not self.sex <= {MALE, FEMALE}:
            raise SchemaError(f"sex values {sorted(self.sex)} outside the domain")
        if self.hispanic is not None and not self.hispanic <= {NOT_HISPANIC, HISPANIC}:
            raise SchemaError(f"hispanic values {sorted(self.hispanic)} outside the domain")
        if self.race is not None and not self.race <= set(RACE_GROUPS):
            raise SchemaError(f"race groups {sorted(self.race)} outside 1..7")
        if self.age is not None:
            lo, hi = (int(x) for x in self.age)
            if not 0 <= lo <= hi <= MAX_AGE:
                raise SchemaError(f"age interval {self.age} is empty or outside 0..{MAX_AGE}")
            object.__setattr__(self, "age", (lo, hi))

    def axis_masks(self) -> tuple[np.ndarray, ...]:
        """Boolean acceptance mask over each cube axis."""
        masks = []
        for axis, size in zip(CUBE_AXES, CUBE_SHAPE):
            m = np.zeros(size, dtype=bool)
            if axis == "age":
                lo, hi = self.age if self.age is not None else (0, MAX_AGE)
                m[lo : hi + 1] = True
            else:
                accepted = getattr(self, "race" if axis == "race_group" else axis)
                if accepted is None:
                    m[:] = True
                else:
                    m[[v - _AXIS_OFFSET[axis] for v in accepted]] = True
            masks.append(m)
        return tuple(masks)

    def cube_mask(self) -> np.ndarray:
        s, a, r, h = self.axis_masks()
        return s[:, None, None, None] & a[None, :, None, None] & r[None, None, :, None] & h[None, None, None, :]

    def matches(self, dataset: Dataset) -> np.ndarray:
        """Row mask by direct comparison against the stored columns."""
        ok = np.ones(len(dataset), dtype=bool)
        if self.sex is not None:
            ok &= np.isin(dataset.column("sex"), list(self.sex))
        if self.age is not None:
            age = dataset.column("age")
            ok &= (age >= self.age[0]) & (age <= self.age[1])
        if self.race is not None:
            ok &= np.isin(dataset.column("race_group"), list(self.race))
        if self.hispanic is not None:
            ok &= np.isin(dataset.column("hispanic"), list(self.hispanic))
        return ok

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {}
        if self.sex is not None:
            d["sex"] = sorted(self.sex)
        if self.age is not None:
            d["age"] = list(self.age)
        if self.race is not None:
            d["race"] = sorted(self.race)
        if self.hispanic is not None:
            d["hispanic"] = sorted(self.hispanic)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Predicate:
        def codes(values, names):
            if values is None:
                return None
            if isinstance(values, (str, int)):
                values = [values]
            return frozenset(names[v.lower()] if isinstance(v, str) else int(v) for v in values)

        unknown = set(d) - {"sex", "age", "race", "hispanic", "label"}
        if unknown:
            raise SchemaError(f"unknown predicate attributes {sorted(unknown)}")
        age = d.get("age")
        if isinstance(age, int):
            age = (age, age)
        return cls(
            sex=codes(d.get("sex"), _SEX_CODES),
            age=tuple(age) if age is not None else None,
            race=codes(d.get("race"), _RACE_CODES),
            hispanic=codes(d.get("hispanic"), _HISP_CODES),
        )


@dataclass(frozen=True)
class CountingQuery:
    geo_level: str
    unit: str
    predicate: Predicate = Predicate()


@dataclass(frozen=True)
class Cell:
    label: str
    predicate: Predicate


@dataclass(frozen=True)
class Workload:
    name: str
    geo_level: str
    cells: tuple[Cell, ...]

    def __post_init__(self):
        geo_key_attr(self.geo_level)
        labels = [c.label for c in self.cells]
        if len(set(labels)) != len(labels):
            raise SchemaError(f"workload {self.name} has duplicate cell labels")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(c.label for c in self.cells)

    @cached_property
    def matrix(self) -> np.ndarray:
        """(n_cells, CUBE_SIZE) 0/1 matrix mapping a count cube to cell counts."""
        m = np.zeros((len(self.cells), CUBE_SIZE))
        for i, c in enumerate(self.cells):
            m[i] = c.predicate.cube_mask().reshape(-1)
        return m

    def queries(self, unit: str) -> list[CountingQuery]:
        return [CountingQuery(self.geo_level, unit, c.predicate) for c in self.cells]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "geo_level": self.geo_level,
            "cells": [{"label": c.label, **c.predicate.to_dict()} for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Workload:
        cells = tuple(Cell(str(c["label"]), Predicate.from_dict(c)) for c in d["cells"])
        return cls(str(d["name"]), str(d["geo_level"]), cells)


@dataclass(frozen=True)
class TableInstance:
    workload: str
    unit: str
    labels: tuple[str, ...]
    counts: np.ndarray = field(compare=False)

    def __getitem__(self, label: str) -> int:
        return int(self.counts[self.labels.index(label)])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TableInstance):
            return NotImplemented
        return (self.workload, self.unit, self.labels) == (other.workload, other.unit, other.labels) and bool(
            np.array_equal(self.counts, other.counts)
        )

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.labels, (int(x) for x in self.counts)))

    def with_counts(self, counts: np.ndarray) -> TableInstance:
        return TableInstance(self.workload, self.unit, self.labels, np.asarray(counts, dtype=np.int64))


# Tables for one unit keyed by workload name; a tabulation maps unit -> tables.
UnitTables = dict[str, TableInstance]
Tabulation = dict[str, UnitTables]


# ---------------------------------------------------------------------------
# Built-in workloads
# ---------------------------------------------------------------------------


def age_label(lo: int, hi: int) -> str:
    return f"age_{lo}" if lo == hi else f"age_{lo}_{hi}"


def sex_age_label(sex: int, lo: int, hi: int) -> str:
    return f"{SEX_LABELS[sex]}_{age_label(lo, hi)}"


def _sex_by_age(name: str, level: str, buckets, base: Predicate) -> Workload:
    def p(**kw) -> Predicate:
        d = {k: getattr(base, k) for k in ("sex", "age", "race", "hispanic")}
        d.update(kw)
        return Predicate(**d)

    cells = [Cell("total", base)]
    for sex in (MALE, FEMALE):
        cells.append(Cell(SEX_LABELS[sex], p(sex={sex})))
        for lo, hi in buckets:
            cells.append(Cell(sex_age_label(sex, lo, hi), p(sex={sex}, age=(lo, hi))))
    return Workload(name, level, tuple(cells))


def _race_iterations(prefix: str, level: str, buckets) -> list[Workload]:
    out = []
    for letter, g in zip(RACE_ITERATION_LETTERS, RACE_GROUPS):
        out.append(_sex_by_age(prefix + letter, level, buckets, Predicate(race={g})))
    out.append(_sex_by_age(prefix + "H", level, buckets, Predicate(hispanic={HISPANIC})))
    return out


def _hispanic_by_race(name: str, level: str, base_age=None, subtotals: bool = True) -> Workload:
    cells = [Cell("total", Predicate(age=base_age))]
    if subtotals:
        cells.append(Cell("hispanic", Predicate(age=base_age, hispanic={HISPANIC})))
        cells.append(Cell("not_hispanic", Predicate(age=base_age, hispanic={NOT_HISPANIC})))
    for h, hl in ((HISPANIC, "hispanic"), (NOT_HISPANIC, "not_hispanic")):
        for g in RACE_GROUPS:
            cells.append(Cell(f"{hl}_{RACE_LABELS[g]}", Predicate(age=base_age, race={g}, hispanic={h})))
    return Workload(name, level, tuple(cells))


def builtin_workloads(geo_level: str, age_buckets: Sequence[tuple[int, int]] | None = None) -> list[Workload]:
    """The census table list used by the reconstruction experiments.

    Block level: P1, P6, P7, P9, P11, P12 and P12A-I.  Tract level: PCT12,
    PCT12A-G, PCT12H and PCT12I-O.  ``age_buckets`` overrides the P12 buckets.
    """
    if geo_level == "block":
        buckets = tuple(age_buckets) if age_buckets is not None else AGE_P12_BUCKETS
        p6 = [Cell("total", Predicate())] + [Cell(RACE_LABELS[g], Predicate(race={g})) for g in RACE_GROUPS]
        out = [
            Workload("P1", "block", (Cell("total", Predicate()),)),
            Workload("P6", "block", tuple(p6)),
            _hispanic_by_race("P7", "block", subtotals=False),
            _hispanic_by_race("P9", "block"),
            _hispanic_by_race("P11", "block", base_age=(18, MAX_AGE)),
            _sex_by_age("P12", "block", buckets, Predicate()),
        ]
        out += _race_iterations("P12", "block", buckets)
        out.append(_sex_by_age("P12I", "block", buckets, Predicate(race={1}, hispanic={NOT_HISPANIC})))
        return out
    if geo_level == "tract":
        buckets = tuple(age_buckets) if age_buckets is not None else AGE_PCT12_BUCKETS
        out = [_sex_by_age("PCT12", "tract", buckets, Predicate())]
        out += _race_iterations("PCT12", "tract", buckets)
        for letter, g in zip(NOT_HISPANIC_LETTERS, RACE_GROUPS):
            out.append(_sex_by_age("PCT12" + letter, "tract", buckets, Predicate(race={g}, hispanic={NOT_HISPANIC})))
        return out
    raise SchemaError(f"no built-in workloads at level {geo_level!r}")


def load_workloads(path: str | Path) -> list[Workload]:
    """Read a declarative workload file (YAML or JSON): ``{workloads: [...]}``."""
    with open(path) as fh:
        if str(path).endswith(".json"):
            doc = json.load(fh)
        else:
            doc = yaml.load(fh, Loader=getattr(yaml, "CSafeLoader", yaml.SafeLoader))
    items = doc["workloads"] if isinstance(doc, Mapping) else doc
    return [Workload.from_dict(w) for w in items]


def dump_workloads(workloads: Iterable[Workload], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump({"workloads": [w.to_dict() for w in workloads]}, fh, indent=1)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate_query(dataset: Dataset, q: CountingQuery) -> int:
    if not len(dataset):
        return 0
    mask = dataset.unit_mask(q.geo_level, q.unit) & q.predicate.matches(dataset)
    return int(mask.sum())


def count_cubes(dataset: Dataset, geo_level: str, units: Sequence[str] | None = None) -> tuple[list[str], np.ndarray]:
    """Per-unit count cubes, shape (n_units, CUBE_SIZE)."""
    if units is None:
        units = dataset.unit_ids(geo_level)
    units = list(units)
    cubes = np.zeros((len(units), CUBE_SIZE), dtype=np.int64)
    if not len(dataset) or not units:
        return units, cubes
    key = dataset.column(geo_key_attr(geo_level))
    wanted = np.array([int(u) for u in units], dtype=np.int64)
    order = np.argsort(wanted)
    pos = np.searchsorted(wanted[order], key)
    pos = np.clip(pos, 0, len(wanted) - 1)
    hit = wanted[order][pos] == key
    unit_idx = order[pos[hit]]
    flat = np.ravel_multi_index(
        (
            dataset.column("sex")[hit] - MALE,
            dataset.column("age")[hit],
            dataset.column("race_group")[hit] - 1,
            dataset.column("hispanic")[hit] - NOT_HISPANIC,
        ),
        CUBE_SHAPE,
    )
    np.add.at(cubes, (unit_idx, flat), 1)
    return units, cubes


def tables_from_cube(cube: np.ndarray, workloads: Iterable[Workload], unit: str) -> UnitTables:
    cube = np.asarray(cube, dtype=float).reshape(-1)
    out = {}
    for w in workloads:
        counts = np.rint(w.matrix @ cube).astype(np.int64)
        out[w.name] = TableInstance(w.name, unit, w.labels, counts)
    return out


def tabulate(dataset: Dataset, workloads: Iterable[Workload], units: Mapping[str, Sequence[str]] | None = None) -> Tabulation:
    """Evaluate every workload cell for every unit of the workload's level.

    ``units`` optionally restricts the units per level, e.g.
    ``{"tract": [...], "block": [...]}``; by default every populated unit is
    tabulated.
    """
    by_level: dict[str, list[Workload]] = {}
    for w in workloads:
        by_level.setdefault(w.geo_level, []).append(w)
    result: Tabulation = {}
    for level, ws in by_level.items():
        wanted = None if units is None or level not in units else units[level]
        ids, cubes = count_cubes(dataset, level, wanted)
        cubes_f = cubes.astype(float)
        per_w = {w.name: np.rint(cubes_f @ w.matrix.T).astype(np.int64) for w in ws}
        for i, unit in enumerate(ids):
            tables = result.setdefault(unit, {})
            for w in ws:
                tables[w.name] = TableInstance(w.name, unit, w.labels, per_w[w.name][i])
    return result


# ---------------------------------------------------------------------------
# Consistency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    unit: str
    table: str
    cell: str
    detail: str

    def to_dict(self) -> dict[str, str]:
        return {"kind": self.kind, "unit": self.unit, "table": self.table, "cell": self.cell, "detail": self.detail}


def _sex_age_tables(tables: UnitTables, prefix: str) -> list[str]:
    return [n for n in tables if n == prefix or (n.startswith(prefix) and len(n) == len(prefix) + 1)]


def check_consistency(tables: UnitTables) -> list[Violation]:
    """Arithmetic identities that every honest tabulation of one unit satisfies.

    Kinds reported: ``negative``; ``margin`` (total = male + female, sex total =
    sum over ages, Hispanic splits add up); ``race_sum`` (race iterations sum to
    the all-races table, and P-table totals agree with P1); ``h_redundancy``
    (PCT12H = sum A..G - sum I..O); ``hispanic_nonneg`` (an all-ethnicity cell
    is at least its not-Hispanic counterpart); ``subset`` (a restricted table
    never exceeds its parent).
    """
    out: list[Violation] = []
    if not tables:
        return out
    unit = next(iter(tables.values())).unit

    def flag(kind, table, cell, detail):
        out.append(Violation(kind, unit, table, cell, detail))

    def equal(kind, table, cell, lhs, rhs, what):
        if int(lhs) != int(rhs):
            flag(kind, table, cell, f"{what}: {int(lhs)} != {int(rhs)}")

    for name, t in tables.items():
        for label, v in zip(t.labels, t.counts):
            if v < 0:
                flag("negative", name, label, f"count {int(v)} < 0")

    for prefix in ("P12", "PCT12"):
        family = _sex_age_tables(tables, prefix)
        for name in family:
            t = tables[name]
            d = t.as_dict()
            if not {"total", "male", "female"} <= set(d):
                continue
            equal("margin", name, "total", d["total"], d["male"] + d["female"], "total vs male + female")
            for sex in ("male", "female"):
                ages = sum(v for k, v in d.items() if k.startswith(sex + "_age_"))
                equal("margin", name, sex, d[sex], ages, f"{sex} vs sum over ages")
        iterated = [prefix + c for c in RACE_ITERATION_LETTERS]
        if prefix in tables and all(n in tables for n in iterated):
            total = sum(tables[n].counts for n in iterated)
            for label, a, b in zip(tables[prefix].labels, total, tables[prefix].counts):
                equal("race_sum", prefix, label, a, b, f"sum of {prefix}A..G vs {prefix}")
        nothisp = [prefix + c for c in NOT_HISPANIC_LETTERS]
        h = prefix + "H"
        if h in tables and all(n in tables for n in iterated + nothisp):
            expect = sum(tables[n].counts for n in iterated) - sum(tables[n].counts for n in nothisp)
            for label, a, b in zip(tables[h].labels, tables[h].counts, expect):
                equal("h_redundancy", h, label, a, b, f"{h} vs sum A..G - sum I..O")
        for all_letter, nh_letter in zip(RACE_ITERATION_LETTERS, NOT_HISPANIC_LETTERS):
            a_name, n_name = prefix + all_letter, prefix + nh_letter
            if a_name in tables and n_name in tables:
                for label, a, b in zip(tables[a_name].labels, tables[a_name].counts, tables[n_name].counts):
                    if b > a:
                        flag("hispanic_nonneg", n_name, label, f"not-Hispanic {int(b)} exceeds {a_name} {int(a)}")
        if h in tables and prefix in tables:
            for label, a, b in zip(tables[h].labels, tables[h].counts, tables[prefix].counts):
                if a > b:
                    flag("subset", h, label, f"{int(a)} exceeds {prefix} {int(b)}")

    total = tables["P1"]["total"] if "P1" in tables else None
    if total is not None:
        for name in ("P6", "P7", "P9", "P12"):
            if name in tables:
                equal("race_sum", name, "total", tables[name]["total"], total, f"{name} total vs P1")
    if "P6" in tables:
        p6 = tables["P6"].as_dict()
        equal("margin", "P6", "total", p6["total"], sum(p6[RACE_LABELS[g]] for g in RACE_GROUPS), "total vs sum of races")
        for letter, g in zip(RACE_ITERATION_LETTERS, RACE_GROUPS):
            if "P12" + letter in tables:
                equal("race_sum", "P6", RACE_LABELS[g], p6[RACE_LABELS[g]], tables["P12" + letter]["total"], f"P6 vs P12{letter} total")
    for name in ("P7", "P9", "P11"):
        if name not in tables:
            continue
        d = tables[name].as_dict()
        hisp = sum(d[f"hispanic_{RACE_LABELS[g]}"] for g in RACE_GROUPS)
        nhisp = sum(d[f"not_hispanic_{RACE_LABELS[g]}"] for g in RACE_GROUPS)
        equal("margin", name, "total", d["total"], hisp + nhisp, "total vs Hispanic + not Hispanic")
        if "hispanic" in d:
            equal("margin", name, "hispanic", d["hispanic"], hisp, "Hispanic vs sum over races")
            equal("margin", name, "not_hispanic", d["not_hispanic"], nhisp, "not Hispanic vs sum over races")
        if name != "P11" and "P6" in tables:
            p6 = tables["P6"].as_dict()
            for g in RACE_GROUPS:
                r = RACE_LABELS[g]
                equal("race_sum", name, r, d[f"hispanic_{r}"] + d[f"not_hispanic_{r}"], p6[r], f"{name} {r} vs P6")
    if "P9" in tables and "P7" in tables:
        p9 = tables["P9"].as_dict()
        for label, v in tables["P7"].as_dict().items():
            equal("margin", "P7", label, v, p9[label], "P7 vs P9")
    if "P9" in tables and "P11" in tables:
        p9 = tables["P9"].as_dict()
        for label, v in tables["P11"].as_dict().items():
            if v > p9[label]:
                flag("subset", "P11", label, f"adults {v} exceed P9 {p9[label]}")
    if "P9" in tables and "P12H" in tables:
        equal("race_sum", "P9", "hispanic", tables["P9"]["hispanic"], tables["P12H"]["total"], "P9 Hispanic vs P12H total")
    if "P9" in tables and "P12I" in tables:
        equal("race_sum", "P9", "not_hispanic_white", tables["P9"]["not_hispanic_white"], tables["P12I"]["total"], "P9 vs P12I total")
    return out
