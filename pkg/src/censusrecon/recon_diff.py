"""Exact reconstruction by differencing released tables.

At tract level the all-ethnicity (PCT12A..G) and not-Hispanic (PCT12I..O)
iterations give, per sex x age x race cell, both ethnicity counts directly.
At block level only White has both iterations (P12A and P12I); other races
keep a symbolic ``undetermined`` ethnicity, constrained by the P9 race x
ethnicity marginals.
"""
from __future__ import annotations

import itertools
import random
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

from .datamodel import (
    AGE_P12_BUCKETS,
    AGE_PCT12_BUCKETS,
    BLOCK_RECON_ATTRS,
    FEMALE,
    HISPANIC,
    MALE,
    NOT_HISPANIC,
    RACE_GROUPS,
    TRACT_RECON_ATTRS,
    UNDETERMINED,
    Histogram,
    Prototype,
    bucket_value,
)
from .tabulate import NOT_HISPANIC_LETTERS, RACE_ITERATION_LETTERS, RACE_LABELS, UnitTables, sex_age_label

NOT_RECOVERABLE = ("hhgq", "block", "relationship")


class InconsistentTablesError(ValueError):
    pass


class MissingTableError(KeyError):
    pass


@dataclass
class PartialReconstruction:
    unit: str
    histogram: Histogram
    coverage: dict[str, str]
    exact: bool
    not_captured: tuple[str, ...] = NOT_RECOVERABLE
    # race group -> published Hispanic count, for races left undetermined
    hispanic_marginals: dict[int, int] = field(default_factory=dict)

    @property
    def attrs(self) -> tuple[str, ...]:
        return self.histogram.attrs

    def total(self) -> int:
        return self.histogram.total()

    def undetermined_cells(self) -> dict[int, list[tuple[Prototype, int]]]:
        """Undetermined prototypes grouped by race group, in stable order."""
        cells: dict[int, list[tuple[Prototype, int]]] = {}
        for p, n in self.histogram.sorted_items():
            if p.get("hispanic") is UNDETERMINED:
                cells.setdefault(p.get("race_group"), []).append((p, n))
        return cells


def _require(tables: UnitTables, names) -> None:
    missing = [n for n in names if n not in tables]
    if missing:
        raise MissingTableError(f"missing tables {missing}")


def reconstruct_tract(tables: UnitTables) -> PartialReconstruction:
    names = ["PCT12" + c for c in RACE_ITERATION_LETTERS + NOT_HISPANIC_LETTERS]
    _require(tables, names)
    unit = tables[names[0]].unit
    items = []
    for all_letter, nh_letter, g in zip(RACE_ITERATION_LETTERS, NOT_HISPANIC_LETTERS, RACE_GROUPS):
        t_all, t_nh = tables["PCT12" + all_letter].as_dict(), tables["PCT12" + nh_letter].as_dict()
        for sex in (MALE, FEMALE):
            for lo, hi in AGE_PCT12_BUCKETS:
                label = sex_age_label(sex, lo, hi)
                total, nh = t_all[label], t_nh[label]
                if nh > total:
                    raise InconsistentTablesError(
                        f"tract {unit}, {label}, {RACE_LABELS[g]}: not-Hispanic {nh} exceeds all {total}"
                    )
                age = bucket_value(lo, hi)
                items.append((Prototype(TRACT_RECON_ATTRS, (sex, age, g, HISPANIC)), total - nh))
                items.append((Prototype(TRACT_RECON_ATTRS, (sex, age, g, NOT_HISPANIC)), nh))
    coverage = {
        "sex": "point",
        "age_pct12": "point below 100, interval 100-104/105-109/110-115",
        "race_group": "point",
        "hispanic": "point",
    }
    return PartialReconstruction(unit, Histogram(TRACT_RECON_ATTRS, items), coverage, exact=True)


def reconstruct_block(tables: UnitTables) -> PartialReconstruction:
    names = ["P12" + c for c in RACE_ITERATION_LETTERS] + ["P12I", "P9"]
    _require(tables, names)
    unit = tables["P12A"].unit
    p9 = tables["P9"].as_dict()
    white_all, white_nh = tables["P12A"].as_dict(), tables["P12I"].as_dict()
    items = []
    marginals: dict[int, int] = {}
    exact = True
    for letter, g in zip(RACE_ITERATION_LETTERS, RACE_GROUPS):
        t = tables["P12" + letter].as_dict()
        race_total = sum(t[sex_age_label(s, lo, hi)] for s in (MALE, FEMALE) for lo, hi in AGE_P12_BUCKETS)
        n_hisp = p9[f"hispanic_{RACE_LABELS[g]}"]
        if g != 1:
            if not 0 <= n_hisp <= race_total:
                raise InconsistentTablesError(f"block {unit}: P9 Hispanic {RACE_LABELS[g]} = {n_hisp} but race total {race_total}")
            if n_hisp == 0:
                resolved = NOT_HISPANIC
            elif n_hisp == race_total:
                resolved = HISPANIC
            else:
                resolved = UNDETERMINED
                marginals[g] = n_hisp
                exact = False
        for sex in (MALE, FEMALE):
            for lo, hi in AGE_P12_BUCKETS:
                label = sex_age_label(sex, lo, hi)
                age = bucket_value(lo, hi)
                if g == 1:
                    total, nh = white_all[label], white_nh[label]
                    if nh > total:
                        raise InconsistentTablesError(f"block {unit}, {label}: P12I {nh} exceeds P12A {total}")
                    items.append((Prototype(BLOCK_RECON_ATTRS, (sex, age, g, HISPANIC)), total - nh))
                    items.append((Prototype(BLOCK_RECON_ATTRS, (sex, age, g, NOT_HISPANIC)), nh))
                else:
                    items.append((Prototype(BLOCK_RECON_ATTRS, (sex, age, g, resolved)), t[label]))
    coverage = {
        "sex": "point",
        "age_p12": "interval (23 age groups)",
        "race_group": "point",
        "hispanic": "point" if exact else "point for White, undetermined for other races",
    }
    return PartialReconstruction(unit, Histogram(BLOCK_RECON_ATTRS, items), coverage, exact=exact, hispanic_marginals=marginals)


# ---------------------------------------------------------------------------
# Ethnicity assignments for undetermined block prototypes
# ---------------------------------------------------------------------------


def count_bounded_compositions(total: int, caps: tuple[int, ...]) -> int:
    """Number of integer vectors x with 0 <= x_i <= caps[i] and sum x = total."""
    if total < 0 or total > sum(caps):
        return 0
    return _suffix_counts(total, tuple(caps))[0][total]


@lru_cache(maxsize=256)
def _suffix_counts(total: int, caps: tuple[int, ...]) -> list[list[int]]:
    """``out[i][t]`` = number of ways the cells ``i..`` can hold ``t`` people,
    for t <= total (exact big-integer arithmetic)."""
    out = [[0] * (total + 1) for _ in range(len(caps) + 1)]
    out[-1][0] = 1
    for i in range(len(caps) - 1, -1, -1):
        nxt, cap = out[i + 1], caps[i]
        prefix = [0]
        for v in nxt:
            prefix.append(prefix[-1] + v)
        # ways(t) = sum of nxt[t - x] for x in 0..cap
        out[i] = [prefix[t + 1] - prefix[max(0, t - cap)] for t in range(total + 1)]
    return out


def _sample_composition(total: int, caps: tuple[int, ...], rng: random.Random) -> list[int]:
    table = _suffix_counts(total, tuple(caps))
    out = []
    for i, cap in enumerate(caps):
        rest = table[i + 1]
        weights = [rest[total - x] for x in range(min(cap, total) + 1)]
        pick = rng.randrange(sum(weights))
        for x, w in enumerate(weights):
            if pick < w:
                break
            pick -= w
        out.append(x)
        total -= x
    return out


def _compositions(total: int, caps: tuple[int, ...]) -> Iterator[tuple[int, ...]]:
    if not caps:
        if total == 0:
            yield ()
        return
    rest_cap = sum(caps[1:])
    for x in range(max(0, total - rest_cap), min(caps[0], total) + 1):
        for tail in _compositions(total - x, caps[1:]):
            yield (x,) + tail


Assignment = dict[Prototype, int]  # undetermined prototype -> number of Hispanic people in it


def enumerate_ethnicity_assignments(
    partial: PartialReconstruction,
    mode: Literal["count", "sample", "enumerate"] = "count",
    seed: int = 0,
    limit: int = 1000,
) -> int | Assignment | list[Assignment]:
    """Ethnicity completions consistent with the Hispanic-by-race marginals.

    ``count`` returns the exact number of joint completions (a product over
    races of bounded compositions).  ``sample`` draws one completion, uniform
    within each race.  ``enumerate`` lists up to ``limit`` completions.
    """
    groups = partial.undetermined_cells()
    races = sorted(groups)
    caps = {}
    for g in races:
        if g not in partial.hispanic_marginals:
            raise InconsistentTablesError(f"no Hispanic marginal for race group {g}")
        caps[g] = tuple(n for _, n in groups[g])
        h = partial.hispanic_marginals[g]
        if not 0 <= h <= sum(caps[g]):
            raise InconsistentTablesError(f"race group {g}: {h} Hispanic cannot fit in {sum(caps[g])} people")
    if mode == "count":
        out = 1
        for g in races:
            out *= count_bounded_compositions(partial.hispanic_marginals[g], caps[g])
        return out
    if mode == "sample":
        rng = random.Random(seed)
        assignment: Assignment = {}
        for g in races:
            xs = _sample_composition(partial.hispanic_marginals[g], caps[g], rng)
            assignment.update({p: x for (p, _), x in zip(groups[g], xs)})
        return assignment
    if mode == "enumerate":
        per_race = [
            [dict(zip((p for p, _ in groups[g]), xs)) for xs in _compositions(partial.hispanic_marginals[g], caps[g])]
            for g in races
        ]
        out_list = []
        for combo in itertools.islice(itertools.product(*per_race), limit):
            merged: Assignment = {}
            for part in combo:
                merged.update(part)
            out_list.append(merged)
        return out_list
    raise ValueError(f"unknown mode {mode!r}")


def apply_assignment(partial: PartialReconstruction, assignment: Mapping[Prototype, int]) -> Histogram:
    """Resolve undetermined prototypes into Hispanic / not-Hispanic ones."""
    items = []
    for p, n in partial.histogram.items():
        if p.get("hispanic") is UNDETERMINED:
            h = assignment[p]
            items.append((p.replace(hispanic=HISPANIC), h))
            items.append((p.replace(hispanic=NOT_HISPANIC), n - h))
        else:
            items.append((p, n))
    return Histogram(partial.attrs, items)
