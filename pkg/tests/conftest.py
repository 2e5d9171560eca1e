from __future__ import annotations

import numpy as np
import pytest

from censusrecon.datamodel import COLUMNS, FEMALE, HISPANIC, MALE, NOT_HISPANIC, Dataset, PersonRecord
from censusrecon.recon_opt import QuerySet, RelaxedDataset, loss_and_gradient, space_for_level
from censusrecon.tabulate import Predicate

BLOCK = space_for_level("block")


def rec(state=1, county=1, tract=100, block=1001, hhgq=0, sex=MALE, age=30, hispanic=NOT_HISPANIC, race=1):
    return PersonRecord(state, county, tract, block, hhgq, sex, age, hispanic, race)


def random_dataset(rng: np.random.Generator, n: int, n_tracts: int = 2, n_blocks: int = 3, n_ages: int = 116) -> Dataset:
    """Uniform random records over a small geography; ``n_ages`` limits the age
    range so collisions (multiplicities > 1) are common."""
    cols = {
        "state": np.ones(n, dtype=np.int64),
        "county": np.ones(n, dtype=np.int64),
        "tract": 100 * rng.integers(1, n_tracts + 1, n),
        "block": 1000 + rng.integers(1, n_blocks + 1, n),
        "hhgq": rng.integers(0, 8, n),
        "sex": rng.integers(1, 3, n),
        "age": rng.integers(0, n_ages, n),
        "hispanic": rng.integers(1, 3, n),
        "race": rng.choice([1, 2, 3, 4, 5, 6, 7, 12, 40, 63], n),
    }
    return Dataset({c: cols[c] for c in COLUMNS})


def small_tract_dataset() -> Dataset:
    """One tract: 9 White-alone boys under one (7 of them not Hispanic), 21
    males of two or more races (14 not Hispanic) and 4 Black women."""
    rows = []
    rows += [rec(age=0, race=1, hispanic=NOT_HISPANIC)] * 7
    rows += [rec(age=0, race=1, hispanic=HISPANIC)] * 2
    for i in range(21):
        rows.append(rec(age=i % 60, race=7 + (i % 5), hispanic=NOT_HISPANIC if i < 14 else HISPANIC, block=1001 + i % 2))
    rows += [rec(sex=FEMALE, age=33, race=2)] * 4
    return Dataset.from_records(rows)


def random_relaxed(rng, n_rows, space=BLOCK, encoding="one_hot"):
    params = {a: rng.dirichlet(np.ones(k), size=n_rows) for a, k in zip(space.attrs, space.sizes)}
    if encoding == "scalar":
        params["race_group"] = rng.uniform(1.05, 6.95, n_rows)
    return RelaxedDataset(space, params, encoding)


def random_block_predicate(rng):
    buckets = [v for v in BLOCK.values[1]]
    lo = int(rng.integers(0, len(buckets)))
    hi = int(rng.integers(lo, len(buckets)))
    first, last = buckets[lo], buckets[hi]
    age = (getattr(first, "lo", first), getattr(last, "hi", last))
    return Predicate(
        sex=None if rng.random() < 0.3 else {int(rng.integers(1, 3))},
        age=None if rng.random() < 0.3 else age,
        race=None if rng.random() < 0.3 else set(rng.choice(np.arange(1, 8), size=int(rng.integers(1, 4)), replace=False).tolist()),
        hispanic=None if rng.random() < 0.3 else {int(rng.integers(1, 3))},
    )


def random_gradient_instance(rng, encoding="one_hot", n_queries=12):
    x = random_relaxed(rng, int(rng.integers(1, 6)), encoding=encoding)
    preds = tuple(random_block_predicate(rng) for _ in range(n_queries))
    qs = QuerySet(BLOCK, preds, tuple(str(i) for i in range(n_queries)))
    return x, qs, rng.integers(0, 5, n_queries).astype(float)


def gradient_pairs(x, qs, targets, h=1e-5):
    """(analytic, central difference) for every parameter, skipping scalar
    codes within ``2h`` of an integer where the interpolation has a kink."""
    _, grads = loss_and_gradient(x, qs, targets)
    out = []
    for attr, p in x.params.items():
        for idx in np.ndindex(p.shape):
            v = p[idx]
            if p.ndim == 1 and abs(v - round(v)) < 2 * h:
                continue
            y = x.copy()
            y.params[attr][idx] = v + h
            up = loss_and_gradient(y, qs, targets)[0]
            y.params[attr][idx] = v - h
            down = loss_and_gradient(y, qs, targets)[0]
            out.append((float(grads[attr][idx]), (up - down) / (2 * h)))
    return out


def corrupt(tables, rng, k):
    """Add a nonzero delta to k distinct cells drawn uniformly over all tables."""
    cells = [(name, i) for name, t in sorted(tables.items()) for i in range(len(t.counts))]
    picks = rng.choice(len(cells), size=k, replace=False)
    out = dict(tables)
    for p in picks:
        name, i = cells[p]
        counts = out[name].counts.copy()
        counts[i] += int(rng.choice([-3, -2, -1, 1, 2, 3]))
        out[name] = out[name].with_counts(counts)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
