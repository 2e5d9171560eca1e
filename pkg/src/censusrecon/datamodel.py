"""Core domain types: attribute schema, person records, prototypes and histograms.

A :class:`Dataset` is stored column-wise as integer numpy arrays.  Prototype
histograms are computed with a vectorised group-by and cached per
``(attrs, geo_level, unit)``.

Value codes follow the census microdata conventions:

* ``sex``: 1 = male, 2 = female
* ``hispanic``: 1 = not Hispanic, 2 = Hispanic
* ``race``: 1..63, where 1..6 are the "alone" major groups and 7..63 are
  "two or more races"
* ``hhgq``: 0 = household, 1..7 = group-quarters types
* ``age``: 0..115

Besides the nine stored columns, a handful of derived attributes can be used
wherever an attribute name is accepted: ``race_group`` (1..7), ``age_p12``
(the 23 block-level age buckets), ``age_pct12`` (single years to 99, then
three top buckets) and the geography keys ``state_id``, ``county_id``,
``tract_id`` and ``block_id``.
"""
from __future__ import annotations

import enum
import threading
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Union

import numpy as np


class SchemaError(ValueError):
    """Unknown attribute or malformed schema reference."""


class DomainError(ValueError):
    """A value falls outside its attribute's domain."""

    def __init__(self, attr: str, value: Any, row: int | None = None):
        self.attr = attr
        self.value = value
        self.row = row
        where = f"row {row}: " if row is not None else ""
        super().__init__(f"{where}value {value!r} outside the domain of {attr!r}")


class IncomparableError(ValueError):
    """Two histograms cover different attribute subsets."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

CATEGORICAL = "categorical"
ORDINAL = "ordinal"


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str
    domain: range

    def __contains__(self, value: object) -> bool:
        return value in self.domain

    @property
    def low(self) -> int:
        return self.domain[0]

    @property
    def high(self) -> int:
        return self.domain[-1]


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[Attribute, ...]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def __getitem__(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaError(f"unknown attribute {name!r}")

    def __contains__(self, name: object) -> bool:
        return name in self.names


GEOGRAPHY = ("state", "county", "tract", "block")
DEMOGRAPHICS = ("hhgq", "sex", "age", "hispanic", "race")
COLUMNS = GEOGRAPHY + DEMOGRAPHICS

# zero-padded widths of the geography codes (census GEOID layout)
GEO_WIDTHS = {"state": 2, "county": 3, "tract": 6, "block": 4}

MALE, FEMALE = 1, 2
NOT_HISPANIC, HISPANIC = 1, 2
MAX_AGE = 115
N_RACE_CODES = 63
RACE_GROUPS = (1, 2, 3, 4, 5, 6, 7)
RACE_GROUP_NAMES = {
    1: "White",
    2: "Black",
    3: "AIAN",
    4: "Asian",
    5: "NHPI",
    6: "Other",
    7: "Two or more",
}

CENSUS_SCHEMA = AttributeSchema(
    (
        Attribute("state", CATEGORICAL, range(100)),
        Attribute("county", CATEGORICAL, range(1000)),
        Attribute("tract", CATEGORICAL, range(1_000_000)),
        Attribute("block", CATEGORICAL, range(10_000)),
        Attribute("hhgq", CATEGORICAL, range(8)),
        Attribute("sex", CATEGORICAL, range(MALE, FEMALE + 1)),
        Attribute("age", ORDINAL, range(MAX_AGE + 1)),
        Attribute("hispanic", CATEGORICAL, range(NOT_HISPANIC, HISPANIC + 1)),
        Attribute("race", CATEGORICAL, range(1, N_RACE_CODES + 1)),
    )
)

# Block-level (P12) sex-by-age buckets.
AGE_P12_BUCKETS: tuple[tuple[int, int], ...] = (
    (0, 4), (5, 9), (10, 14), (15, 17), (18, 19), (20, 20), (21, 21),
    (22, 24), (25, 29), (30, 34), (35, 39), (40, 44), (45, 49), (50, 54),
    (55, 59), (60, 61), (62, 64), (65, 66), (67, 69), (70, 74), (75, 79),
    (80, 84), (85, MAX_AGE),
)
# Tract-level (PCT12) single years of age with grouped top ages.
AGE_PCT12_BUCKETS: tuple[tuple[int, int], ...] = tuple((a, a) for a in range(100)) + (
    (100, 104), (105, 109), (110, MAX_AGE),
)


def race_group(race: np.ndarray | int) -> np.ndarray | int:
    """Collapse 63 race codes to the 7 major groups (7 = two or more races)."""
    if isinstance(race, (int, np.integer)):
        return int(min(race, 7))
    return np.minimum(race, 7)


# ---------------------------------------------------------------------------
# Prototype values
# ---------------------------------------------------------------------------


class Sentinel(enum.Enum):
    UNDETERMINED = "undetermined"
    NOT_CAPTURED = "not captured"

    def __repr__(self) -> str:
        return self.value


UNDETERMINED = Sentinel.UNDETERMINED
NOT_CAPTURED = Sentinel.NOT_CAPTURED


@dataclass(frozen=True, order=True)
class AgeRange:
    """Inclusive age interval. Never equal to a point age, even AgeRange(5, 5)."""

    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty age range {self.lo}-{self.hi}")

    def __str__(self) -> str:
        return f"{self.lo}-{self.hi}"


Value = Union[int, str, AgeRange, Sentinel]


def bucket_value(lo: int, hi: int) -> int | AgeRange:
    return lo if lo == hi else AgeRange(lo, hi)


def value_sort_key(v: Value) -> tuple:
    if isinstance(v, Sentinel):
        return (3, v.value)
    if isinstance(v, AgeRange):
        return (1, v.lo, v.hi)
    if isinstance(v, str):
        return (2, v)
    return (0, int(v), int(v))


def format_value(v: Value) -> str:
    if isinstance(v, Sentinel):
        return v.value
    return str(v)


def parse_value(text: str, attr: str | None = None) -> Value:
    """Inverse of :func:`format_value` for prototype exports."""
    if attr is not None and attr.endswith("_id"):
        return text
    if text == UNDETERMINED.value:
        return UNDETERMINED
    if text == NOT_CAPTURED.value:
        return NOT_CAPTURED
    if "-" in text and not text.startswith("-"):
        lo, hi = text.split("-")
        return AgeRange(int(lo), int(hi))
    if text.isdigit():
        return int(text)
    return text


@dataclass(frozen=True)
class Prototype:
    """An assignment of values to a declared subset of attributes."""

    attrs: tuple[str, ...]
    values: tuple[Value, ...]

    def __post_init__(self):
        if len(self.attrs) != len(self.values):
            raise ValueError("attrs and values differ in length")

    @classmethod
    def of(cls, **kv: Value) -> Prototype:
        return cls(tuple(kv), tuple(kv.values()))

    def get(self, attr: str) -> Value:
        try:
            return self.values[self.attrs.index(attr)]
        except ValueError:
            return NOT_CAPTURED

    def __getitem__(self, attr: str) -> Value:
        return self.get(attr)

    def as_dict(self) -> dict[str, Value]:
        return dict(zip(self.attrs, self.values))

    def project(self, attrs: Iterable[str]) -> Prototype:
        attrs = tuple(attrs)
        return Prototype(attrs, tuple(self.get(a) for a in attrs))

    def replace(self, **kv: Value) -> Prototype:
        d = self.as_dict()
        d.update(kv)
        return Prototype(self.attrs, tuple(d[a] for a in self.attrs))

    def sort_key(self) -> tuple:
        return tuple(value_sort_key(v) for v in self.values)

    def __str__(self) -> str:
        return "(" + ", ".join(f"{a}={format_value(v)}" for a, v in zip(self.attrs, self.values)) + ")"


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------


class Histogram(Mapping):
    """Multiset of prototypes over a fixed attribute subset.

    Zero multiplicities are never stored, so equality is multiset equality.
    """

    __slots__ = ("attrs", "_counts")

    def __init__(self, attrs: Iterable[str], counts: Mapping[Prototype, int] | Iterable[tuple[Prototype, int]] = ()):
        self.attrs = tuple(attrs)
        items = counts.items() if isinstance(counts, Mapping) else counts
        merged: dict[Prototype, int] = {}
        for proto, n in items:
            if proto.attrs != self.attrs:
                raise IncomparableError(f"prototype over {proto.attrs} in histogram over {self.attrs}")
            n = int(n)
            if n < 0:
                raise ValueError(f"negative multiplicity {n} for {proto}")
            if n:
                merged[proto] = merged.get(proto, 0) + n
        self._counts = merged

    @classmethod
    def from_prototypes(cls, attrs: Iterable[str], protos: Iterable[Prototype]) -> Histogram:
        return cls(attrs, ((p, 1) for p in protos))

    def __getitem__(self, proto: Prototype) -> int:
        return self._counts[proto]

    def get(self, proto, default=0):
        return self._counts.get(proto, default)

    def __iter__(self) -> Iterator[Prototype]:
        return iter(self._counts)

    def __len__(self) -> int:
        return len(self._counts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Histogram):
            return NotImplemented
        return self.attrs == other.attrs and self._counts == other._counts

    def __hash__(self):
        return hash((self.attrs, frozenset(self._counts.items())))

    def __repr__(self) -> str:
        body = ", ".join(f"{p}: {n}" for p, n in self.sorted_items()[:8])
        more = ", ..." if len(self) > 8 else ""
        return f"Histogram[{', '.join(self.attrs)}]({{{body}{more}}})"

    def total(self) -> int:
        return sum(self._counts.values())

    def sorted_items(self) -> list[tuple[Prototype, int]]:
        return sorted(self._counts.items(), key=lambda kv: kv[0].sort_key())

    def marginalize(self, attrs: Iterable[str]) -> Histogram:
        """Sum over dropped attributes; ``attrs`` must be a subset of ``self.attrs``."""
        attrs = tuple(attrs)
        missing = set(attrs) - set(self.attrs)
        if missing:
            raise SchemaError(f"cannot marginalize onto absent attributes {sorted(missing)}")
        return Histogram(attrs, ((p.project(attrs), n) for p, n in self._counts.items()))

    def __add__(self, other: Histogram) -> Histogram:
        if other.attrs != self.attrs:
            raise IncomparableError(f"{self.attrs} vs {other.attrs}")
        return Histogram(self.attrs, list(self._counts.items()) + list(other._counts.items()))


@dataclass(frozen=True)
class HistogramDiff:
    only_in_a: Histogram
    only_in_b: Histogram
    deltas: dict[Prototype, int]

    def is_empty(self) -> bool:
        return not self.only_in_a and not self.only_in_b and not self.deltas

    def __iter__(self):
        return iter((self.only_in_a, self.only_in_b, self.deltas))


def multiset_diff(a: Histogram, b: Histogram) -> HistogramDiff:
    """Symmetric difference of two histograms.

    ``deltas`` holds ``a[p] - b[p]`` for prototypes present on both sides with
    different multiplicities.
    """
    if a.attrs != b.attrs:
        raise IncomparableError(f"histograms over {a.attrs} and {b.attrs} are not comparable")
    only_a = Histogram(a.attrs, ((p, n) for p, n in a.items() if p not in b))
    only_b = Histogram(b.attrs, ((p, n) for p, n in b.items() if p not in a))
    deltas = {p: n - b[p] for p, n in a.items() if p in b and n != b[p]}
    return HistogramDiff(only_a, only_b, deltas)


# ---------------------------------------------------------------------------
# Records and datasets
# ---------------------------------------------------------------------------


class PersonRecord(NamedTuple):
    state: int
    county: int
    tract: int
    block: int
    hhgq: int
    sex: int
    age: int
    hispanic: int
    race: int


def tract_geoid(state: int, county: int, tract: int) -> str:
    return f"{state:02d}{county:03d}{tract:06d}"


def block_geoid(state: int, county: int, tract: int, block: int) -> str:
    return f"{state:02d}{county:03d}{tract:06d}{block:04d}"


GEO_LEVELS = ("state", "county", "tract", "block")
_GEO_KEY_ATTR = {"state": "state_id", "county": "county_id", "tract": "tract_id", "block": "block_id"}
_GEO_KEY_WIDTH = {"state_id": 2, "county_id": 5, "tract_id": 11, "block_id": 15}


def geo_key_attr(level: str) -> str:
    try:
        return _GEO_KEY_ATTR[level]
    except KeyError:
        raise SchemaError(f"unknown geography level {level!r}") from None


def _bucket_codes(age: np.ndarray, buckets: tuple[tuple[int, int], ...]) -> np.ndarray:
    upper = np.array([hi for _, hi in buckets])
    return np.searchsorted(upper, age, side="left")


def _bucket_decoder(buckets):
    values = [bucket_value(lo, hi) for lo, hi in buckets]
    return values.__getitem__


DERIVED_ATTRS = ("race_group", "age_p12", "age_pct12", "state_id", "county_id", "tract_id", "block_id")

# Attribute sets over which the two differencing reconstructions are expressed.
TRACT_RECON_ATTRS = ("sex", "age_pct12", "race_group", "hispanic")
BLOCK_RECON_ATTRS = ("sex", "age_p12", "race_group", "hispanic")


class Dataset:
    """Immutable column store of person records."""

    def __init__(self, columns: Mapping[str, Any], schema: AttributeSchema = CENSUS_SCHEMA, validate: bool = True):
        missing = [c for c in schema.names if c not in columns]
        if missing:
            raise SchemaError(f"missing columns {missing}")
        cols = {}
        n = None
        for name in schema.names:
            arr = np.asarray(columns[name], dtype=np.int64).reshape(-1)
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise SchemaError(f"column {name!r} has {len(arr)} rows, expected {n}")
            arr = arr.copy()
            arr.setflags(write=False)
            cols[name] = arr
        self.schema = schema
        self._cols = cols
        self._n = n or 0
        self._cache: dict[tuple, Histogram] = {}
        self._lock = threading.Lock()
        if validate:
            self._validate()

    def _validate(self) -> None:
        for attr in self.schema.attributes:
            col = self._cols[attr.name]
            if not len(col):
                continue
            bad = np.flatnonzero((col < attr.low) | (col > attr.high))
            if len(bad):
                row = int(bad[0])
                raise DomainError(attr.name, int(col[row]), row)

    # -- construction helpers ------------------------------------------------

    @classmethod
    def from_records(cls, records: Iterable[PersonRecord | tuple], schema: AttributeSchema = CENSUS_SCHEMA) -> Dataset:
        rows = [tuple(r) for r in records]
        if rows:
            arr = np.array(rows, dtype=np.int64)
        else:
            arr = np.zeros((0, len(schema.names)), dtype=np.int64)
        return cls({name: arr[:, i] for i, name in enumerate(schema.names)}, schema)

    @classmethod
    def empty(cls) -> Dataset:
        return cls.from_records([])

    @classmethod
    def concat(cls, parts: Iterable[Dataset]) -> Dataset:
        parts = list(parts)
        if not parts:
            return cls.empty()
        names = parts[0].schema.names
        return cls({n: np.concatenate([p._cols[n] for p in parts]) for n in names}, parts[0].schema, validate=False)

    def with_columns(self, **updates: np.ndarray) -> Dataset:
        cols = dict(self._cols)
        cols.update(updates)
        return Dataset(cols, self.schema)

    def take(self, index: np.ndarray) -> Dataset:
        index = np.asarray(index)
        return Dataset({n: c[index] for n, c in self._cols.items()}, self.schema, validate=False)

    # -- access ---------------------------------------------------------------

    def __len__(self) -> int:
        return self._n

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.schema == other.schema and all(
            np.array_equal(self._cols[n], other._cols[n]) for n in self.schema.names
        )

    def __hash__(self):
        return id(self)

    def __repr__(self) -> str:
        return f"Dataset({self._n} records)"

    @property
    def columns(self) -> dict[str, np.ndarray]:
        return dict(self._cols)

    def record(self, i: int) -> PersonRecord:
        return PersonRecord(*(int(self._cols[n][i]) for n in COLUMNS))

    def records(self) -> Iterator[PersonRecord]:
        arr = np.column_stack([self._cols[n] for n in COLUMNS]) if self._n else np.zeros((0, 9), dtype=np.int64)
        for row in arr.tolist():
            yield PersonRecord(*row)

    def column(self, attr: str) -> np.ndarray:
        """Integer codes for a stored or derived attribute."""
        return self._codes(attr)[0]

    def _codes(self, attr: str) -> tuple[np.ndarray, Callable[[int], Value]]:
        cols = self._cols
        if attr in cols:
            return cols[attr], int
        if attr == "race_group":
            return race_group(cols["race"]), int
        if attr == "age_p12":
            return _bucket_codes(cols["age"], AGE_P12_BUCKETS), _bucket_decoder(AGE_P12_BUCKETS)
        if attr == "age_pct12":
            return _bucket_codes(cols["age"], AGE_PCT12_BUCKETS), _bucket_decoder(AGE_PCT12_BUCKETS)
        if attr in _GEO_KEY_WIDTH:
            key = cols["state"]
            if attr != "state_id":
                key = key * 1000 + cols["county"]
            if attr in ("tract_id", "block_id"):
                key = key * 1_000_000 + cols["tract"]
            if attr == "block_id":
                key = key * 10_000 + cols["block"]
            width = _GEO_KEY_WIDTH[attr]
            return key, lambda code, w=width: f"{code:0{w}d}"
        raise SchemaError(f"unknown attribute {attr!r}")

    def unit_ids(self, level: str) -> list[str]:
        attr = geo_key_attr(level)
        codes, decode = self._codes(attr)
        return [decode(int(c)) for c in np.unique(codes)]

    def unit_mask(self, level: str, unit: str) -> np.ndarray:
        attr = geo_key_attr(level)
        codes, _ = self._codes(attr)
        return codes == int(unit)

    def restrict(self, level: str, unit: str) -> Dataset:
        return self.take(np.flatnonzero(self.unit_mask(level, unit)))

    def unit_sizes(self, level: str) -> dict[str, int]:
        codes, decode = self._codes(geo_key_attr(level))
        keys, counts = np.unique(codes, return_counts=True)
        return {decode(int(k)): int(c) for k, c in zip(keys, counts)}

    # -- histograms -----------------------------------------------------------

    def histogram(self, attrs: Iterable[str], geo_level: str | None = None, unit: str | None = None) -> Histogram:
        attrs = tuple(attrs)
        key = (attrs, geo_level, unit)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        hist = self._compute_histogram(attrs, geo_level, unit)
        with self._lock:
            self._cache.setdefault(key, hist)
        return hist

    def _compute_histogram(self, attrs, geo_level, unit) -> Histogram:
        if unit is not None and geo_level is None:
            raise SchemaError("a unit restriction needs a geography level")
        if len(set(attrs)) != len(attrs):
            raise SchemaError(f"duplicate attributes in {attrs}")
        out_attrs = attrs
        if geo_level is not None and unit is None:
            out_attrs = (geo_key_attr(geo_level),) + attrs
            if out_attrs[0] in attrs:
                out_attrs = attrs
        coded = [self._codes(a) for a in out_attrs]
        mask = self.unit_mask(geo_level, unit) if unit is not None else None
        if not out_attrs:
            n = int(mask.sum()) if mask is not None else self._n
            return Histogram((), {Prototype((), ()): n})
        mat = np.column_stack([c for c, _ in coded])
        if mask is not None:
            mat = mat[mask]
        if not len(mat):
            return Histogram(out_attrs)
        keys, counts = np.unique(mat, axis=0, return_counts=True)
        decoders = [d for _, d in coded]
        items = []
        for row, n in zip(keys.tolist(), counts.tolist()):
            items.append((Prototype(out_attrs, tuple(d(v) for d, v in zip(decoders, row))), n))
        return Histogram(out_attrs, items)


def project(dataset: Dataset, attrs: Iterable[str], geo_level: str | None = None, unit: str | None = None) -> Histogram:
    """Multiset projection of ``dataset`` onto ``attrs``.

    With ``geo_level`` and no ``unit`` the unit key (e.g. ``tract_id``) is
    prepended to the prototype so units stay separate.  With a ``unit`` the
    projection is restricted to that unit and the key is omitted.
    """
    return dataset.histogram(attrs, geo_level, unit)
