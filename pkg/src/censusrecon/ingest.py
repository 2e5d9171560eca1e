"""Microdata loading/export, synthetic populations and experiment-unit selection."""
from __future__ import annotations

import csv
import logging
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .datamodel import (
    CENSUS_SCHEMA,
    COLUMNS,
    GEO_WIDTHS,
    MAX_AGE,
    N_RACE_CODES,
    Dataset,
    DomainError,
    SchemaError,
)

logger = logging.getLogger(__name__)


class MicrodataError(ValueError):
    pass


class MissingColumnError(MicrodataError, SchemaError):
    pass


class MalformedRowError(MicrodataError):
    def __init__(self, row: int, reason: str):
        self.row = row
        super().__init__(f"row {row}: {reason}")


class ConfigError(ValueError):
    pass


class SamplingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Delimited files
# ---------------------------------------------------------------------------


def load_microdata(path: str | Path, column_map: Mapping[str, str] | None = None, delimiter: str = ",") -> Dataset:
    """Read a headered delimited file with one person per row.

    ``column_map`` maps canonical column names (``state``, ``age``, ...) to the
    header names used in the file; unmapped columns are looked up by their
    canonical name.  Row numbers in errors count data rows from 0.
    """
    column_map = dict(column_map or {})
    unknown = set(column_map) - set(COLUMNS)
    if unknown:
        raise SchemaError(f"column_map refers to unknown attributes {sorted(unknown)}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MalformedRowError(0, "file is empty (no header)") from None
        positions = {}
        for name in COLUMNS:
            source = column_map.get(name, name)
            if source not in header:
                raise MissingColumnError(f"column {source!r} (for {name!r}) not found in header")
            positions[name] = header.index(source)
        width = len(header)
        rows: list[list[int]] = []
        order = [positions[n] for n in COLUMNS]
        for i, raw in enumerate(reader):
            if not raw or (len(raw) == 1 and not raw[0].strip()):
                continue
            if len(raw) != width:
                raise MalformedRowError(i, f"expected {width} fields, got {len(raw)}")
            try:
                rows.append([int(raw[p]) for p in order])
            except ValueError:
                bad = next(raw[p] for p in order if not raw[p].strip().lstrip("-").isdigit())
                raise MalformedRowError(i, f"non-integer value {bad!r}") from None
    arr = np.array(rows, dtype=np.int64).reshape(-1, len(COLUMNS))
    ds = Dataset({n: arr[:, j] for j, n in enumerate(COLUMNS)})
    logger.info("loaded %d records from %s", len(ds), path)
    return ds


def export_microdata(dataset: Dataset, path: str | Path, delimiter: str = ",") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(COLUMNS)
        fmt = [GEO_WIDTHS.get(n) for n in COLUMNS]
        for rec in dataset.records():
            w.writerow([f"{v:0{wd}d}" if wd else v for v, wd in zip(rec, fmt)])


# ---------------------------------------------------------------------------
# Synthetic populations
# ---------------------------------------------------------------------------


def _default_age_weights() -> list[float]:
    w = []
    for a in range(MAX_AGE + 1):
        if a < 65:
            w.append(1.0)
        elif a < 85:
            w.append(1.0 - 0.8 * (a - 65) / 20)
        else:
            w.append(0.2 * 0.85 ** (a - 85))
    return w


def _default_race_weights() -> dict[int, float]:
    w = {1: 0.72, 2: 0.12, 3: 0.01, 4: 0.05, 5: 0.002, 6: 0.05}
    rest = 1.0 - sum(w.values())
    for code in range(7, N_RACE_CODES + 1):
        w[code] = rest / (N_RACE_CODES - 6)
    return w


@dataclass
class SynthConfig:
    """Shape and distributions of a synthetic census-like population.

    ``skew`` is the power-law exponent applied to a sampled pool of
    demographic prototypes: prototype ``i`` of the pool gets weight
    ``(i + 1) ** -skew``.  ``skew=0`` draws uniformly from the pool, so
    records are close to independent draws from the attribute distributions.
    """

    n_states: int = 1
    n_counties: int = 1
    n_tracts: int = 2
    n_blocks: int = 10
    block_pop_min: int = 20
    block_pop_max: int = 120
    block_pop_samples: list[int] | None = None
    sex_weights: dict[int, float] = field(default_factory=lambda: {1: 0.49, 2: 0.51})
    hhgq_weights: dict[int, float] = field(default_factory=lambda: {0: 0.97, **{k: 0.03 / 7 for k in range(1, 8)}})
    hispanic_weights: dict[int, float] = field(default_factory=lambda: {1: 0.84, 2: 0.16})
    race_weights: dict[int, float] = field(default_factory=_default_race_weights)
    age_weights: list[float] = field(default_factory=_default_age_weights)
    skew: float = 1.0
    pool_size: int = 400
    pool_scope: str = "tract"
    seed: int = 0

    def validate(self) -> None:
        shape = (self.n_states, self.n_counties, self.n_tracts, self.n_blocks)
        if any(int(s) <= 0 for s in shape):
            raise ConfigError(f"empty geography {shape}")
        if self.n_states > 99 or self.n_counties > 999 or self.n_tracts > 9999 or self.n_blocks > 9999:
            raise ConfigError(f"geography {shape} exceeds the code widths")
        if self.block_pop_samples is not None:
            if not self.block_pop_samples or min(self.block_pop_samples) < 0:
                raise ConfigError("block_pop_samples must be a nonempty list of nonnegative sizes")
        elif not 0 <= self.block_pop_min <= self.block_pop_max:
            raise ConfigError("need 0 <= block_pop_min <= block_pop_max")
        if self.skew < 0:
            raise ConfigError("skew must be >= 0")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.pool_scope not in ("tract", "nation"):
            raise ConfigError("pool_scope must be 'tract' or 'nation'")
        for attr in ("sex", "hhgq", "hispanic", "race", "age"):
            self._weights(attr)

    def _weights(self, attr: str) -> tuple[np.ndarray, np.ndarray]:
        raw = getattr(self, f"{attr}_weights")
        if isinstance(raw, Mapping):
            values = np.array([int(k) for k in raw], dtype=np.int64)
            weights = np.array([float(v) for v in raw.values()])
        else:
            weights = np.asarray(raw, dtype=float)
            values = np.arange(len(weights), dtype=np.int64)
        domain = CENSUS_SCHEMA[attr]
        for v in values:
            if int(v) not in domain:
                raise ConfigError(f"{attr} weight given for out-of-domain value {int(v)}")
        if (weights < 0).any() or not weights.sum() > 0:
            raise ConfigError(f"{attr} weights must be nonnegative with a positive sum")
        return values, weights / weights.sum()

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SynthConfig:
        d = dict(d)
        kw: dict[str, Any] = {}
        geo = d.pop("geography", None)
        if geo is not None:
            for key in ("states", "counties", "tracts", "blocks"):
                if key in geo:
                    kw[f"n_{key}"] = int(geo[key])
        pop = d.pop("block_population", None)
        if pop is not None:
            if "samples" in pop:
                kw["block_pop_samples"] = [int(x) for x in pop["samples"]]
            if "min" in pop:
                kw["block_pop_min"] = int(pop["min"])
            if "max" in pop:
                kw["block_pop_max"] = int(pop["max"])
        attrs = d.pop("attributes", None) or {}
        for attr, weights in attrs.items():
            if attr not in ("sex", "hhgq", "hispanic", "race", "age"):
                raise ConfigError(f"unknown attribute distribution {attr!r}")
            if isinstance(weights, Mapping):
                weights = {int(k): float(v) for k, v in weights.items()}
            kw[f"{attr}_weights"] = weights
        names = {f.name for f in cls.__dataclass_fields__.values()}
        for key, value in d.items():
            if key not in names:
                raise ConfigError(f"unknown synth config key {key!r}")
            kw[key] = value
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _draw(rng: np.random.Generator, values: np.ndarray, probs: np.ndarray, size: int) -> np.ndarray:
    return values[rng.choice(len(values), size=size, p=probs)]


def generate_synthetic(config: SynthConfig) -> Dataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    dists = {a: config._weights(a) for a in ("hhgq", "sex", "age", "hispanic", "race")}
    ranks = np.arange(1, config.pool_size + 1, dtype=float)
    pool_probs = ranks ** -float(config.skew)
    pool_probs /= pool_probs.sum()

    def new_pool() -> dict[str, np.ndarray]:
        return {a: _draw(rng, *dists[a], config.pool_size) for a in dists}

    pool = new_pool() if config.pool_scope == "nation" else None
    parts: dict[str, list[np.ndarray]] = {c: [] for c in COLUMNS}
    for s in range(1, config.n_states + 1):
        for c in range(1, config.n_counties + 1):
            for t in range(1, config.n_tracts + 1):
                tract_code = 100 * t
                if config.pool_scope == "tract":
                    pool = new_pool()
                for b in range(1, config.n_blocks + 1):
                    if config.block_pop_samples is not None:
                        n = int(rng.choice(config.block_pop_samples))
                    else:
                        n = int(rng.integers(config.block_pop_min, config.block_pop_max + 1))
                    idx = rng.choice(config.pool_size, size=n, p=pool_probs)
                    parts["state"].append(np.full(n, s))
                    parts["county"].append(np.full(n, c))
                    parts["tract"].append(np.full(n, tract_code))
                    parts["block"].append(np.full(n, 1000 + b))
                    for a in dists:
                        parts[a].append(pool[a][idx])
    return Dataset({k: np.concatenate(v) if v else np.zeros(0, np.int64) for k, v in parts.items()})


# ---------------------------------------------------------------------------
# Experiment units
# ---------------------------------------------------------------------------

BLOCK_SIZE_DIVISORS = (2, 4, 8, 16)


def _closest(sizes: dict[str, int], target: float) -> str:
    # lowest block ID wins ties
    return min(sizes, key=lambda b: (abs(sizes[b] - target), b))


def select_experiment_blocks(dataset: Dataset) -> list[str]:
    """Per state: the block closest to the mean block size, the largest block,
    and the blocks closest to M/C for C in 2, 4, 8, 16 (M = largest size)."""
    sizes = dataset.unit_sizes("block")
    by_state: dict[str, dict[str, int]] = {}
    for block, n in sizes.items():
        by_state.setdefault(block[:2], {})[block] = n
    selected: list[str] = []
    for state in sorted(by_state):
        blocks = by_state[state]
        m = max(blocks.values())
        mean = sum(blocks.values()) / len(blocks)
        picks = [_closest(blocks, mean), _closest(blocks, m)]
        picks += [_closest(blocks, m / c) for c in BLOCK_SIZE_DIVISORS]
        for b in picks:
            if b not in selected:
                selected.append(b)
    return selected


def sample_tracts(dataset: Dataset, n: int, seed: int) -> list[str]:
    tracts = dataset.unit_ids("tract")
    if n < 0 or n > len(tracts):
        raise SamplingError(f"cannot sample {n} of {len(tracts)} tracts")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(tracts), size=n, replace=False)
    return [tracts[i] for i in idx]
