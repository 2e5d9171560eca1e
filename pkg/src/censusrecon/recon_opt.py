"""Confidence-ranked reconstruction: relaxed query matching, discretization, ranking.

A candidate dataset of ``n_rows`` people is relaxed so that every row holds
a probability vector per attribute.  The relaxed answer to a product
predicate is ``sum_rows prod_attrs <w_row,attr, accepted_attr>``.  Rows are
fitted to the published counts by projected gradient descent on the squared
error, then discretized; repeating this ``R`` times and counting how many
runs produce each prototype gives the ranking.

The reconstruction space is fixed per geography level: at block level ages
are the 23 P12 buckets, at tract level the PCT12 single years (grouped above
99).  Race is the 7 major groups.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Any, Literal

import numpy as np
from threadpoolctl import threadpool_limits

from .datamodel import (
    AGE_P12_BUCKETS,
    AGE_PCT12_BUCKETS,
    BLOCK_RECON_ATTRS,
    FEMALE,
    HISPANIC,
    MALE,
    MAX_AGE,
    NOT_HISPANIC,
    RACE_GROUPS,
    TRACT_RECON_ATTRS,
    Dataset,
    Histogram,
    Prototype,
    Value,
    bucket_value,
)
from .tabulate import CUBE_SHAPE, RACE_ITERATION_LETTERS, Predicate, UnitTables, Workload, sex_age_label

logger = logging.getLogger(__name__)


class NotExpressibleError(ValueError):
    """A predicate splits a category of the reconstruction space."""


class OptConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Reconstruction space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReconSpace:
    """Categorical domains the optimizer works over.

    ``members[i]`` is a (n_categories, cube_axis_size) 0/1 matrix telling
    which raw cube-axis values (see :data:`tabulate.CUBE_SHAPE`) each
    category covers.
    """

    attrs: tuple[str, ...]
    values: tuple[tuple[Value, ...], ...]
    members: tuple[np.ndarray, ...] = field(compare=False, repr=False)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.values)

    @property
    def size(self) -> int:
        return int(np.prod(self.sizes))

    def accepted(self, pred: Predicate) -> tuple[np.ndarray, ...]:
        """Per attribute, 0/1 vector of categories accepted by ``pred``."""
        out = []
        for attr, mem, axis_mask in zip(self.attrs, self.members, pred.axis_masks()):
            hits = mem @ axis_mask.astype(float)
            sizes = mem.sum(axis=1)
            if np.any((hits > 0) & (hits < sizes)):
                raise NotExpressibleError(f"predicate {pred} splits a category of {attr!r}")
            out.append((hits == sizes).astype(float))
        return tuple(out)

    def query_matrix(self, preds: Sequence[Predicate]) -> np.ndarray:
        """(n_queries, space.size) 0/1 matrix over the flattened space cube."""
        q = np.zeros((len(preds), self.size))
        for i, p in enumerate(preds):
            acc = self.accepted(p)
            outer = acc[0]
            for a in acc[1:]:
                outer = np.multiply.outer(outer, a)
            q[i] = outer.reshape(-1)
        return q

    def prototype(self, index: Sequence[int]) -> Prototype:
        return Prototype(self.attrs, tuple(v[i] for v, i in zip(self.values, index)))

    def encode_dataset(self, dataset: Dataset) -> np.ndarray:
        """Category index per record and attribute, shape (n, n_attrs)."""
        axes = {
            "sex": dataset.column("sex") - MALE,
            "age": dataset.column("age"),
            "race_group": dataset.column("race_group") - 1,
            "hispanic": dataset.column("hispanic") - NOT_HISPANIC,
        }
        cols = []
        for mem, axis in zip(self.members, ("sex", "age", "race_group", "hispanic")):
            lookup = np.argmax(mem, axis=0)
            cols.append(lookup[axes[axis]])
        return np.column_stack(cols) if cols else np.zeros((len(dataset), 0), dtype=int)

    def marginals(self, dataset: Dataset) -> dict[str, np.ndarray]:
        """Per-attribute category distribution of ``dataset`` (baseline init)."""
        idx = self.encode_dataset(dataset)
        out = {}
        for j, (attr, k) in enumerate(zip(self.attrs, self.sizes)):
            counts = np.bincount(idx[:, j], minlength=k).astype(float)
            out[attr] = counts / counts.sum() if counts.sum() else np.full(k, 1.0 / k)
        return out


def _bucket_members(buckets) -> np.ndarray:
    m = np.zeros((len(buckets), MAX_AGE + 1))
    for i, (lo, hi) in enumerate(buckets):
        m[i, lo : hi + 1] = 1
    return m


def space_for_level(geo_level: str) -> ReconSpace:
    buckets = AGE_P12_BUCKETS if geo_level == "block" else AGE_PCT12_BUCKETS
    attrs = BLOCK_RECON_ATTRS if geo_level == "block" else TRACT_RECON_ATTRS
    values = (
        (MALE, FEMALE),
        tuple(bucket_value(lo, hi) for lo, hi in buckets),
        RACE_GROUPS,
        (NOT_HISPANIC, HISPANIC),
    )
    members = (np.eye(CUBE_SHAPE[0]), _bucket_members(buckets), np.eye(CUBE_SHAPE[2]), np.eye(CUBE_SHAPE[3]))
    return ReconSpace(attrs, values, members)


# ---------------------------------------------------------------------------
# Query sets and relaxed datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuerySet:
    """Workload cells flattened into one list, with their space matrix."""

    space: ReconSpace
    predicates: tuple[Predicate, ...]
    labels: tuple[str, ...]

    @classmethod
    def from_workloads(cls, workloads: Sequence[Workload], space: ReconSpace | None = None) -> QuerySet:
        if space is None:
            space = space_for_level(workloads[0].geo_level)
        preds, labels = [], []
        for w in workloads:
            for c in w.cells:
                preds.append(c.predicate)
                labels.append(f"{w.name}:{c.label}")
        return cls(space, tuple(preds), tuple(labels))

    @cached_property
    def matrix(self) -> np.ndarray:
        return self.space.query_matrix(self.predicates)

    def targets(self, tables: UnitTables) -> np.ndarray:
        out = np.zeros(len(self.labels))
        for i, label in enumerate(self.labels):
            name, cell = label.split(":", 1)
            out[i] = tables[name][cell]
        return out


def published_total(tables: UnitTables) -> int:
    for name in ("P1", "PCT12", "P12"):
        if name in tables:
            return tables[name]["total"]
    raise KeyError("no P1 or PCT12 total among the tables")


def _tri_weights(v: np.ndarray, k: int) -> np.ndarray:
    """Weights on categories 1..k implied by a scalar code (linear interpolation)."""
    centers = np.arange(1, k + 1, dtype=float)
    return np.maximum(0.0, 1.0 - np.abs(v[:, None] - centers[None, :]))


def _tri_weights_grad(v: np.ndarray, k: int) -> np.ndarray:
    centers = np.arange(1, k + 1, dtype=float)
    d = v[:, None] - centers[None, :]
    return np.where(np.abs(d) < 1.0, -np.sign(d), 0.0)


@dataclass
class RelaxedDataset:
    """Continuous relaxation of a candidate dataset.

    With ``encoding="one_hot"`` every attribute is a row-stochastic weight
    matrix.  With ``encoding="scalar"`` race is a single number in [1, 7] per
    row, read as weights by linear interpolation between neighbouring codes.
    """

    space: ReconSpace
    params: dict[str, np.ndarray]
    encoding: str = "one_hot"
    loss_history: list[float] = field(default_factory=list)

    SCALAR_ATTR = "race_group"

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.params.values())))

    def weights(self, attr: str) -> np.ndarray:
        p = self.params[attr]
        if p.ndim == 1:
            return _tri_weights(p, self.space.sizes[self.space.attrs.index(attr)])
        return p

    def all_weights(self) -> list[np.ndarray]:
        return [self.weights(a) for a in self.space.attrs]

    def copy(self) -> RelaxedDataset:
        return RelaxedDataset(self.space, {k: v.copy() for k, v in self.params.items()}, self.encoding, list(self.loss_history))

    @classmethod
    def from_indices(cls, space: ReconSpace, idx: np.ndarray) -> RelaxedDataset:
        """Integral one-hot relaxation of a discrete dataset."""
        params = {}
        for j, (attr, k) in enumerate(zip(space.attrs, space.sizes)):
            w = np.zeros((len(idx), k))
            w[np.arange(len(idx)), idx[:, j]] = 1.0
            params[attr] = w
        return cls(space, params)


def relaxed_answer(x: RelaxedDataset, q: Predicate) -> float:
    """Relaxed count of rows satisfying ``q``; exact on integral one-hot rows."""
    acc = x.space.accepted(q)
    prod = np.ones(x.n_rows)
    for attr, a in zip(x.space.attrs, acc):
        prod = prod * (x.weights(attr) @ a)
    return float(prod.sum())


def _pair_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, :, None] * b[:, None, :]).reshape(len(a), -1)


def loss_and_gradient(x: RelaxedDataset, queries: QuerySet, targets: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Squared error over all cells and its exact gradient w.r.t. ``x.params``.

    The space has four attributes; rows are contracted through the pair
    outer products (sex x age) and (race x hispanic), so the expected count
    cube is a single (n_rows x 2A)^T (n_rows x 14) product.
    """
    w0, w1, w2, w3 = x.all_weights()
    n0, n1, n2, n3 = x.space.sizes
    left = _pair_outer(w0, w1)
    right = _pair_outer(w2, w3)
    cube = left.T @ right
    resid = queries.matrix @ cube.reshape(-1) - targets
    loss = float(resid @ resid)
    g_cube = (2.0 * (queries.matrix.T @ resid)).reshape(n0 * n1, n2 * n3)
    g_left = (right @ g_cube.T).reshape(-1, n0, n1)
    g_right = (left @ g_cube).reshape(-1, n2, n3)
    grads = {
        x.space.attrs[0]: np.einsum("rij,rj->ri", g_left, w1),
        x.space.attrs[1]: np.einsum("rij,ri->rj", g_left, w0),
        x.space.attrs[2]: np.einsum("rij,rj->ri", g_right, w3),
        x.space.attrs[3]: np.einsum("rij,ri->rj", g_right, w2),
    }
    for attr, p in x.params.items():
        if p.ndim == 1:
            k = x.space.sizes[x.space.attrs.index(attr)]
            grads[attr] = np.sum(grads[attr] * _tri_weights_grad(p, k), axis=1)
    return loss, grads


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptConfig:
    learning_rate: float = 0.08
    n_iterations: int = 1500
    init_mode: Literal["random", "baseline"] = "random"
    encoding: Literal["one_hot", "scalar"] = "one_hot"
    seed: int = 0
    tolerance: float = 1e-6
    projection: Literal["simplex", "clip_normalize"] = "simplex"
    # mixing weight of a random simplex row added to baseline rows; 0 keeps rows identical
    baseline_jitter: float = 0.1
    # "per_row" divides the step by n_rows: every row pushes the same query
    # answers, so the stable absolute step shrinks like 1 / n_rows
    step_scale: Literal["per_row", "absolute"] = "per_row"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise OptConfigError("learning_rate must be > 0")
        if self.n_iterations < 0:
            raise OptConfigError("n_iterations must be >= 0")
        if self.init_mode not in ("random", "baseline"):
            raise OptConfigError(f"unknown init_mode {self.init_mode!r}")
        if self.encoding not in ("one_hot", "scalar"):
            raise OptConfigError(f"unknown encoding {self.encoding!r}")
        if self.projection not in ("simplex", "clip_normalize"):
            raise OptConfigError(f"unknown projection {self.projection!r}")
        if not 0 <= self.baseline_jitter <= 1:
            raise OptConfigError("baseline_jitter must lie in [0, 1]")
        if self.step_scale not in ("per_row", "absolute"):
            raise OptConfigError(f"unknown step_scale {self.step_scale!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> OptConfig:
        return cls(**dict(d))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def project_simplex_rows(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row onto the probability simplex."""
    n, k = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, k + 1)
    cond = u - css / ind > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def clip_normalize_rows(v: np.ndarray) -> np.ndarray:
    w = np.clip(v, 0.0, 1.0)
    s = w.sum(axis=1, keepdims=True)
    k = v.shape[1]
    return np.where(s > 0, w / np.where(s > 0, s, 1.0), 1.0 / k)


def initialize(
    space: ReconSpace,
    n_rows: int,
    config: OptConfig,
    baseline: Mapping[str, np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
) -> RelaxedDataset:
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if config.init_mode == "baseline" and baseline is None:
        raise OptConfigError("baseline initialization needs a baseline distribution")
    params = {}
    for attr, k in zip(space.attrs, space.sizes):
        if config.init_mode == "random":
            w = rng.dirichlet(np.ones(k), size=n_rows)
        else:
            base = np.asarray(baseline[attr], dtype=float)
            if base.shape != (k,) or (base < 0).any() or not np.isclose(base.sum(), 1.0):
                raise OptConfigError(f"baseline for {attr!r} must be a distribution over {k} categories")
            w = np.tile(base, (n_rows, 1))
            if config.baseline_jitter > 0:
                w = (1 - config.baseline_jitter) * w + config.baseline_jitter * rng.dirichlet(np.ones(k), size=n_rows)
        if config.encoding == "scalar" and attr == RelaxedDataset.SCALAR_ATTR:
            w = w @ np.arange(1, k + 1, dtype=float)  # expected code
        params[attr] = w
    return RelaxedDataset(space, params, config.encoding)


def _project(x: RelaxedDataset, config: OptConfig) -> None:
    for attr, p in x.params.items():
        if p.ndim == 1:
            k = x.space.sizes[x.space.attrs.index(attr)]
            x.params[attr] = np.clip(p, 1.0, float(k))
        elif config.projection == "simplex":
            x.params[attr] = project_simplex_rows(p)
        else:
            x.params[attr] = clip_normalize_rows(p)


def optimize(
    targets: np.ndarray,
    queries: QuerySet,
    n_rows: int,
    config: OptConfig,
    baseline: Mapping[str, np.ndarray] | None = None,
) -> RelaxedDataset:
    """Projected gradient descent from a random or baseline start.

    Stops after ``n_iterations`` steps or once the loss is at most
    ``tolerance``.  ``loss_history`` holds the loss before every step and
    after the last one.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (len(queries.labels),):
        raise ValueError("targets are not aligned with the query set")
    rng = np.random.default_rng(config.seed)
    x = initialize(queries.space, n_rows, config, baseline, rng)
    lr = config.learning_rate
    if config.step_scale == "per_row":
        lr /= max(n_rows, 1)
    for _ in range(config.n_iterations):
        loss, grads = loss_and_gradient(x, queries, targets)
        x.loss_history.append(loss)
        if loss <= config.tolerance:
            return x
        for attr in x.params:
            x.params[attr] = x.params[attr] - lr * grads[attr]
        _project(x, config)
    x.loss_history.append(loss_and_gradient(x, queries, targets)[0])
    return x


def discretize(x: RelaxedDataset, rule: Literal["argmax", "sample"] = "argmax", seed: int = 0) -> Histogram:
    """Turn every relaxed row into one prototype and count them.

    ``argmax`` breaks ties toward the lowest category index.
    """
    rng = np.random.default_rng(seed)
    cols = []
    for attr, k in zip(x.space.attrs, x.space.sizes):
        w = x.weights(attr)
        if rule == "argmax":
            cols.append(np.argmax(w, axis=1))
        elif rule == "sample":
            cum = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
            u = rng.random(len(w))[:, None]
            cols.append(np.minimum((u > cum).sum(axis=1), k - 1))
        else:
            raise ValueError(f"unknown discretization rule {rule!r}")
    idx = np.column_stack(cols) if cols else np.zeros((0, 0), dtype=int)
    return histogram_from_indices(x.space, idx)


def histogram_from_indices(space: ReconSpace, idx: np.ndarray) -> Histogram:
    if not len(idx):
        return Histogram(space.attrs)
    keys, counts = np.unique(idx, axis=0, return_counts=True)
    return Histogram(space.attrs, ((space.prototype(k), n) for k, n in zip(keys.tolist(), counts.tolist())))


# ---------------------------------------------------------------------------
# Confidence ranking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankedPrototype:
    rank: int
    prototype: Prototype
    frequency: int  # runs whose output contains the prototype
    occurrences: int  # total multiplicity over all runs
    mean_multiplicity: float  # occurrences / frequency


@dataclass
class RankedReconstruction:
    attrs: tuple[str, ...]
    n_runs: int
    entries: list[RankedPrototype]
    runs: list[Histogram] = field(default_factory=list)
    losses: list[list[float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def prototypes(self) -> list[Prototype]:
        return [e.prototype for e in self.entries]

    def top(self, k: int) -> list[Prototype]:
        return [e.prototype for e in self.entries[:k]]

    def frequencies(self, mode: Literal["runs", "occurrences"] = "runs") -> dict[Prototype, int]:
        if mode == "runs":
            return {e.prototype: e.frequency for e in self.entries}
        if mode == "occurrences":
            return {e.prototype: e.occurrences for e in self.entries}
        raise ValueError(f"unknown frequency mode {mode!r}")


def rank_runs(runs: Sequence[Histogram], losses: Sequence[Sequence[float]] = ()) -> RankedReconstruction:
    if not runs:
        raise ValueError("need at least one run")
    attrs = runs[0].attrs
    freq: dict[Prototype, int] = {}
    occ: dict[Prototype, int] = {}
    for h in runs:
        for p, n in h.items():
            freq[p] = freq.get(p, 0) + 1
            occ[p] = occ.get(p, 0) + n
    order = sorted(freq, key=lambda p: (-freq[p], -occ[p] / freq[p], p.sort_key()))
    entries = [RankedPrototype(i + 1, p, freq[p], occ[p], occ[p] / freq[p]) for i, p in enumerate(order)]
    return RankedReconstruction(attrs, len(runs), entries, list(runs), [list(l) for l in losses])


def _single_run(args) -> tuple[Histogram, list[float]]:
    targets, queries, n_rows, config, baseline, run_index, rule = args
    cfg = OptConfig(**{**config.to_dict(), "seed": config.seed + run_index})
    # one BLAS thread keeps floating-point reductions identical for any worker count
    with threadpool_limits(limits=1):
        x = optimize(targets, queries, n_rows, cfg, baseline)
    return discretize(x, rule, seed=cfg.seed), x.loss_history


def run_crr(
    targets: np.ndarray,
    queries: QuerySet,
    n_rows: int,
    n_runs: int,
    config: OptConfig,
    baseline: Mapping[str, np.ndarray] | None = None,
    rule: Literal["argmax", "sample"] = "argmax",
    workers: int = 1,
) -> RankedReconstruction:
    """Repeat optimize + discretize ``n_runs`` times (run i uses seed + i) and rank."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if config.init_mode == "baseline" and baseline is None:
        raise OptConfigError("baseline initialization needs a baseline distribution")
    queries.matrix  # noqa: B018 - build once before pickling to workers
    jobs = [(targets, queries, n_rows, config, baseline, i, rule) for i in range(n_runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_single_run, jobs))
    else:
        results = [_single_run(j) for j in jobs]
    return rank_runs([h for h, _ in results], [l for _, l in results])


def reconstruct_unit(
    tables: UnitTables,
    workloads: Sequence[Workload],
    n_runs: int,
    config: OptConfig,
    baseline: Mapping[str, np.ndarray] | None = None,
    workers: int = 1,
) -> RankedReconstruction:
    queries = QuerySet.from_workloads(workloads)
    return run_crr(queries.targets(tables), queries, published_total(tables), n_runs, config, baseline, workers=workers)


def public_baseline(tabulation: Mapping[str, UnitTables], geo_level: str) -> dict[str, np.ndarray]:
    """Per-attribute distributions pooled over every published unit.

    Uses only released tables: the sex by age table for sex and age, the race
    iteration totals for race, and the Hispanic iteration total for ethnicity.
    """
    space = space_for_level(geo_level)
    prefix = "P12" if geo_level == "block" else "PCT12"
    buckets = AGE_P12_BUCKETS if geo_level == "block" else AGE_PCT12_BUCKETS
    sex_age = np.zeros((2, len(buckets)))
    race = np.zeros(len(RACE_GROUPS))
    hisp = np.zeros(2)
    for tables in tabulation.values():
        needed = [prefix, prefix + "H"] + [prefix + c for c in RACE_ITERATION_LETTERS]
        if any(n not in tables for n in needed):
            continue
        t = tables[prefix].as_dict()
        for i, sex in enumerate((MALE, FEMALE)):
            for j, (lo, hi) in enumerate(buckets):
                sex_age[i, j] += t[sex_age_label(sex, lo, hi)]
        for i, letter in enumerate(RACE_ITERATION_LETTERS):
            race[i] += tables[prefix + letter]["total"]
        h = tables[prefix + "H"]["total"]
        hisp += (t["total"] - h, h)
    if not sex_age.sum():
        raise OptConfigError(f"no {geo_level} tables with {prefix}, {prefix}A-H to build a baseline from")
    out = {
        space.attrs[0]: sex_age.sum(axis=1),
        space.attrs[1]: sex_age.sum(axis=0),
        space.attrs[2]: race,
        space.attrs[3]: hisp,
    }
    return {a: v / v.sum() if v.sum() else np.full(len(v), 1.0 / len(v)) for a, v in out.items()}
