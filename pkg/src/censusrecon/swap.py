"""Targeted record swapping: the protection step applied before any tabulation.

Records that are unique in their block on ``key_attrs`` are at risk.  Each at
risk record is picked with probability ``min(1, base_rate * size**-size_exponent)``
and exchanges its geography with a record from another block that agrees on
``match_attrs``.  Demographics never move, so block populations and every
nation-level demographic tabulation are unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .datamodel import DEMOGRAPHICS, GEOGRAPHY, Dataset, SchemaError

SWAPPABLE_ATTRS = DEMOGRAPHICS + ("race_group", "age_p12", "age_pct12")
DEFAULT_KEY_ATTRS = ("sex", "age", "race", "hispanic")


@dataclass(frozen=True)
class SwapConfig:
    key_attrs: tuple[str, ...] = DEFAULT_KEY_ATTRS
    match_attrs: tuple[str, ...] = ("sex", "age_p12")
    base_rate: float = 0.5
    size_exponent: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "key_attrs", tuple(self.key_attrs))
        object.__setattr__(self, "match_attrs", tuple(self.match_attrs))
        if not 0.0 <= self.base_rate <= 1.0:
            raise ValueError(f"base_rate must lie in [0, 1], got {self.base_rate}")
        for a in self.key_attrs + self.match_attrs:
            if a not in SWAPPABLE_ATTRS:
                raise SchemaError(f"{a!r} is not a demographic attribute")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SwapConfig:
        return cls(**dict(d))


@dataclass
class SwapReport:
    n_swapped_pairs: int = 0
    n_selected: int = 0
    n_unpartnered: int = 0
    per_block: dict[str, int] = field(default_factory=dict)
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self, include_pairs: bool = False) -> dict[str, Any]:
        d = {
            "n_swapped_pairs": self.n_swapped_pairs,
            "n_selected": self.n_selected,
            "n_unpartnered": self.n_unpartnered,
            "per_block": dict(sorted(self.per_block.items())),
        }
        if include_pairs:
            d["pairs"] = [list(p) for p in self.pairs]
        return d


def _group_ids(dataset: Dataset, attrs: tuple[str, ...], with_block: bool) -> np.ndarray:
    cols = [dataset.column(a) for a in attrs]
    if with_block:
        cols.insert(0, dataset.column("block_id"))
    if not cols:
        return np.zeros(len(dataset), dtype=np.int64)
    _, inv = np.unique(np.column_stack(cols), axis=0, return_inverse=True)
    return inv.reshape(-1)


def identify_at_risk(dataset: Dataset, key_attrs=DEFAULT_KEY_ATTRS) -> np.ndarray:
    """Indices of records whose ``key_attrs`` combination is unique in their block."""
    if not len(dataset):
        return np.zeros(0, dtype=np.int64)
    gid = _group_ids(dataset, tuple(key_attrs), with_block=True)
    counts = np.bincount(gid)
    return np.flatnonzero(counts[gid] == 1)


def apply_swap(dataset: Dataset, config: SwapConfig) -> tuple[Dataset, SwapReport]:
    report = SwapReport()
    n = len(dataset)
    if n == 0 or config.base_rate == 0:
        return dataset, report
    rng = np.random.default_rng(config.seed)
    at_risk = identify_at_risk(dataset, config.key_attrs)
    block = dataset.column("block_id")
    _, block_inv, block_sizes = np.unique(block, return_inverse=True, return_counts=True)
    sizes = block_sizes[block_inv.reshape(-1)][at_risk].astype(float)
    prob = np.minimum(1.0, config.base_rate * sizes ** -float(config.size_exponent))
    coins = rng.random(len(at_risk)) < prob
    selected = at_risk[coins]
    report.n_selected = int(len(selected))

    match = _group_ids(dataset, config.match_attrs, with_block=False)
    members: dict[int, np.ndarray] = {}
    order = np.argsort(match, kind="stable")
    bounds = np.flatnonzero(np.diff(match[order])) + 1
    for grp in np.split(order, bounds):
        if len(grp):
            members[int(match[grp[0]])] = grp
    used = np.zeros(n, dtype=bool)
    partner = np.arange(n)
    for i in selected.tolist():
        if used[i]:
            continue  # already moved as someone's partner
        cand = members[int(match[i])]
        cand = cand[(block[cand] != block[i]) & ~used[cand]]
        if not len(cand):
            report.n_unpartnered += 1
            continue
        j = int(cand[rng.integers(len(cand))])
        used[i] = used[j] = True
        partner[i], partner[j] = j, i
        report.pairs.append((i, j))

    report.n_swapped_pairs = len(report.pairs)
    if not report.pairs:
        return dataset, report
    cols = dataset.columns
    geo = {g: cols[g][partner] for g in GEOGRAPHY}
    for i, j in report.pairs:
        for rec in (i, j):
            key = f"{int(block[rec]):015d}"
            report.per_block[key] = report.per_block.get(key, 0) + 1
    return dataset.with_columns(**geo), report
