"""Risk metrics for a reconstruction measured against the data it targets.

Metrics take the target as a :class:`Histogram` over the reconstruction's
attributes (usually ``project(protected, attrs, level, unit)``) and the
reconstruction as either a :class:`RankedReconstruction` or a plain
:class:`Histogram` (a differencing result counts as a single run).

Every percentage is returned as a :class:`Rate` holding its numerator and
denominator; a zero denominator gives ``value=None`` instead of raising.
"""
from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any, Literal, Union

from .datamodel import Dataset, Histogram, IncomparableError, Prototype, SchemaError, format_value
from .recon_opt import RankedReconstruction

Reconstruction = Union[RankedReconstruction, Histogram]
FrequencyMode = Literal["runs", "occurrences"]

DISCLOSED = "DISCLOSED"
SAFE = "safe"


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class Rate:
    """``value = scale * numerator / denominator``; ``None`` when undefined."""

    numerator: int
    denominator: int
    scale: float = 100.0

    @property
    def value(self) -> float | None:
        if self.denominator == 0:
            return None
        return self.scale * self.numerator / self.denominator

    @property
    def defined(self) -> bool:
        return self.denominator != 0

    def __add__(self, other: Rate) -> Rate:
        if self.scale != other.scale:
            raise ValueError("cannot pool rates with different scales")
        return Rate(self.numerator + other.numerator, self.denominator + other.denominator, self.scale)

    def to_dict(self) -> dict[str, Any]:
        d = {"numerator": self.numerator, "denominator": self.denominator, "value": self.value}
        d["unit"] = "percent" if self.scale == 100.0 else "fraction"
        if not self.defined:
            d["flag"] = "undefined: zero denominator"
        return d

    def __str__(self) -> str:
        if self.value is None:
            return f"undefined ({self.numerator}/0)"
        suffix = "%" if self.scale == 100.0 else ""
        return f"{self.value:.2f}{suffix} ({self.numerator}/{self.denominator})"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _frequencies(recon: Reconstruction, mode: FrequencyMode = "runs") -> dict[Prototype, int]:
    if isinstance(recon, RankedReconstruction):
        return recon.frequencies(mode)
    if mode == "runs":
        return {p: 1 for p in recon}
    if mode == "occurrences":
        return dict(recon.items())
    raise ValueError(f"unknown frequency mode {mode!r}")


def _ranking(recon: Reconstruction) -> list[Prototype]:
    if isinstance(recon, RankedReconstruction):
        return recon.prototypes()
    return [p for p, _ in sorted(recon.items(), key=lambda kv: (-kv[1], kv[0].sort_key()))]


def _attrs(recon: Reconstruction) -> tuple[str, ...]:
    return tuple(recon.attrs)


def _check_comparable(recon: Reconstruction, truth: Histogram) -> None:
    if _attrs(recon) != truth.attrs:
        raise IncomparableError(f"reconstruction over {_attrs(recon)} vs target over {truth.attrs}")


# ---------------------------------------------------------------------------
# Correlation and ranking quality
# ---------------------------------------------------------------------------


def pearson(points: Iterable[tuple[float, float]]) -> float:
    pts = [(float(x), float(y)) for x, y in points]
    n = len(pts)
    if n < 2:
        raise UndefinedCorrelationError(f"need at least 2 points, got {n}")
    mx = math.fsum(x for x, _ in pts) / n
    my = math.fsum(y for _, y in pts) / n
    sxy = math.fsum((x - mx) * (y - my) for x, y in pts)
    sxx = math.fsum((x - mx) ** 2 for x, _ in pts)
    syy = math.fsum((y - my) ** 2 for _, y in pts)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("a coordinate has zero variance")
    return sxy / math.sqrt(sxx * syy)


@dataclass(frozen=True)
class MatchRate:
    k: int
    evaluated_at: int  # min(k, number of ranked prototypes)
    hits: int
    truncated: bool

    @property
    def rate(self) -> float | None:
        return self.hits / self.evaluated_at if self.evaluated_at else None

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), "rate": self.rate}


def match_rate_at_k(recon: Reconstruction, truth: Histogram, k: int) -> MatchRate:
    """Share of the top ``k`` ranked prototypes that occur in ``truth``.

    When fewer than ``k`` prototypes were ranked the rate is taken over all of
    them and ``truncated`` is set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_comparable(recon, truth)
    top = _ranking(recon)[:k]
    hits = sum(1 for p in top if p in truth)
    return MatchRate(k, len(top), hits, len(top) < k)


@dataclass
class ScatterResult:
    points: list[tuple[Prototype, int, int]]  # (prototype, multiplicity in truth, frequency)
    r: float | None
    r_error: str | None
    argmax_agreement: bool
    mode: str

    def pairs(self) -> list[tuple[int, int]]:
        return [(m, f) for _, m, f in self.points]


def multiplicity_frequency_points(
    recon: Reconstruction,
    truth: Histogram,
    mode: FrequencyMode = "runs",
    strict: bool = True,
) -> ScatterResult:
    """Join truth multiplicities with reconstruction frequencies.

    One point per prototype in either side, zero-filled.  Argmax agreement
    holds when the top-ranked prototype has the largest multiplicity in
    ``truth`` (any of them, if several tie).  With ``strict`` an undefined
    correlation raises; otherwise ``r`` is None and the reason is kept.
    """
    _check_comparable(recon, truth)
    freq = _frequencies(recon, mode)
    protos = sorted(set(truth) | set(freq), key=Prototype.sort_key)
    points = [(p, truth.get(p, 0), freq.get(p, 0)) for p in protos]
    r, err = None, None
    try:
        r = pearson((m, f) for _, m, f in points)
    except UndefinedCorrelationError as exc:
        if strict:
            raise
        err = str(exc)
    ranking = _ranking(recon)
    agree = False
    if ranking and len(truth):
        top_mult = max(truth.values())
        agree = truth.get(ranking[0], 0) == top_mult
    return ScatterResult(points, r, err, agree, mode)


def rare_precision(recon: Reconstruction, truth: Histogram, m: int, mode: FrequencyMode = "runs") -> Rate:
    """Among reconstructed prototypes with frequency <= m, the share with
    multiplicity exactly m in ``truth``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    _check_comparable(recon, truth)
    low = [p for p, f in _frequencies(recon, mode).items() if f <= m]
    return Rate(sum(1 for p in low if truth.get(p, 0) == m), len(low))


def spurious_rate(recon: Reconstruction, truth: Histogram) -> Rate:
    """Reconstructed prototypes absent from ``truth``, per prototype of ``truth``.
    Can exceed 100%."""
    _check_comparable(recon, truth)
    return Rate(sum(1 for p in _frequencies(recon) if p not in truth), len(truth))


def miss_rate(recon: Reconstruction, truth: Histogram) -> Rate:
    _check_comparable(recon, truth)
    freq = _frequencies(recon)
    return Rate(sum(1 for p in truth if p not in freq), len(truth))


# ---------------------------------------------------------------------------
# Reidentification profile
# ---------------------------------------------------------------------------


@dataclass
class ReidProfile:
    attrs: tuple[str, ...]
    geo_level: str | None
    multiplicities: dict[Prototype, int]
    n_records: int
    records_shared: Rate  # records whose prototype has multiplicity >= 2
    prototypes_shared: Rate  # prototypes with multiplicity >= 2
    max_multiplicity: int
    min_reid_probability: float | None  # 1 / max multiplicity
    mean_reid_per_record: float | None  # average over records of 1 / multiplicity
    mean_reid_per_prototype: float | None  # average over prototypes of 1 / multiplicity

    def reid_probability(self, proto: Prototype) -> float:
        return 1.0 / self.multiplicities[proto]

    def summary(self) -> dict[str, Any]:
        return {
            "attrs": list(self.attrs),
            "geo_level": self.geo_level,
            "n_records": self.n_records,
            "n_prototypes": len(self.multiplicities),
            "records_with_multiplicity_ge_2": self.records_shared.to_dict(),
            "prototypes_with_multiplicity_ge_2": self.prototypes_shared.to_dict(),
            "max_multiplicity": self.max_multiplicity,
            "min_reid_probability": self.min_reid_probability,
            "mean_reid_probability_per_record": self.mean_reid_per_record,
            "mean_reid_probability_per_prototype": self.mean_reid_per_prototype,
        }


def reid_profile_from_histogram(hist: Histogram, geo_level: str | None = None) -> ReidProfile:
    mult = dict(hist.items())
    n = sum(mult.values())
    shared_records = sum(v for v in mult.values() if v >= 2)
    shared_protos = sum(1 for v in mult.values() if v >= 2)
    mx = max(mult.values(), default=0)
    return ReidProfile(
        attrs=hist.attrs,
        geo_level=geo_level,
        multiplicities=mult,
        n_records=n,
        records_shared=Rate(shared_records, n),
        prototypes_shared=Rate(shared_protos, len(mult)),
        max_multiplicity=mx,
        min_reid_probability=1.0 / mx if mx else None,
        # each prototype contributes mu records with probability 1/mu
        mean_reid_per_record=len(mult) / n if n else None,
        mean_reid_per_prototype=math.fsum(1.0 / v for v in mult.values()) / len(mult) if mult else None,
    )


def reid_profile(dataset: Dataset, attrs: Sequence[str], geo_level: str | None = None, unit: str | None = None) -> ReidProfile:
    """Multiplicities of ``attrs`` prototypes counted within each geo unit.

    Without ``unit`` all units at ``geo_level`` are profiled together, the
    unit id being part of the prototype; ``geo_level=None`` counts nationally.
    """
    hist = dataset.histogram(tuple(attrs), geo_level, unit)
    return reid_profile_from_histogram(hist, geo_level)


# ---------------------------------------------------------------------------
# Attribute disclosure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DisclosureVerdict:
    qi_values: Prototype
    n_records: int
    condition1: bool  # all matching records share one confidential combination
    condition2: bool  # the data is an exhaustive enumeration of the population
    condition3: bool  # the reconstruction shows exactly one confidential combination
    diversity: int  # distinct confidential combinations among matching reconstructed prototypes

    @property
    def verdict(self) -> str:
        return DISCLOSED if self.condition1 and self.condition2 and self.condition3 else SAFE

    def to_dict(self) -> dict[str, Any]:
        return {
            "qi": {a: format_value(v) for a, v in zip(self.qi_values.attrs, self.qi_values.values)},
            "n_records": self.n_records,
            "condition1": self.condition1,
            "condition2": self.condition2,
            "condition3": self.condition3,
            "diversity": self.diversity,
            "verdict": self.verdict,
        }


def attribute_disclosure_eval(
    truth: Histogram | Dataset,
    recon: Reconstruction,
    qi_attrs: Sequence[str],
    conf_attrs: Sequence[str],
    exhaustive: bool,
) -> list[DisclosureVerdict]:
    """One verdict per QI combination present in ``truth``, in sorted order."""
    qi_attrs, conf_attrs = tuple(qi_attrs), tuple(conf_attrs)
    if set(qi_attrs) & set(conf_attrs):
        raise SchemaError(f"attributes {sorted(set(qi_attrs) & set(conf_attrs))} are both QI and confidential")
    both = qi_attrs + conf_attrs
    if isinstance(truth, Dataset):
        truth = truth.histogram(both)
    for name, attrs in (("target", truth.attrs), ("reconstruction", _attrs(recon))):
        missing = set(both) - set(attrs)
        if missing:
            raise SchemaError(f"{name} lacks attributes {sorted(missing)}")

    true_conf: dict[Prototype, set[Prototype]] = {}
    counts: dict[Prototype, int] = {}
    for p, n in truth.items():
        qi = p.project(qi_attrs)
        true_conf.setdefault(qi, set()).add(p.project(conf_attrs))
        counts[qi] = counts.get(qi, 0) + n
    recon_conf: dict[Prototype, set[Prototype]] = {}
    for p in _frequencies(recon):
        recon_conf.setdefault(p.project(qi_attrs), set()).add(p.project(conf_attrs))

    out = []
    for qi in sorted(true_conf, key=Prototype.sort_key):
        diversity = len(recon_conf.get(qi, ()))
        out.append(
            DisclosureVerdict(qi, counts[qi], len(true_conf[qi]) == 1, bool(exhaustive), diversity == 1, diversity)
        )
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class UnitRisk:
    unit: str
    geo_level: str
    method: str  # "crr" or "diff"
    n_runs: int
    scatter: ScatterResult
    scatter_occurrences: ScatterResult
    match_rates: list[MatchRate]
    rare: dict[str, dict[int, Rate]]
    spurious: Rate
    miss: Rate
    reid: ReidProfile
    disclosure: list[DisclosureVerdict] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "unit": self.unit,
            "geo_level": self.geo_level,
            "method": self.method,
            "n_runs": self.n_runs,
            "pearson_r": self.scatter.r,
            "pearson_r_error": self.scatter.r_error,
            "pearson_r_occurrences": self.scatter_occurrences.r,
            "argmax_agreement": self.scatter.argmax_agreement,
            "match_rate_at_k": [m.to_dict() for m in self.match_rates],
            "rare_precision": {mode: {str(m): r.to_dict() for m, r in by_m.items()} for mode, by_m in self.rare.items()},
            "spurious_rate": self.spurious.to_dict(),
            "miss_rate": self.miss.to_dict(),
            "reid": self.reid.summary(),
            "disclosure": {
                "n_qi_combinations": len(self.disclosure),
                "n_disclosed": sum(1 for v in self.disclosure if v.verdict == DISCLOSED),
                "verdicts": [v.to_dict() for v in self.disclosure],
            },
        }


def evaluate_unit(
    recon: Reconstruction,
    truth: Histogram,
    unit: str,
    geo_level: str,
    ks: Sequence[int] = (1, 5, 10, 20, 50),
    ms: Sequence[int] = (1, 2, 3),
    qi_attrs: Sequence[str] | None = None,
    conf_attrs: Sequence[str] | None = None,
    exhaustive: bool = False,
    method: str | None = None,
) -> UnitRisk:
    if method is None:
        method = "crr" if isinstance(recon, RankedReconstruction) else "diff"
    n_runs = recon.n_runs if isinstance(recon, RankedReconstruction) else 1
    disclosure = []
    if qi_attrs and conf_attrs:
        disclosure = attribute_disclosure_eval(truth, recon, qi_attrs, conf_attrs, exhaustive)
    return UnitRisk(
        unit=unit,
        geo_level=geo_level,
        method=method,
        n_runs=n_runs,
        scatter=multiplicity_frequency_points(recon, truth, "runs", strict=False),
        scatter_occurrences=multiplicity_frequency_points(recon, truth, "occurrences", strict=False),
        match_rates=[match_rate_at_k(recon, truth, k) for k in ks],
        rare={mode: {m: rare_precision(recon, truth, m, mode) for m in ms} for mode in ("runs", "occurrences")},
        spurious=spurious_rate(recon, truth),
        miss=miss_rate(recon, truth),
        reid=reid_profile_from_histogram(truth, geo_level),
        disclosure=disclosure,
    )


def _pool(rates: Iterable[Rate]) -> Rate:
    total = Rate(0, 0)
    for r in rates:
        total = total + r
    return total


@dataclass
class RiskReport:
    units: list[UnitRisk]
    meta: dict[str, Any] = field(default_factory=dict)

    def aggregate(self) -> dict[str, Any]:
        """Pooled numerators/denominators over units, grouped by (level, method)."""
        groups: dict[str, list[UnitRisk]] = {}
        for u in self.units:
            groups.setdefault(f"{u.geo_level}/{u.method}", []).append(u)
        out = {}
        for key in sorted(groups):
            us = groups[key]
            rs = [u.scatter.r for u in us if u.scatter.r is not None]
            ms = sorted({m for u in us for m in u.rare["runs"]})
            ks = sorted({m.k for u in us for m in u.match_rates})
            out[key] = {
                "n_units": len(us),
                "mean_pearson_r": math.fsum(rs) / len(rs) if rs else None,
                "n_units_r_defined": len(rs),
                "argmax_agreement": Rate(sum(u.scatter.argmax_agreement for u in us), len(us)).to_dict(),
                "spurious_rate": _pool(u.spurious for u in us).to_dict(),
                "miss_rate": _pool(u.miss for u in us).to_dict(),
                "rare_precision": {
                    mode: {str(m): _pool(u.rare[mode][m] for u in us if m in u.rare[mode]).to_dict() for m in ms}
                    for mode in ("runs", "occurrences")
                },
                "match_rate_at_k": {
                    str(k): Rate(
                        sum(m.hits for u in us for m in u.match_rates if m.k == k),
                        sum(m.evaluated_at for u in us for m in u.match_rates if m.k == k),
                        scale=1.0,
                    ).to_dict()
                    for k in ks
                },
                "records_with_multiplicity_ge_2": _pool(u.reid.records_shared for u in us).to_dict(),
                "max_multiplicity": max(u.reid.max_multiplicity for u in us),
                "n_disclosed": sum(1 for u in us for v in u.disclosure if v.verdict == DISCLOSED),
                "n_qi_combinations": sum(len(u.disclosure) for u in us),
            }
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "meta": dict(self.meta),
            "aggregate": self.aggregate(),
            "units": [u.to_dict() for u in sorted(self.units, key=lambda u: (u.geo_level, u.method, u.unit))],
        }

    def to_text(self) -> str:
        lines = ["Reconstruction risk report", ""]
        for key, agg in self.aggregate().items():
            lines.append(f"[{key}] units: {agg['n_units']}")
            r = agg["mean_pearson_r"]
            lines.append(f"  mean Pearson r (runs frequency): {'undefined' if r is None else f'{r:.4f}'}")
            lines.append(f"  argmax agreement: {_fmt(agg['argmax_agreement'])}")
            lines.append(f"  spurious rate: {_fmt(agg['spurious_rate'])}")
            lines.append(f"  miss rate: {_fmt(agg['miss_rate'])}")
            for mode, by_m in agg["rare_precision"].items():
                parts = ", ".join(f"m={m}: {_fmt(v)}" for m, v in by_m.items())
                lines.append(f"  rare precision ({mode}): {parts}")
            for k, v in agg["match_rate_at_k"].items():
                lines.append(f"  match rate @{k}: {_fmt(v)}")
            lines.append(f"  records with multiplicity >= 2: {_fmt(agg['records_with_multiplicity_ge_2'])}")
            lines.append(f"  max multiplicity: {agg['max_multiplicity']}")
            lines.append(f"  disclosed QI combinations: {agg['n_disclosed']} of {agg['n_qi_combinations']}")
            lines.append("")
        return "\n".join(lines)


def _fmt(d: Mapping[str, Any]) -> str:
    if d["value"] is None:
        return f"undefined ({d['numerator']}/{d['denominator']})"
    unit = "%" if d["unit"] == "percent" else ""
    return f"{d['value']:.4f}{unit} ({d['numerator']}/{d['denominator']})"
