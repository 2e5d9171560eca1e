from __future__ import annotations

import threading
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from censusrecon.datamodel import (
    AGE_P12_BUCKETS,
    AGE_PCT12_BUCKETS,
    CENSUS_SCHEMA,
    COLUMNS,
    MALE,
    UNDETERMINED,
    AgeRange,
    Dataset,
    DomainError,
    Histogram,
    IncomparableError,
    Prototype,
    SchemaError,
    format_value,
    multiset_diff,
    parse_value,
    project,
    race_group,
)

from conftest import random_dataset, rec


def test_schema_shape():
    assert len(COLUMNS) == 9
    assert [a.name for a in CENSUS_SCHEMA.attributes][:4] == ["state", "county", "tract", "block"]
    assert len(CENSUS_SCHEMA["hhgq"].domain) == 8
    assert len(CENSUS_SCHEMA["race"].domain) == 63
    assert CENSUS_SCHEMA["age"].domain == range(0, 116)


def test_race_group_mapping():
    assert [race_group(r) for r in (1, 2, 3, 4, 5, 6)] == [1, 2, 3, 4, 5, 6]
    assert race_group(7) == 7 and race_group(63) == 7
    assert list(race_group(np.array([1, 6, 7, 63]))) == [1, 6, 7, 7]


def test_age_buckets_cover_domain():
    for buckets in (AGE_P12_BUCKETS, AGE_PCT12_BUCKETS):
        ages = [a for lo, hi in buckets for a in range(lo, hi + 1)]
        assert ages == list(range(116))
    assert len(AGE_P12_BUCKETS) == 23
    assert AGE_PCT12_BUCKETS[-3:] == ((100, 104), (105, 109), (110, 115))


def test_interval_never_equals_point():
    assert Prototype(("age",), (AgeRange(5, 5),)) != Prototype(("age",), (5,))
    assert Prototype(("sex",), (1,)) != Prototype(("age",), (1,))


def test_value_text_round_trip():
    for v in (0, 17, AgeRange(0, 4), AgeRange(110, 115), UNDETERMINED):
        assert parse_value(format_value(v)) == v
    assert parse_value("01001000100", "tract_id") == "01001000100"


def test_out_of_domain_rejected():
    with pytest.raises(DomainError) as err:
        Dataset.from_records([rec(), rec(age=200)])
    assert err.value.row == 1 and err.value.value == 200


def test_project_identical_records():
    ds = Dataset.from_records([rec()] * 3)
    assert dict(project(ds, ["sex"]).items()) == {Prototype(("sex",), (MALE,)): 3}


def test_project_empty():
    assert len(project(Dataset.empty(), ["sex", "age"])) == 0


def test_project_unknown_attribute():
    with pytest.raises(SchemaError):
        project(Dataset.from_records([rec()]), ["income"])


def test_project_matches_group_by(rng):
    ds = random_dataset(rng, 100)
    oracle = Counter((r.sex, r.age) for r in ds.records())
    got = project(ds, ["sex", "age"])
    assert {p.values: n for p, n in got.items()} == dict(oracle)
    assert got.total() == 100


def test_projection_refinement_and_idempotence(rng):
    ds = random_dataset(rng, 300, n_ages=10)
    fine = ds.histogram(("sex", "age", "race_group", "hispanic"))
    coarse = ds.histogram(("sex", "race_group"))
    assert fine.marginalize(("sex", "race_group")) == coarse
    assert coarse.marginalize(coarse.attrs) == coarse


def test_blocks_sum_to_tract(rng):
    ds = random_dataset(rng, 400, n_ages=5)
    attrs = ("sex", "age", "race_group", "hispanic")
    for tract in ds.unit_ids("tract"):
        blocks = [b for b in ds.unit_ids("block") if b.startswith(tract)]
        total = Histogram(attrs)
        for b in blocks:
            total = total + ds.histogram(attrs, "block", b)
        assert total == ds.histogram(attrs, "tract", tract)


def test_histogram_with_geo_level_prefixes_unit(rng):
    ds = random_dataset(rng, 50)
    h = ds.histogram(("sex",), "tract")
    assert h.attrs == ("tract_id", "sex")
    assert h.total() == 50


def test_multiset_diff_identity(rng):
    h = project(random_dataset(rng, 50), ["sex", "age"])
    d = multiset_diff(h, h)
    assert d.is_empty() and not d.only_in_a and not d.only_in_b and not d.deltas


def test_multiset_diff_forced():
    p, q = Prototype.of(sex=1), Prototype.of(sex=2)
    d = multiset_diff(Histogram(("sex",), {p: 2}), Histogram(("sex",), {p: 1, q: 3}))
    assert d.deltas == {p: 1}
    assert dict(d.only_in_b.items()) == {q: 3}
    assert not d.only_in_a


def test_multiset_diff_mismatched_attrs():
    with pytest.raises(IncomparableError):
        multiset_diff(Histogram(("sex",)), Histogram(("age",)))


def test_multiset_diff_sort_and_scan_oracle(rng):
    a = random_dataset(rng, 120, n_ages=4)
    b = random_dataset(rng, 120, n_ages=4)
    ha, hb = project(a, ["sex", "age"]), project(b, ["sex", "age"])
    d = multiset_diff(ha, hb)
    # scan the merged sorted record lists
    ra = sorted((r.sex, r.age) for r in a.records())
    rb = sorted((r.sex, r.age) for r in b.records())
    ca, cb = Counter(ra), Counter(rb)
    for key in set(ca) | set(cb):
        p = Prototype(("sex", "age"), key)
        if key not in cb:
            assert d.only_in_a[p] == ca[key]
        elif key not in ca:
            assert d.only_in_b[p] == cb[key]
        elif ca[key] != cb[key]:
            assert d.deltas[p] == ca[key] - cb[key]
        else:
            assert p not in d.deltas


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 2), st.integers(0, 3)), max_size=40))
def test_histogram_equality_is_multiset_equality(pairs):
    protos = [Prototype(("sex", "age"), v) for v in pairs]
    h1 = Histogram.from_prototypes(("sex", "age"), protos)
    h2 = Histogram.from_prototypes(("sex", "age"), reversed(protos))
    assert h1 == h2 and hash(h1) == hash(h2)
    assert h1.total() == len(protos)
    assert multiset_diff(h1, h2).is_empty()


@settings(max_examples=60, deadline=None)
@given(st.tuples(st.integers(1, 2), st.integers(0, 5)), st.tuples(st.integers(1, 2), st.integers(0, 5)))
def test_prototype_hash_consistent(a, b):
    pa, pb = Prototype(("sex", "age"), a), Prototype(("sex", "age"), b)
    assert (pa == pb) == (a == b)
    if pa == pb:
        assert hash(pa) == hash(pb)


def test_dataset_is_immutable(rng):
    ds = random_dataset(rng, 10)
    with pytest.raises(ValueError):
        ds.column("age")[0] = 3


def test_histogram_cache_is_thread_safe(rng):
    ds = random_dataset(rng, 2000)
    results = []

    def work():
        results.append(ds.histogram(("sex", "age_p12"), "block"))

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r == results[0] for r in results)
