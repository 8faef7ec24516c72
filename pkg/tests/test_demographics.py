import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobiscope.dataio import PersonRecord
from mobiscope.demographics import (AttributeSpec, attribute_predicates, context_for_cells,
                                    knn_share, poverty_threshold, shares_at)
from mobiscope.errors import EmptyInputError
from mobiscope.geo import KmCell, PlanarPoint
from oracles import brute_knn, brute_share


def person(x, y, age=40, minority=False, edu=False, income=100.0):
    return PersonRecord(PlanarPoint(float(x), float(y)), age, minority, edu, income)


def random_population(seed, n=200, span=20):
    rng = np.random.default_rng(seed)
    xy = rng.integers(0, span, size=(n, 2)) * 100
    return [person(x, y, int(rng.integers(0, 95)), bool(rng.random() < 0.3), bool(rng.random() < 0.4),
                   float(rng.integers(0, 500)))
            for x, y in xy]


def test_all_satisfy_is_one():
    pop = [person(100 * i, 0, minority=True) for i in range(10)]
    spec = AttributeSpec("minority", "full", lambda p: p.minority, k=5)
    assert knn_share((0.0, 0.0), pop, spec) == 1.0


def test_uniform_fraction_everywhere():
    # every location hosts 1 minority among 4 persons; k a multiple of 4 and ties broken by index
    pop = []
    for i in range(10):
        for j in range(4):
            pop.append(person(100 * i, 0, minority=(j == 0)))
    spec = AttributeSpec("minority", "full", lambda p: p.minority, k=8)
    for anchor in [(0.0, 0.0), (500.0, 0.0), (900.0, 0.0)]:
        assert knn_share(anchor, pop, spec) == 0.25


def test_too_few_in_scope():
    pop = [person(0, 0, age=10) for _ in range(150)] + [person(0, 0, age=30) for _ in range(50)]
    spec = AttributeSpec("high_edu", "adult", lambda p: p.tertiary_edu, k=100)
    with pytest.raises(EmptyInputError):
        knn_share((0.0, 0.0), pop, spec)


def test_adult_scope_excludes_children():
    pop = [person(0, 0, age=10, edu=False) for _ in range(5)] + [person(300, 0, age=30, edu=True) for _ in range(5)]
    spec = AttributeSpec("high_edu", "adult", lambda p: p.tertiary_edu, k=5)
    assert knn_share((0.0, 0.0), pop, spec) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_shares_match_brute_force(seed):
    pop = random_population(seed)
    specs = attribute_predicates(pop, k=100)
    rng = np.random.default_rng(seed + 1)
    anchors = rng.integers(0, 20, size=(5, 2)) * 100.0
    for spec in specs:
        got = shares_at(anchors, pop, spec)
        for a, g in zip(anchors, got):
            assert g == brute_share(tuple(a), pop, spec.in_scope, spec.predicate, spec.k)


def test_context_single_point():
    pop = [person(1000, 1000, minority=(i % 2 == 0)) for i in range(10)]
    spec = AttributeSpec("minority", "full", lambda p: p.minority, k=4)
    out = context_for_cells([KmCell(500.0, 500.0), KmCell(9500.0, 9500.0)], pop, [spec])
    assert [c.shares["minority"] for c in out] == [0.5, 0.5]


def test_context_nearest_point_and_coverage():
    pop = [person(0, 0, minority=False) for _ in range(3)] + [person(5000, 0, minority=True) for _ in range(3)]
    spec = AttributeSpec("minority", "full", lambda p: p.minority, k=3)
    out = context_for_cells([KmCell(1500.0, 500.0), KmCell(4500.0, 500.0)], pop, [spec], cover_radius=1000)
    assert out[0].shares["minority"] == 0.0
    assert out[1].shares["minority"] == 1.0
    assert out[0].covered is False and out[1].covered is True


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_context_matches_two_step_oracle(seed):
    pop = random_population(seed, n=150, span=30)
    spec = attribute_predicates(pop, k=50)[0]
    anchors = sorted({(p.location.x, p.location.y) for p in pop})
    cells = [KmCell(500.0 + 1000 * i, 500.0 + 1000 * j) for i in range(4) for j in range(4)]
    out = context_for_cells(cells, pop, [spec])
    for c, ctx in zip(cells, out):
        idx, _ = brute_knn(anchors, c, 1)
        expect = brute_share(anchors[idx[0]], pop, spec.in_scope, spec.predicate, spec.k)
        assert ctx.shares[spec.name] == expect


def test_poverty_threshold_examples():
    pop = [person(0, 0, income=100.0) for _ in range(4)]
    assert poverty_threshold(pop) == 60.0
    specs = {s.name: s for s in attribute_predicates(pop, k=4)}
    assert knn_share((0.0, 0.0), pop, specs["poor"]) == 0.0
    pop = [person(0, 0, income=v) for v in (10.0, 10.0, 10.0, 70.0)]
    assert poverty_threshold(pop) == 15.0
    specs = {s.name: s for s in attribute_predicates(pop, k=4)}
    assert knn_share((0.0, 0.0), pop, specs["poor"]) == 0.75
    assert poverty_threshold(pop, stat="median") == 6.0


def test_poverty_reference_ages():
    pop = [person(0, 0, age=80, income=1000.0), person(0, 0, age=30, income=100.0)]
    assert poverty_threshold(pop) == 60.0
    assert poverty_threshold(pop, ref_ages=None) == 0.6 * 550.0
    with pytest.raises(EmptyInputError):
        poverty_threshold([person(0, 0, age=80)])


def test_risk70_boundary():
    pop = [person(0, 0, age=a) for a in (69, 70, 71)]
    risk = {s.name: s for s in attribute_predicates(pop, k=3)}["risk70"]
    assert [risk.predicate(p) for p in pop] == [False, True, True]
