import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobiscope.errors import GranularityError, InvalidCoordinateError
from mobiscope.geo import (HourBucket, KmCell, euclid, knn_exact, km_index, midpoint,
                           to_hour_bucket, truncate_to_km)

coords = st.floats(min_value=0, max_value=5e7, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("x, expected", [
    (675123.4, 675500.0),
    (675000.0, 675500.0),
    (675999.99, 675500.0),
    (0.0, 500.0),
    (999.9999999999999, 500.0),
    (1000.0, 1500.0),
])
def test_truncate_examples(x, expected):
    assert truncate_to_km(x) == expected


@pytest.mark.parametrize("bad", [-0.5, -1000.0, math.nan, math.inf])
def test_truncate_rejects_bad_coordinates(bad):
    with pytest.raises(InvalidCoordinateError):
        truncate_to_km(bad)
    with pytest.raises(InvalidCoordinateError):
        truncate_to_km(np.array([1.0, bad]))


@given(coords)
def test_truncate_lands_on_own_cell_midpoint(x):
    m = truncate_to_km(x)
    assert m % 1000 == 500
    assert m - 500 <= x < m + 500
    assert truncate_to_km(m) == m


@given(st.lists(coords, min_size=1, max_size=50))
def test_truncate_array_matches_scalar(xs):
    arr = truncate_to_km(np.array(xs))
    assert arr.tolist() == [truncate_to_km(x) for x in xs]
    assert (km_index(np.array(xs)) * 1000 + 500 == arr).all()


def test_kmcell_of_and_point():
    c = KmCell.of(675123.4, 6581999.0)
    assert c == KmCell(675500.0, 6581500.0)
    assert c.point.x == 675500.0


def test_hour_bucket():
    assert to_hour_bucket(dt.datetime(2020, 3, 26, 10, 35)) == HourBucket(dt.date(2020, 3, 26), 10)
    assert to_hour_bucket(dt.datetime(2020, 3, 26, 0, 0)).hour == 0
    with pytest.raises(GranularityError):
        to_hour_bucket(dt.datetime(2020, 3, 26, 10, 37))
    assert to_hour_bucket(dt.datetime(2020, 3, 26, 10, 37), strict=False).hour == 10


def test_euclid():
    assert euclid((0, 0), (3, 4)) == 5.0
    assert euclid((2, 2), (2, 2)) == 0.0
    with pytest.raises(InvalidCoordinateError):
        euclid((0, math.nan), (1, 1))


@given(coords, coords, coords, coords)
def test_euclid_symmetric(ax, ay, bx, by):
    assert euclid((ax, ay), (bx, by)) == euclid((bx, by), (ax, ay))


def test_midpoint():
    assert midpoint((0.0, 0.0), (1000.0, 500.0)) == (500.0, 250.0)


def _brute(points, queries, k):
    idx, dist = [], []
    for q in queries:
        d = [math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) for p in points]
        order = sorted(range(len(points)), key=lambda i: (d[i], i))[:k]
        idx.append(order)
        dist.append([d[i] for i in order])
    return np.array(idx), np.array(dist)


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 80), st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**31))
def test_knn_exact_matches_brute_force_on_lattice(n, k, n_q, seed):
    # a coarse lattice forces many distance ties
    rng = np.random.default_rng(seed)
    k = min(k, n)
    pts = rng.integers(0, 6, size=(n, 2)).astype(float) * 100
    qs = rng.integers(0, 6, size=(n_q, 2)).astype(float) * 100 + rng.choice([0, 50], size=(n_q, 2))
    idx, dist = knn_exact(pts, qs, k, pad=1)
    bi, bd = _brute(pts, qs, k)
    assert (idx == bi).all()
    assert (dist == bd).all()


def test_knn_exact_errors():
    with pytest.raises(ValueError):
        knn_exact(np.zeros((3, 2)), np.zeros((1, 2)), 4)
    idx, dist = knn_exact(np.zeros((3, 2)), np.empty((0, 2)), 2)
    assert idx.shape == (0, 2)
