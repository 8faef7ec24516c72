import datetime as dt
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from mobiscope.did import (HIST_EDGES, ROLES, SubgroupMask, did_arrays, did_grid, did_scalar,
                           distance_histogram, hotcold_pct_change, mean_distance, subgroup_did,
                           subgroup_mask)
from mobiscope.errors import ContractError, EmptyInputError
from mobiscope.geo import KmCell
from mobiscope.gridagg import GridFrame
from mobiscope.mobility import MaxDistanceRecord

C1, C2, C3 = KmCell(500.0, 500.0), KmCell(1500.0, 500.0), KmCell(2500.0, 500.0)
D = dt.date(2020, 3, 26)


def frame(cells, hour=10):
    return GridFrame(D, hour, cells)


def test_did_grid_examples():
    out = did_grid(frame({C1: 10, C2: 5}), frame({C1: 8, C2: 5}), frame({C1: 9, C2: 5}),
                   frame({C1: 9, C2: 5}))
    assert out[C1].did == 2 and out[C1].baseline == 8
    assert out[C1].pct_change == 25.0
    assert out[C2].did == 0
    assert C3 not in out


def test_did_grid_zero_fills_and_flags_zero_baseline():
    out = did_grid(frame({C1: 4}), frame({}), frame({}), frame({}))
    assert out[C1].did == 4
    assert out[C1].pct_change is None


def test_did_grid_mismatched_hours():
    with pytest.raises(ContractError):
        did_grid(frame({}, 10), frame({}, 11), frame({}, 10), frame({}, 10))


@pytest.mark.parametrize("args, did, pct", [
    ((5, 5, 5, 5), 0, 0.0),
    ((4, 6, 1, 1), -2, -100 / 3),
    ((3, 0, 1, 1), 3, None),
])
def test_did_scalar(args, did, pct):
    res = did_scalar(*args)
    assert res.did == did
    assert res.pct == (pct if pct is None else pytest.approx(pct))


@given(st.lists(st.tuples(*[st.integers(0, 1000)] * 4), min_size=1, max_size=30))
def test_did_arrays_match_grid(rows):
    cells = [KmCell(500.0 + 1000 * i, 500.0) for i in range(len(rows))]
    frames = [frame({c: r[j] for c, r in zip(cells, rows)}) for j in range(4)]
    grid = did_grid(*frames)
    did, pct = did_arrays(*zip(*rows))
    for i, c in enumerate(cells):
        assert grid[c].did == did[i]
        if grid[c].pct_change is None:
            assert np.isnan(pct[i])
        else:
            assert grid[c].pct_change == pct[i]


def _records(dists, cells=None):
    cells = cells or [C1] * len(dists)
    return [MaxDistanceRecord(f"p{i}", c, d) for i, (c, d) in enumerate(zip(cells, dists))]


def test_subgroup_full_mask_equals_overall():
    by_role = {"treated_pre": _records([1000, 3000], [C1, C2]),
               "treated_post": _records([500, 1500], [C1, C2]),
               "control_pre": _records([1000, 1000], [C1, C2]),
               "control_post": _records([1100, 900], [C1, C2])}
    overall = subgroup_did(by_role)
    full = subgroup_did(by_role, SubgroupMask("x", frozenset({C1, C2})))
    assert overall.did == full.did == -1000.0
    assert overall.pct == full.pct == -50.0
    only = subgroup_did(by_role, SubgroupMask("x", frozenset({C1})))
    assert only.did == -600.0 and only.pct == -60.0 and only.n == 1


def test_subgroup_accepts_frames():
    df = pd.DataFrame({"ox": [500.0], "oy": [500.0], "max_dist_m": [10.0]})
    res = subgroup_did({r: df for r in ROLES})
    assert res.did == 0 and res.n == 1


def test_subgroup_errors():
    by_role = {r: _records([1.0]) for r in ROLES}
    with pytest.raises(EmptyInputError):
        subgroup_did(by_role, SubgroupMask("x", frozenset()))
    with pytest.raises(EmptyInputError):
        subgroup_did(by_role, SubgroupMask("x", frozenset({C2})))
    with pytest.raises(ContractError):
        subgroup_did({"treated_pre": []})


def test_histogram_examples():
    h = distance_histogram([500.0, 1500.0, 7000.0])
    assert h.shares == (1 / 3, 1 / 3, 1 / 3, 0.0, 0.0, 0.0)
    assert distance_histogram([0.0, 0.0]).shares[0] == 1.0
    # edges are lower-inclusive
    h = distance_histogram(list(HIST_EDGES))
    assert h.counts == (1, 1, 1, 1, 1, 1)
    with pytest.raises(EmptyInputError):
        distance_histogram([])


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=200))
def test_histogram_shares_close(ds):
    h = distance_histogram(ds)
    assert math.isclose(math.fsum(h.shares), 1.0, abs_tol=1e-12)
    assert sum(h.counts) == len(ds)


def test_subgroup_mask_selects_top_decile_with_ties():
    shares = {KmCell(500.0 + 1000 * i, 500.0): i / 10 for i in range(20)}
    m = subgroup_mask("minority", shares)
    assert m.cells == {c for c, v in shares.items() if v >= np.percentile(list(shares.values()), 90)}
    flat = {c: 0.5 for c in shares}
    assert subgroup_mask("minority", flat).cells == set(flat)


def test_hotcold_examples():
    did = {C1: 8, C2: 8, C3: -1}
    base = {C1: 10, C2: 15, C3: 3}
    hh, ll = hotcold_pct_change(did, base, [C1, C2], [C3])
    assert hh == pytest.approx(64.0)
    assert ll == pytest.approx(-100 / 3)
    assert hotcold_pct_change({C1: 0}, {C1: 5}, [C1], [])[0] == 0.0
    assert hotcold_pct_change({C1: 1}, {C1: 0}, [C1], [])[0] is None
    hh, _ = hotcold_pct_change(did, base, [C1, C2], [C3], method="mean")
    assert hh == pytest.approx((80 + 800 / 15) / 2)


def test_mean_distance():
    assert mean_distance([0.1] * 10) == 0.1
    with pytest.raises(EmptyInputError):
        mean_distance([])
