import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mobiscope.errors import ConfigError, ContractError
from mobiscope.geo import KmCell
from mobiscope.lisa import (build_weights, classify, dist_to_k_jobs, global_morans_i, lisa,
                            local_morans_i, permutation_test)
from oracles import brute_kth_job, naive_lisa


def grid(nx, ny):
    return [KmCell(500.0 + 1000 * i, 500.0 + 1000 * j) for i in range(nx) for j in range(ny)]


def test_weights_examples():
    w = build_weights([KmCell(500.0, 500.0), KmCell(1500.0, 500.0)], row_standardize=False)
    assert [list(x) for x in w.weights] == [[0.001], [0.001]]
    w = build_weights([KmCell(500.0, 500.0), KmCell(4000.0, 500.0)])
    assert w.isolated.tolist() == [True, True]
    w = build_weights([KmCell(500.0, 500.0), KmCell(1500.0, 500.0), KmCell(2500.0, 500.0)])
    assert w.weights[1].tolist() == [0.5, 0.5]
    assert w.neighbors[1].tolist() == [0, 2]


def test_hand_computed_local_i():
    cells = [KmCell(500.0, 500.0), KmCell(1500.0, 500.0), KmCell(2500.0, 500.0)]
    li = local_morans_i([0.0, 0.0, 3.0], build_weights(cells))
    assert li[cells[0]] == pytest.approx(0.0, abs=1e-15)


def test_checkerboard_is_negative_everywhere():
    cells = grid(4, 4)
    vals = [1.0 if (int(c.cx) // 1000 + int(c.cy) // 1000) % 2 else -1.0 for c in cells]
    li = local_morans_i(vals, build_weights(cells, max_dist=1000.0))
    assert all(v < 0 for v in li.values())


def test_constant_field_is_all_ns():
    cells = grid(5, 5)
    res = lisa({c: 7.0 for c in cells}, permutations=99)
    assert {r.cls for r in res.values()} == {"NS"}
    assert all(r.pseudo_p == 1.0 for r in res.values())
    assert all(math.isnan(v) for v in local_morans_i([7.0] * 25, build_weights(cells)).values())


def test_classify_examples():
    assert classify(3.0, 0.002, 2, 1.5) == "HH"
    assert classify(0.8, 0.002, -1, -0.8) == "LL"
    assert classify(-1.0, 0.002, 2, -0.5) == "HL"
    assert classify(-1.0, 0.002, -2, 0.5) == "LH"
    assert classify(3.0, 0.3, 2, 1.5) == "NS"
    assert classify(math.nan, math.nan, 0, 0) == "NS"


def test_pvalue_support():
    rng = np.random.default_rng(1)
    cells = grid(5, 5)
    p = permutation_test(rng.normal(size=25), build_weights(cells), permutations=499, seed=3)
    for v in p.values():
        assert round(v * 500) == v * 500
        assert 1 / 500 <= v <= 1


def test_permutation_determinism_and_seed_dependence():
    rng = np.random.default_rng(2)
    cells = grid(5, 5)
    x = rng.normal(size=25)
    w = build_weights(cells)
    assert permutation_test(x, w, 99, seed=5) == permutation_test(x, w, 99, seed=5)
    assert permutation_test(x, w, 99, seed=5) != permutation_test(x, w, 99, seed=6)


def test_single_extreme_cell_is_significant():
    rng = np.random.default_rng(4)
    cells = grid(5, 5)
    x = rng.uniform(0, 1, size=25)
    x[12] = 50.0
    # neighbours of the spike share its height so the local statistic is large
    w = build_weights(cells, max_dist=1000.0)
    for j in w.neighbors[12]:
        x[j] = 40.0
    p = permutation_test(x, w, permutations=499, seed=0)
    assert p[cells[12]] <= 0.01


def test_permutations_must_be_positive():
    with pytest.raises(ConfigError):
        permutation_test([1.0, 2.0, 3.0], build_weights(grid(3, 1)), permutations=0)
    with pytest.raises(ConfigError):
        lisa({c: 1.0 for c in grid(3, 1)}, permutations=0)


def test_misaligned_values():
    with pytest.raises(ContractError):
        local_morans_i([1.0, 2.0], build_weights(grid(3, 1)))


def test_isolated_cells_are_flagged_and_excluded():
    cells = grid(3, 3) + [KmCell(20500.0, 20500.0)]
    vals = {c: float(i) for i, c in enumerate(cells)}
    res = lisa(vals, permutations=19)
    assert res[KmCell(20500.0, 20500.0)].cls == "ISOLATED"
    ref = lisa({c: v for c, v in vals.items() if c != KmCell(20500.0, 20500.0)}, permutations=19)
    for c in ref:
        assert res[c] == ref[c]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 6), st.integers(2, 6))
def test_matches_naive_oracle(seed, nx, ny):
    rng = np.random.default_rng(seed)
    cells = grid(nx, ny)
    x = rng.normal(size=len(cells)).round(2)
    res = lisa(dict(zip(cells, x)), permutations=29, seed=seed % 1000)
    li, p = naive_lisa(cells, x, permutations=29, seed=seed % 1000)
    for c, a, b in zip(cells, li, p):
        r = res[c]
        if math.isnan(a):
            assert r.cls == "NS"
        else:
            assert r.local_i == a
            assert r.pseudo_p == b


def test_global_morans_i_signs():
    cells = grid(6, 6)
    smooth = [c.cx for c in cells]
    checker = [(-1.0) ** (int(c.cx) // 1000 + int(c.cy) // 1000) for c in cells]
    assert global_morans_i(smooth, build_weights(cells)) > 0
    assert global_morans_i(checker, build_weights(cells, max_dist=1000.0)) < 0


def test_dist_to_k_jobs_examples():
    c = KmCell(500.0, 500.0)
    assert dist_to_k_jobs([c], [(1200.0, 500.0)], k=1)[c] == 700.0
    jobs = [(600.0, 500.0), (700.0, 500.0), (800.0, 500.0), (900.0, 500.0)]
    assert dist_to_k_jobs([c], jobs, k=3)[c] == 300.0
    with pytest.raises(ContractError):
        dist_to_k_jobs([c], jobs, k=5)


def test_dist_to_k_jobs_matches_brute_force():
    rng = np.random.default_rng(8)
    jobs = [tuple(p) for p in (rng.integers(0, 100, size=(300, 2)) * 100.0)]
    cells = [KmCell(500.0 + 1000 * i, 500.0 + 1000 * j) for i in range(10) for j in range(10)]
    got = dist_to_k_jobs(cells, jobs, k=40)
    for c in cells:
        assert got[c] == brute_kth_job(c, jobs, 40)
