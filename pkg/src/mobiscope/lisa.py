"""Local Moran's I with inverse-distance weights and conditional permutations.

Numerical protocol (shared by every code path, so results are bit-stable):

* weights: ``1/d`` for neighbours with ``0 < d <= max_dist``, neighbours in
  ascending cell order; row standardisation divides by ``math.fsum`` of the
  row.
* z-scores over the analysed (non-isolated) cells: ``mean = fsum(x)/n``,
  population variance ``fsum((x-mean)**2)/n``.
* spatial lag accumulated left to right over the neighbour list.
* permutations: a shared index matrix ``R`` whose row ``p`` is the first
  ``kmax`` entries of ``default_rng([seed, 0, 0]).permutation(n-1)`` (drawn
  row after row), and a per-cell shuffle
  ``default_rng([seed, 1, i]).permutation(n-1)`` of the other cells.
  Permutation ``p`` of cell ``i`` uses the other cells at positions
  ``shuffle_i[R[p, :k_i]]``. Every cell's stream depends only on
  ``(seed, i)``, so serial and parallel runs agree.
* a permutation counts as extreme when ``|I_p| >= |I_obs| * (1 - 1e-10)``;
  ``pseudo_p = (extreme + 1) / (P + 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ContractError
from .geo import KmCell, knn_exact, planar_distance

CLASSES = ("HH", "LL", "HL", "LH", "NS", "ISOLATED")
TIE_RTOL = 1e-10


@dataclass
class SpatialWeights:
    cells: tuple
    neighbors: list
    weights: list
    row_standardized: bool
    max_dist: float

    @property
    def isolated(self) -> np.ndarray:
        return np.array([len(n) == 0 for n in self.neighbors], dtype=bool)

    def __len__(self):
        return len(self.cells)


@dataclass(frozen=True)
class LisaCell:
    cell: KmCell
    local_i: float
    pseudo_p: float
    z: float
    lag: float
    cls: str


def build_weights(cells, max_dist: float = 3000.0, row_standardize: bool = True) -> SpatialWeights:
    cells = tuple(KmCell(float(c[0]), float(c[1])) for c in cells)
    if len(set(cells)) != len(cells):
        raise ContractError("cells must be distinct")
    pts = np.array(cells, dtype=float).reshape(-1, 2)
    neighbors, weights = [], []
    if len(cells):
        tree = cKDTree(pts)
        cand = tree.query_ball_point(pts, max_dist * (1 + 1e-9) + 1e-6)
    for i in range(len(cells)):
        js = np.array(sorted(cand[i]), dtype=np.int64)
        d = planar_distance(pts[js, 0] - pts[i, 0], pts[js, 1] - pts[i, 1])
        ok = (d > 0) & (d <= max_dist)
        js, d = js[ok], d[ok]
        w = 1.0 / d
        if row_standardize and len(w):
            w = w / math.fsum(w.tolist())
        neighbors.append(js)
        weights.append(w)
    return SpatialWeights(cells, neighbors, weights, row_standardize, max_dist)


def _values_array(values, weights: SpatialWeights):
    if isinstance(values, dict):
        try:
            return np.array([float(values[c]) for c in weights.cells])
        except KeyError as exc:
            raise ContractError(f"no value for cell {exc.args[0]}") from None
    x = np.asarray(values, dtype=float)
    if x.shape != (len(weights),):
        raise ContractError("values do not align with weights")
    return x


@dataclass
class _Prepared:
    active: np.ndarray      # cell indices analysed
    z: np.ndarray           # z-scores on active cells, NaN if degenerate
    nbr: np.ndarray         # (n, kmax) neighbour positions within active, padded with 0
    w: np.ndarray           # (n, kmax) weights, padded with 0.0
    k: np.ndarray           # neighbour counts
    degenerate: bool


def _prepare(values, weights: SpatialWeights) -> _Prepared:
    x_all = _values_array(values, weights)
    if not np.all(np.isfinite(x_all)):
        raise ContractError("values must be finite")
    active = np.flatnonzero(~weights.isolated)
    n = len(active)
    if n < 3:
        raise ContractError(f"need at least 3 non-isolated cells, got {n}")
    pos = np.full(len(weights), -1, dtype=np.int64)
    pos[active] = np.arange(n)
    k = np.array([len(weights.neighbors[i]) for i in active], dtype=np.int64)
    kmax = int(k.max())
    nbr = np.zeros((n, kmax), dtype=np.int64)
    w = np.zeros((n, kmax))
    for a, i in enumerate(active):
        nbr[a, :k[a]] = pos[weights.neighbors[i]]
        w[a, :k[a]] = weights.weights[i]
    x = x_all[active]
    if np.ptp(x) == 0:
        return _Prepared(active, np.full(n, np.nan), nbr, w, k, True)
    mean = math.fsum(x.tolist()) / n
    dev = x - mean
    sd = math.sqrt(math.fsum((dev * dev).tolist()) / n)
    return _Prepared(active, dev / sd, nbr, w, k, False)


def _lag(prep: _Prepared) -> np.ndarray:
    lag = np.zeros(len(prep.active))
    for j in range(prep.nbr.shape[1]):
        lag += prep.w[:, j] * prep.z[prep.nbr[:, j]]
    return lag


def local_morans_i(values, weights: SpatialWeights) -> dict:
    """Local Moran's I per cell; NaN for isolated cells and zero-variance fields."""
    prep = _prepare(values, weights)
    out = {c: math.nan for c in weights.cells}
    if prep.degenerate:
        return out
    li = prep.z * _lag(prep)
    for a, i in enumerate(prep.active):
        out[weights.cells[i]] = float(li[a])
    return out


def shared_draws(n_others: int, kmax: int, permutations: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0, 0])
    return np.array([rng.permutation(n_others)[:kmax] for _ in range(permutations)],
                    dtype=np.int64).reshape(permutations, kmax)


def _pseudo_p(prep: _Prepared, permutations: int, seed: int) -> np.ndarray:
    n = len(prep.active)
    li = prep.z * _lag(prep)
    R = shared_draws(n - 1, prep.nbr.shape[1], permutations, seed)
    out = np.empty(n)
    idx = np.arange(n)
    for a in range(n):
        others = np.delete(idx, a)
        shuffle = np.random.default_rng([seed, 1, a]).permutation(n - 1)
        ka = prep.k[a]
        sample = others[shuffle[R[:, :ka]]]
        lag = np.zeros(permutations)
        for j in range(ka):
            lag += prep.w[a, j] * prep.z[sample[:, j]]
        extreme = np.abs(prep.z[a] * lag) >= abs(li[a]) * (1 - TIE_RTOL)
        out[a] = (int(extreme.sum()) + 1) / (permutations + 1)
    return out


def permutation_test(values, weights: SpatialWeights, permutations: int = 499, seed: int = 0) -> dict:
    """Conditional-permutation pseudo p-values (two-sided on ``|I|``).

    Zero-variance fields give ``1.0`` everywhere; isolated cells give NaN.
    """
    if permutations < 1:
        raise ConfigError("permutations must be >= 1")
    prep = _prepare(values, weights)
    out = {c: math.nan for c in weights.cells}
    if prep.degenerate:
        for i in prep.active:
            out[weights.cells[i]] = 1.0
        return out
    p = _pseudo_p(prep, permutations, seed)
    for a, i in enumerate(prep.active):
        out[weights.cells[i]] = float(p[a])
    return out


def classify(local_i, pseudo_p, z, lag, alpha: float = 0.05) -> str:
    if pseudo_p is None or math.isnan(pseudo_p) or pseudo_p > alpha:
        return "NS"
    if z > 0 and lag > 0:
        return "HH"
    if z < 0 and lag < 0:
        return "LL"
    if z > 0 and lag < 0:
        return "HL"
    if z < 0 and lag > 0:
        return "LH"
    return "NS"


def lisa(values: dict, max_dist: float = 3000.0, permutations: int = 499, seed: int = 0,
         alpha: float = 0.05, row_standardize: bool = True) -> dict:
    """Full LISA run over a ``{KmCell: value}`` map, returning :class:`LisaCell` per cell."""
    if permutations < 1:
        raise ConfigError("permutations must be >= 1")
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    cells = sorted(values)
    weights = build_weights(cells, max_dist, row_standardize)
    isolated = weights.isolated
    out = {c: LisaCell(c, math.nan, math.nan, math.nan, math.nan, "ISOLATED")
           for c, iso in zip(cells, isolated) if iso}
    if int((~isolated).sum()) < 3:
        for c, iso in zip(cells, isolated):
            if not iso:
                out[c] = LisaCell(c, math.nan, math.nan, math.nan, math.nan, "NS")
        return out
    prep = _prepare(values, weights)
    if prep.degenerate:
        for i in prep.active:
            out[cells[i]] = LisaCell(cells[i], math.nan, 1.0, 0.0, 0.0, "NS")
        return out
    lag = _lag(prep)
    li = prep.z * lag
    p = _pseudo_p(prep, permutations, seed)
    for a, i in enumerate(prep.active):
        out[cells[i]] = LisaCell(cells[i], float(li[a]), float(p[a]), float(prep.z[a]),
                                 float(lag[a]), classify(li[a], p[a], prep.z[a], lag[a], alpha))
    return dict(sorted(out.items()))


def global_morans_i(values, weights: SpatialWeights) -> float:
    prep = _prepare(values, weights)
    if prep.degenerate:
        return math.nan
    n = len(prep.active)
    s0 = float(prep.w.sum())
    num = float(np.sum(prep.z * _lag(prep)))
    return (n / s0) * num / float(np.sum(prep.z * prep.z))


def dist_to_k_jobs(cells, jobs, k: int = 100) -> dict:
    """Radius from each cell midpoint to its k-th nearest job."""
    pts = np.array([(j.location.x, j.location.y) if hasattr(j, "location") else tuple(j)
                    for j in jobs], dtype=float).reshape(-1, 2)
    if len(pts) < k:
        raise ContractError(f"need at least {k} jobs, registry has {len(pts)}")
    cells = [KmCell(float(c[0]), float(c[1])) for c in cells]
    if not cells:
        return {}
    _, dist = knn_exact(pts, np.array(cells, dtype=float), k)
    return {c: float(d) for c, d in zip(cells, dist[:, -1])}
