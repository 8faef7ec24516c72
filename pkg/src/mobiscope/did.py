"""Difference-in-differences on grids and scalar metrics.

All estimates net the treated-year change against the control-year change:
``did = (post_t - pre_t) - (post_c - pre_c)``, reported as a percentage of
the treated-year baseline ``pre_t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ContractError, EmptyInputError
from .geo import KmCell

ROLES = ("treated_pre", "treated_post", "control_pre", "control_post")

# lower-inclusive bin edges in meters; the last bin is open
HIST_EDGES = (0.0, 1000.0, 5000.0, 10000.0, 20000.0, 30000.0)
HIST_LABELS = ("0-999", "1000-4999", "5000-9999", "10000-19999", "20000-29999", "30000+")


@dataclass(frozen=True)
class DidCell:
    cell: KmCell
    did: float
    baseline: float
    pct_change: float | None


class DidScalar(NamedTuple):
    did: float
    pct: float | None


@dataclass(frozen=True)
class DistanceHistogram:
    shares: tuple
    counts: tuple
    edges: tuple = HIST_EDGES
    labels: tuple = HIST_LABELS


@dataclass(frozen=True)
class SubgroupMask:
    attribute: str
    cells: frozenset
    threshold: float = math.nan


@dataclass(frozen=True)
class SubgroupDid:
    attribute: str
    baseline: float
    did: float
    pct: float | None
    n: int


def _pct(did, base):
    return 100.0 * did / base if base > 0 else None


def did_scalar(post_t, pre_t, post_c, pre_c) -> DidScalar:
    did = (post_t - pre_t) - (post_c - pre_c)
    return DidScalar(did, _pct(did, pre_t))


def did_grid(post_t, pre_t, post_c, pre_c) -> dict:
    """Per-cell DiD of four :class:`~mobiscope.gridagg.GridFrame` objects.

    Cells missing from a frame count as zero phones. A cell absent from
    all four frames is absent from the result.
    """
    frames = (post_t, pre_t, post_c, pre_c)
    if len({f.hour for f in frames}) != 1:
        raise ContractError(f"frames cover different hours: {[f.hour for f in frames]}")
    cells = sorted(set().union(*(f.cells for f in frames)))
    out = {}
    for c in cells:
        a, b, cc, d = (f.cells.get(c, 0) for f in frames)
        did = (a - b) - (cc - d)
        out[c] = DidCell(c, did, b, _pct(did, b))
    return out


def did_arrays(post_t, pre_t, post_c, pre_c):
    """Vectorised counterpart of :func:`did_grid` on aligned arrays."""
    post_t, pre_t, post_c, pre_c = (np.asarray(v, dtype=float) for v in (post_t, pre_t, post_c, pre_c))
    did = (post_t - pre_t) - (post_c - pre_c)
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = np.where(pre_t > 0, 100.0 * did / pre_t, np.nan)
    return did, pct


def mean_distance(distances) -> float:
    distances = list(distances)
    if not distances:
        raise EmptyInputError("no max-distance records")
    return math.fsum(distances) / len(distances)


def _distances(records):
    if hasattr(records, "columns"):
        return [(KmCell(float(x), float(y)), float(d))
                for x, y, d in zip(records["ox"], records["oy"], records["max_dist_m"])]
    return [(r.origin_cell, float(r.max_dist)) for r in records]


def subgroup_did(records_by_role, mask: SubgroupMask | None = None) -> SubgroupDid:
    """DiD of mean max distance for phones homed in ``mask`` cells.

    ``records_by_role`` maps each of :data:`ROLES` to a list of
    :class:`~mobiscope.mobility.MaxDistanceRecord` or a homes DataFrame.
    ``mask=None`` selects the whole population.
    """
    if mask is not None and not mask.cells:
        raise EmptyInputError(f"empty subgroup mask for {mask.attribute!r}")
    missing = [r for r in ROLES if r not in records_by_role]
    if missing:
        raise ContractError(f"missing dates for roles {missing}")
    means = {}
    n = {}
    for role in ROLES:
        ds = [d for c, d in _distances(records_by_role[role]) if mask is None or c in mask.cells]
        if not ds:
            raise EmptyInputError(f"no phones homed in the subgroup on the {role} date")
        means[role] = mean_distance(ds)
        n[role] = len(ds)
    est = did_scalar(means["treated_post"], means["treated_pre"],
                     means["control_post"], means["control_pre"])
    return SubgroupDid(mask.attribute if mask else "all", means["treated_pre"], est.did, est.pct,
                       n["treated_pre"])


def distance_histogram(records) -> DistanceHistogram:
    if hasattr(records, "columns"):
        d = np.asarray(records["max_dist_m"], dtype=float)
    else:
        d = np.asarray([getattr(r, "max_dist", r) for r in records], dtype=float)
    if len(d) == 0:
        raise EmptyInputError("no distances to bin")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ContractError("distances must be finite and non-negative")
    idx = np.searchsorted(np.asarray(HIST_EDGES), d, side="right") - 1
    counts = np.bincount(idx, minlength=len(HIST_EDGES))
    return DistanceHistogram(tuple(float(c) / len(d) for c in counts), tuple(int(c) for c in counts))


def subgroup_mask(attribute: str, shares: dict, percentile: float = 90.0) -> SubgroupMask:
    """Cells whose share is at or above the given percentile (ties included)."""
    if not shares:
        raise EmptyInputError(f"no cells with a {attribute!r} share")
    vals = np.array(list(shares.values()), dtype=float)
    thr = float(np.percentile(vals, percentile))
    return SubgroupMask(attribute, frozenset(c for c, v in shares.items() if v >= thr), thr)


def hotcold_pct_change(did, baseline, hh_cells, ll_cells, method="ratio"):
    """Average percentage change of the DiD over HH and LL cells.

    ``method="ratio"`` divides summed DiD by summed baseline;
    ``method="mean"`` averages per-cell percentages over cells with a
    positive baseline. Undefined results are returned as ``None``.
    """
    if method not in ("ratio", "mean"):
        raise ValueError(f"unknown method {method!r}")

    def one(cells):
        cells = list(cells)
        if method == "ratio":
            base = math.fsum(baseline[c] for c in cells)
            return _pct(math.fsum(did[c] for c in cells), base) if cells else None
        pcts = [100.0 * did[c] / baseline[c] for c in cells if baseline[c] > 0]
        return math.fsum(pcts) / len(pcts) if pcts else None

    return one(hh_cells), one(ll_cells)
