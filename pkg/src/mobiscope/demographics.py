"""Bespoke k-nearest-neighbour population context for km cells.

Shares are computed around every populated 100 m point from its k nearest
in-scope persons, then each cell midpoint takes the shares of the nearest
populated point. Neighbour ties are broken by (distance, input index), so
results never depend on the spatial index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import EmptyInputError
from .geo import KmCell, knn_exact

ATTRIBUTES = ("minority", "high_edu", "poor", "risk70")
RISK_AGE = 70


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    scope: str
    predicate: Callable
    k: int = 100

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.scope not in ("full", "adult"):
            raise ValueError(f"unknown scope {self.scope!r}")

    def in_scope(self, person) -> bool:
        return self.scope == "full" or person.adult


@dataclass(frozen=True)
class DemographicContext:
    cell: KmCell
    shares: dict
    covered: bool = True
    distance: float = 0.0


def _scoped(population, spec):
    members = [p for p in population if spec.in_scope(p)]
    if len(members) < spec.k:
        raise EmptyInputError(
            f"{spec.name}: need {spec.k} in-scope persons, population has {len(members)}")
    pts = np.array([(p.location.x, p.location.y) for p in members], dtype=float)
    flags = np.array([bool(spec.predicate(p)) for p in members], dtype=bool)
    return pts, flags


def knn_share(anchor, population, spec: AttributeSpec) -> float:
    pts, flags = _scoped(population, spec)
    idx, _ = knn_exact(pts, np.array([anchor], dtype=float), spec.k)
    return int(flags[idx[0]].sum()) / spec.k


def shares_at(points, population, spec: AttributeSpec) -> np.ndarray:
    """``knn_share`` for many anchors at once."""
    pts, flags = _scoped(population, spec)
    idx, _ = knn_exact(pts, np.asarray(points, dtype=float).reshape(-1, 2), spec.k)
    return flags[idx].sum(axis=1) / spec.k


def populated_points(population) -> np.ndarray:
    if not population:
        raise EmptyInputError("population is empty")
    return np.array(sorted({(p.location.x, p.location.y) for p in population}), dtype=float)


def context_for_cells(cells, population, specs, cover_radius: float | None = None):
    """Shares per cell via the nearest populated point.

    Cells farther than ``cover_radius`` from every populated point are
    returned with ``covered=False`` (shares are still filled in).
    """
    anchors = populated_points(population)
    point_shares = {s.name: shares_at(anchors, population, s) for s in specs}
    cells = [KmCell(float(c[0]), float(c[1])) for c in cells]
    if not cells:
        return []
    near, dist = knn_exact(anchors, np.array(cells, dtype=float), 1)
    out = []
    for c, j, d in zip(cells, near[:, 0], dist[:, 0]):
        shares = {name: float(v[j]) for name, v in point_shares.items()}
        covered = cover_radius is None or bool(d <= cover_radius)
        out.append(DemographicContext(c, shares, covered, float(d)))
    return out


def poverty_threshold(population, stat: str = "mean", ref_ages=(16, 74)) -> float:
    """60 % of the mean (or median) disposable income of the reference population."""
    if ref_ages is None:
        ref = [p.disposable_income for p in population]
    else:
        lo, hi = ref_ages
        ref = [p.disposable_income for p in population if lo <= p.age <= hi]
    if not ref:
        raise EmptyInputError("empty reference population for the poverty threshold")
    if stat == "mean":
        centre = math.fsum(ref) / len(ref)
    elif stat == "median":
        centre = float(np.median(ref))
    else:
        raise ValueError(f"unknown poverty statistic {stat!r}")
    return 0.6 * centre


def attribute_predicates(population, k: int = 100, poor_stat: str = "mean",
                         poor_ref_ages=(16, 74)) -> list[AttributeSpec]:
    """The four built-in subgroup attributes, in output column order."""
    threshold = poverty_threshold(population, poor_stat, poor_ref_ages)
    return [
        AttributeSpec("minority", "full", lambda p: p.minority, k),
        AttributeSpec("high_edu", "adult", lambda p: p.tertiary_edu, k),
        AttributeSpec("poor", "full", lambda p: p.disposable_income <= threshold, k),
        AttributeSpec("risk70", "full", lambda p: p.age >= RISK_AGE, k),
    ]
