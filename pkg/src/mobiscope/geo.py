"""Planar geometry, km-grid truncation, hour bucketing and exact k-NN search.

All coordinates are meters in one projected CRS. Distances are always
computed as ``sqrt(dx*dx + dy*dy)`` so that scalar and vectorised paths
agree bit for bit.
"""
from __future__ import annotations

import datetime as dt
import logging
import math
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import GranularityError, InvalidCoordinateError

log = logging.getLogger(__name__)

KM = 1000.0
HALF_KM = 500.0
SLOT_MINUTES = 5


class PlanarPoint(NamedTuple):
    x: float
    y: float


class KmCell(NamedTuple):
    """Midpoint of a 1 km grid square."""
    cx: float
    cy: float

    @classmethod
    def of(cls, x, y) -> "KmCell":
        return cls(truncate_to_km(x), truncate_to_km(y))

    @property
    def point(self) -> PlanarPoint:
        return PlanarPoint(self.cx, self.cy)


class HourBucket(NamedTuple):
    date: dt.date
    hour: int


def _check_coord(value):
    if not math.isfinite(value):
        raise InvalidCoordinateError(f"non-finite coordinate: {value!r}")
    if value < 0:
        raise InvalidCoordinateError(f"negative coordinate: {value!r}")


def truncate_to_km(coord):
    """Relocate a coordinate to the midpoint of its 1 km grid square.

    Works on scalars and numpy arrays. Floor division is used instead of
    ``trunc(coord / 1000)``; they agree for non-negative input but floor
    division is exact, whereas the quotient can round up just below a
    kilometre boundary.
    """
    if isinstance(coord, np.ndarray):
        if not np.all(np.isfinite(coord)):
            raise InvalidCoordinateError("non-finite coordinate in array")
        if np.any(coord < 0):
            raise InvalidCoordinateError("negative coordinate in array")
        return (coord // KM) * KM + HALF_KM
    coord = float(coord)
    _check_coord(coord)
    return (coord // KM) * KM + HALF_KM


def km_index(coord: np.ndarray) -> np.ndarray:
    """Integer grid index ``trunc(coord / 1000)`` for non-negative coordinates."""
    return (coord // KM).astype(np.int64)


def to_hour_bucket(timestamp: dt.datetime, strict: bool = True) -> HourBucket:
    if timestamp.second or timestamp.microsecond or timestamp.minute % SLOT_MINUTES:
        msg = f"timestamp {timestamp.isoformat()} is not on a 5-minute boundary"
        if strict:
            raise GranularityError(msg)
        log.warning(msg)
    return HourBucket(timestamp.date(), timestamp.hour)


def euclid(a, b) -> float:
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    for v in (ax, ay, bx, by):
        if not math.isfinite(v):
            raise InvalidCoordinateError(f"non-finite coordinate: {v!r}")
    dx = ax - bx
    dy = ay - by
    return math.sqrt(dx * dx + dy * dy)


def planar_distance(dx, dy):
    return np.sqrt(dx * dx + dy * dy)


def midpoint(a: PlanarPoint, b: PlanarPoint) -> PlanarPoint:
    return PlanarPoint((a[0] + b[0]) / 2, (a[1] + b[1]) / 2)


def knn_exact(points: np.ndarray, queries: np.ndarray, k: int, pad: int = 8):
    """k nearest ``points`` for every query, ordered by (distance, index).

    Returns ``(indices, distances)`` of shape ``(len(queries), k)``. The
    result is identical to fully sorting every point by
    ``(sqrt(dx*dx + dy*dy), index)``: the tree only proposes candidates,
    distances are recomputed exactly and rows whose candidate set may
    miss a tie at the k-th distance are re-queried by radius.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    queries = np.asarray(queries, dtype=float).reshape(-1, 2)
    n, m = len(points), len(queries)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    if m == 0:
        return np.empty((0, k), dtype=np.int64), np.empty((0, k))
    tree = cKDTree(points)
    kk = min(n, k + pad)
    tree_d, cand = tree.query(queries, k=kk)
    cand = np.asarray(cand, dtype=np.int64).reshape(m, kk)
    tree_d = np.asarray(tree_d).reshape(m, kk)
    d = planar_distance(points[cand, 0] - queries[:, 0:1], points[cand, 1] - queries[:, 1:2])
    rows = np.repeat(np.arange(m), kk)
    order = np.lexsort((cand.ravel(), d.ravel(), rows)).reshape(m, kk) - kk * np.arange(m)[:, None]
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    idx, dist = cand[:, :k].copy(), d[:, :k].copy()
    if kk < n:
        dk = dist[:, -1]
        margin = dk * 1e-9 + 1e-6
        unsafe = np.flatnonzero(tree_d[:, -1] <= dk + margin)
        for r in unsafe:
            q = queries[r]
            ball = np.asarray(tree.query_ball_point(q, dk[r] + 2 * margin[r] + 1e-6), dtype=np.int64)
            bd = planar_distance(points[ball, 0] - q[0], points[ball, 1] - q[1])
            o = np.lexsort((ball, bd))[:k]
            idx[r], dist[r] = ball[o], bd[o]
    return idx, dist
