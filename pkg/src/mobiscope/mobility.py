"""Position reconstruction, night-rest home inference and max distance from home.

A phone starts at its first serving tower. Whenever service switches to a
new tower, the position estimate moves half-way from the previous estimate
towards the new tower; further events on the same tower only extend the
current estimate's duration (5 minutes per event).

Two entry points are provided: per-phone functions working on
:class:`PhoneDay` objects, and :func:`track`, which does the same for a
whole :class:`~mobiscope.dataio.EventTable` with numpy.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .dataio import MAX_SPAN_MINUTES, EventTable, TowerRegistry, day_to_date
from .errors import ContractError, EmptyInputError, PrivacyViolationError
from .geo import (SLOT_MINUTES, KmCell, PlanarPoint, euclid, midpoint, planar_distance,
                  truncate_to_km)

NIGHT_START = dt.time(3, 0)
NIGHT_END = dt.time(6, 55)


@dataclass(frozen=True)
class PhoneDay:
    phone_id: str
    events: tuple

    def __post_init__(self):
        if not self.events:
            raise EmptyInputError(f"phone {self.phone_id!r} has no events")
        ts = [e.timestamp for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ContractError("events must be sorted by timestamp")
        if ts[-1] - ts[0] > dt.timedelta(minutes=MAX_SPAN_MINUTES):
            raise PrivacyViolationError(f"phone {self.phone_id!r} spans more than 24 hours")

    @classmethod
    def from_events(cls, phone_id, events) -> "PhoneDay":
        """Sort events and drop same-timestamp duplicates.

        Of several events sharing a timestamp the one with the smallest
        ``tower_id`` is kept, so input order never matters.
        """
        best = {}
        for e in events:
            if e.phone_id != phone_id:
                raise ContractError(f"event for {e.phone_id!r} in day of {phone_id!r}")
            cur = best.get(e.timestamp)
            if cur is None or e.tower_id < cur.tower_id:
                best[e.timestamp] = e
        return cls(phone_id, tuple(best[t] for t in sorted(best)))


@dataclass(frozen=True)
class PositionEstimate:
    timestamp: dt.datetime
    point: PlanarPoint
    duration: int
    times: tuple = ()


@dataclass(frozen=True)
class HomeLocation:
    phone_id: str
    origin: PlanarPoint
    origin_cell: KmCell


@dataclass(frozen=True)
class MaxDistanceRecord:
    phone_id: str
    origin_cell: KmCell
    max_dist: float


def halfway_positions(day: PhoneDay, towers) -> list[PositionEstimate]:
    out = []
    pos = None
    current = None
    times = []
    for ev in day.events:
        if ev.tower_id != current:
            if current is not None:
                out.append(PositionEstimate(times[0], pos, SLOT_MINUTES * len(times), tuple(times)))
            tower = PlanarPoint(*towers[ev.tower_id])
            pos = tower if pos is None else midpoint(pos, tower)
            current = ev.tower_id
            times = []
        times.append(ev.timestamp)
    out.append(PositionEstimate(times[0], pos, SLOT_MINUTES * len(times), tuple(times)))
    return out


def _in_window(t: dt.datetime, start: dt.time, end: dt.time) -> bool:
    return start <= t.time() <= end


def infer_home(day: PhoneDay, towers, night=(NIGHT_START, NIGHT_END)):
    """Duration-weighted night position, or ``None`` without night service.

    Only the in-window minutes of each estimate count, so an estimate that
    starts at 06:50 and lasts until 07:10 weighs 10 minutes.
    """
    start, end = night
    sx = sy = 0.0
    total = 0
    for est in halfway_positions(day, towers):
        minutes = SLOT_MINUTES * sum(_in_window(t, start, end) for t in est.times)
        if minutes:
            sx += est.point.x * minutes
            sy += est.point.y * minutes
            total += minutes
    if not total:
        return None
    origin = PlanarPoint(sx / total, sy / total)
    return HomeLocation(day.phone_id, origin, KmCell.of(origin.x, origin.y))


def max_distance_from_home(day: PhoneDay, home, towers) -> MaxDistanceRecord:
    if home is None:
        raise ContractError(f"phone {day.phone_id!r} has no home location")
    dist = max(euclid(e.point, home.origin) for e in halfway_positions(day, towers))
    return MaxDistanceRecord(day.phone_id, home.origin_cell, dist)


def group_phone_days(events) -> dict[str, PhoneDay]:
    by_phone = {}
    for e in events:
        by_phone.setdefault(e.phone_id, []).append(e)
    return {p: PhoneDay.from_events(p, evs) for p, evs in by_phone.items()}


# ------------------------------------------------------------------- batch

@dataclass
class PhoneTracks:
    """Per-event positions and per-phone home/distance results for a batch.

    Event arrays are sorted by (phone, minute) with duplicates removed.
    Phone arrays are aligned with ``code``; ``owx``, ``owy`` and
    ``max_dist`` are NaN for phones without night service.
    """
    ev_phone: np.ndarray
    ev_minute: np.ndarray
    ev_x: np.ndarray
    ev_y: np.ndarray
    code: np.ndarray
    label: np.ndarray
    day: np.ndarray
    has_home: np.ndarray
    owx: np.ndarray
    owy: np.ndarray
    max_dist: np.ndarray
    n_duplicates: int = 0

    def homes_frame(self) -> pd.DataFrame:
        m = self.has_home
        owx, owy = self.owx[m], self.owy[m]
        frame = pd.DataFrame({
            "phone_id": self.label[m].astype(str),
            "date": [day_to_date(d).isoformat() for d in self.day[m]],
            "owx": owx,
            "owy": owy,
            "ox": truncate_to_km(owx),
            "oy": truncate_to_km(owy),
            "max_dist_m": self.max_dist[m],
        })
        return frame.sort_values(["date", "phone_id"], kind="mergesort").reset_index(drop=True)


def _sort_order(phone, minute, tower):
    if len(phone) == 0:
        return np.empty(0, dtype=np.int64)
    mrel = minute - minute.min()
    pb = int(phone.max()).bit_length()
    mb = int(mrel.max()).bit_length()
    tb = max(int(tower.max()).bit_length(), 1)
    if pb + mb + tb <= 62:
        key = (phone << (mb + tb)) | (mrel << tb) | tower
        return np.argsort(key, kind="stable")
    return np.lexsort((tower, minute, phone))


def track(events: EventTable, towers: TowerRegistry, night=(180, 415)) -> PhoneTracks:
    """Vectorised half-way tracking, home inference and max distance.

    ``night`` gives the inclusive minute-of-day bounds of the night window
    (03:00 = 180, 06:55 = 415).
    """
    order = _sort_order(events.phone, events.minute, events.tower)
    p = events.phone[order]
    m = events.minute[order]
    t = events.tower[order]
    n_raw = len(p)
    if n_raw:
        keep = np.ones(n_raw, dtype=bool)
        keep[1:] = (p[1:] != p[:-1]) | (m[1:] != m[:-1])
        p, m, t = p[keep], m[keep], t[keep]
    n = len(p)
    new_phone = np.ones(n, dtype=bool)
    new_phone[1:] = p[1:] != p[:-1]
    new_run = new_phone.copy()
    new_run[1:] |= t[1:] != t[:-1]
    run_start = np.flatnonzero(new_run)
    run_id = np.cumsum(new_run) - 1
    run_tower = t[run_start]
    run_first = new_phone[run_start]
    R = len(run_start)
    first_idx = np.maximum.accumulate(np.where(run_first, np.arange(R), 0)) if R else np.empty(0, dtype=np.int64)
    rank = np.arange(R) - first_idx
    rx = towers.x[run_tower].copy()
    ry = towers.y[run_tower].copy()
    if R and rank.max() > 0:
        by_rank = np.argsort(rank, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(np.bincount(rank))])
        for r in range(1, len(bounds) - 1):
            idx = by_rank[bounds[r]:bounds[r + 1]]
            rx[idx] = (rx[idx - 1] + towers.x[run_tower[idx]]) / 2
            ry[idx] = (ry[idx - 1] + towers.y[run_tower[idx]]) / 2
    ex, ey = rx[run_id], ry[run_id]

    phone_start = np.flatnonzero(new_phone)
    seg = np.cumsum(new_phone) - 1
    P = len(phone_start)
    code = p[phone_start]
    day = m[phone_start] // 1440
    mod = m % 1440
    inw = (mod >= night[0]) & (mod <= night[1])
    cnt = np.bincount(seg[inw], minlength=P)
    sx = np.bincount(seg[inw], weights=ex[inw], minlength=P)
    sy = np.bincount(seg[inw], weights=ey[inw], minlength=P)
    has_home = cnt > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        owx = np.where(has_home, sx / np.maximum(cnt, 1), np.nan)
        owy = np.where(has_home, sy / np.maximum(cnt, 1), np.nan)
    run_seg = seg[run_start]
    d = planar_distance(rx - owx[run_seg], ry - owy[run_seg])
    if R:
        max_dist = np.maximum.reduceat(d, np.flatnonzero(run_first))
    else:
        max_dist = np.empty(0)
    return PhoneTracks(
        ev_phone=p, ev_minute=m, ev_x=ex, ev_y=ey,
        code=code, label=events.phone_labels[code] if P else np.array([], dtype=object),
        day=day, has_home=has_home, owx=owx, owy=owy, max_dist=max_dist,
        n_duplicates=n_raw - n,
    )
