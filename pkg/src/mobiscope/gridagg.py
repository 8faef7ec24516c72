"""Hourly km-grid presence counts and per home-cell mean max distance.

Phones are partitioned into shards by a stable hash of their identifier;
each shard is tracked and aggregated independently and the partial tables
are merged. Counts are integers and distance sums are kept as fixed-point
integers, so merging is exactly associative and commutative and the
result does not depend on the shard count.
"""
from __future__ import annotations

import datetime as dt
import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from .dataio import EventTable, TowerRegistry, day_to_date
from .errors import ContractError, DoubleCountError
from .geo import KM, HALF_KM, KmCell, km_index
from .mobility import PhoneTracks, track

log = logging.getLogger(__name__)

# fixed-point quantum for distance sums: 2**-20 m
DIST_SCALE = 1 << 20


def quantize(dist: float) -> int:
    return int(round(dist * DIST_SCALE))


class CellDistance(NamedTuple):
    total_q: int
    n: int

    @property
    def mean(self) -> float:
        return self.total_q / (self.n * DIST_SCALE)

    @classmethod
    def from_mean(cls, mean, n):
        return cls(quantize(mean * n), n)


@dataclass
class GridFrame:
    date: dt.date
    hour: int
    cells: dict = field(default_factory=dict)
    phones: frozenset | None = None


@dataclass
class HomeDistanceFrame:
    date: dt.date
    cells: dict = field(default_factory=dict)
    phones: frozenset | None = None


def aggregate_presence(estimates, date: dt.date) -> list[GridFrame]:
    """One :class:`GridFrame` per hour of ``date`` from per-phone estimates.

    ``estimates`` maps phone_id to a list of
    :class:`~mobiscope.mobility.PositionEstimate`. A phone counts once in
    every cell it was observed in during the hour.
    """
    seen = [dict() for _ in range(24)]
    phones = [set() for _ in range(24)]
    for phone, ests in estimates.items():
        for est in ests:
            cell = KmCell.of(est.point.x, est.point.y)
            for t in est.times or (est.timestamp,):
                if t.date() != date:
                    continue
                seen[t.hour].setdefault(cell, set()).add(phone)
                phones[t.hour].add(phone)
    return [GridFrame(date, h, {c: len(s) for c, s in sorted(seen[h].items())}, frozenset(phones[h]))
            for h in range(24)]


def aggregate_home_distance(records, date: dt.date) -> HomeDistanceFrame:
    acc = {}
    phones = set()
    for r in records:
        if r.max_dist < 0:
            raise ContractError(f"negative max distance for {r.phone_id!r}")
        tot, n = acc.get(r.origin_cell, (0, 0))
        acc[r.origin_cell] = (tot + quantize(r.max_dist), n + 1)
        phones.add(r.phone_id)
    return HomeDistanceFrame(date, {c: CellDistance(*v) for c, v in sorted(acc.items())},
                             frozenset(phones))


def _check_disjoint(frames):
    seen = set()
    for f in frames:
        if f.phones is None:
            continue
        dup = seen & f.phones
        if dup:
            raise DoubleCountError(f"phone {sorted(dup)[0]!r} appears in more than one shard")
        seen |= f.phones
    return frozenset(seen) if all(f.phones is not None for f in frames) else None


def merge(frames):
    """Merge shard frames (all :class:`GridFrame` or all :class:`HomeDistanceFrame`)."""
    frames = list(frames)
    if not frames:
        raise ContractError("nothing to merge")
    first = frames[0]
    if isinstance(first, GridFrame):
        if any(not isinstance(f, GridFrame) or (f.date, f.hour) != (first.date, first.hour)
               for f in frames):
            raise ContractError("grid frames must share date and hour")
        phones = _check_disjoint(frames)
        cells = {}
        for f in frames:
            for c, n in f.cells.items():
                cells[c] = cells.get(c, 0) + n
        return GridFrame(first.date, first.hour, dict(sorted(cells.items())), phones)
    if any(not isinstance(f, HomeDistanceFrame) or f.date != first.date for f in frames):
        raise ContractError("home distance frames must share the date")
    phones = _check_disjoint(frames)
    cells = {}
    for f in frames:
        for c, cd in f.cells.items():
            tot, n = cells.get(c, (0, 0))
            cells[c] = (tot + cd.total_q, n + cd.n)
    return HomeDistanceFrame(first.date, {c: CellDistance(*v) for c, v in sorted(cells.items())},
                             phones)


# ------------------------------------------------------------------- batch

PRESENCE_KEYS = ["day", "hour", "ix", "iy"]
HOME_KEYS = ["day", "ix", "iy"]


def presence_table(tracks: PhoneTracks) -> pd.DataFrame:
    """Unique-phone counts per (day, hour, km cell) from per-event positions."""
    hour_abs = tracks.ev_minute // 60
    ix = km_index(tracks.ev_x)
    iy = km_index(tracks.ev_y)
    ph = tracks.ev_phone
    n = len(ph)
    if n == 0:
        return pd.DataFrame({k: pd.Series(dtype=np.int64) for k in PRESENCE_KEYS + ["n_phones"]})
    # rows are sorted by phone then time: collapse consecutive repeats first
    rep = np.zeros(n, dtype=bool)
    rep[1:] = (ph[1:] == ph[:-1]) & (hour_abs[1:] == hour_abs[:-1]) & (ix[1:] == ix[:-1]) & (iy[1:] == iy[:-1])
    keep = ~rep
    df = pd.DataFrame({"phone": ph[keep], "h": hour_abs[keep], "ix": ix[keep], "iy": iy[keep]})
    df = df.drop_duplicates()
    out = df.groupby(["h", "ix", "iy"], sort=True).size().rename("n_phones").reset_index()
    out.insert(0, "day", out["h"] // 24)
    out.insert(1, "hour", out["h"] % 24)
    return out.drop(columns="h")[PRESENCE_KEYS + ["n_phones"]].astype(np.int64)


def home_distance_table(tracks: PhoneTracks) -> pd.DataFrame:
    m = tracks.has_home
    df = pd.DataFrame({
        "day": tracks.day[m],
        "ix": km_index(tracks.owx[m]),
        "iy": km_index(tracks.owy[m]),
        "n": np.ones(int(m.sum()), dtype=np.int64),
        "total_q": np.rint(tracks.max_dist[m] * DIST_SCALE).astype(np.int64),
    })
    return df.groupby(HOME_KEYS, sort=True)[["n", "total_q"]].sum().reset_index()


def merge_tables(tables, keys) -> pd.DataFrame:
    tables = [t for t in tables if len(t)]
    if not tables:
        return pd.DataFrame()
    cat = pd.concat(tables, ignore_index=True)
    return cat.groupby(keys, sort=True).sum().reset_index()


def shard_of(labels, n_shards: int) -> np.ndarray:
    return np.array([zlib.crc32(str(s).encode("utf-8")) % n_shards for s in labels], dtype=np.int64)


def default_threads() -> int:
    env = os.environ.get("MOBISCOPE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class AggregateResult:
    presence: pd.DataFrame
    home_distance: pd.DataFrame
    homes: pd.DataFrame
    n_events: int
    n_duplicates: int


def aggregate_sharded(events: EventTable, towers: TowerRegistry, n_shards=1, threads=None,
                      night=(180, 415)) -> AggregateResult:
    """Track and aggregate ``events`` over ``n_shards`` disjoint phone partitions."""
    if n_shards < 1:
        raise ContractError("n_shards must be >= 1")
    threads = min(threads or default_threads(), n_shards)
    if n_shards == 1:
        parts = [np.arange(len(events))]
    else:
        shard = shard_of(events.phone_labels, n_shards)[events.phone]
        order = np.argsort(shard, kind="stable")
        bounds = np.searchsorted(shard[order], np.arange(n_shards + 1))
        parts = [order[bounds[s]:bounds[s + 1]] for s in range(n_shards)]

    def work(idx):
        tr = track(events.take(idx), towers, night)
        return presence_table(tr), home_distance_table(tr), tr.homes_frame(), tr.n_duplicates

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, parts))
    else:
        results = [work(idx) for idx in parts]
    homes =pd.concat([r[2] for r in results], ignore_index=True)
    if homes["phone_id"].duplicated().any():
        raise DoubleCountError("phone present in more than one shard")
    homes = homes.sort_values(["date", "phone_id"], kind="mergesort").reset_index(drop=True)
    return AggregateResult(
        presence=merge_tables([r[0] for r in results], PRESENCE_KEYS),
        home_distance=merge_tables([r[1] for r in results], HOME_KEYS),
        homes=homes,
        n_events=len(events),
        n_duplicates=sum(r[3] for r in results),
    )


def presence_output(presence: pd.DataFrame) -> pd.DataFrame:
    """``grid_hourly.csv`` rows: date,hour,cx,cy,n_phones."""
    if presence.empty:
        return pd.DataFrame(columns=["date", "hour", "cx", "cy", "n_phones"])
    dates = {d: day_to_date(d).isoformat() for d in presence["day"].unique()}
    return pd.DataFrame({
        "date": presence["day"].map(dates),
        "hour": presence["hour"].astype(np.int64),
        "cx": presence["ix"].astype(np.int64) * int(KM) + int(HALF_KM),
        "cy": presence["iy"].astype(np.int64) * int(KM) + int(HALF_KM),
        "n_phones": presence["n_phones"].astype(np.int64),
    })


def home_distance_output(table: pd.DataFrame) -> pd.DataFrame:
    """``home_distance.csv`` rows: date,ox,oy,mean_max_dist_m,n_phones."""
    if table.empty:
        return pd.DataFrame(columns=["date", "ox", "oy", "mean_max_dist_m", "n_phones"])
    dates = {d: day_to_date(d).isoformat() for d in table["day"].unique()}
    means = [CellDistance(int(t), int(n)).mean for t, n in zip(table["total_q"], table["n"])]
    return pd.DataFrame({
        "date": table["day"].map(dates),
        "ox": table["ix"].astype(np.int64) * int(KM) + int(HALF_KM),
        "oy": table["iy"].astype(np.int64) * int(KM) + int(HALF_KM),
        "mean_max_dist_m": means,
        "n_phones": table["n"].astype(np.int64),
    })


def frames_from_output(grid: pd.DataFrame, date: str, hour: int) -> GridFrame:
    """Rebuild one :class:`GridFrame` from ``grid_hourly.csv`` rows."""
    sub = grid[(grid["date"] == date) & (grid["hour"] == hour)]
    cells = {KmCell(float(cx), float(cy)): int(n) for cx, cy, n in
             zip(sub["cx"], sub["cy"], sub["n_phones"])}
    return GridFrame(dt.date.fromisoformat(date), hour, dict(sorted(cells.items())))
