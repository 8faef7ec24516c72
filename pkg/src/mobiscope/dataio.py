"""Readers and writers for the four input registries and all output tables.

Input files are UTF-8 CSV with a mandatory header row:

* ``events.csv``      ``phone_id,timestamp,tower_id`` (timestamp ``YYYY-MM-DDTHH:MM``)
* ``towers.csv``      ``tower_id,x_m,y_m``
* ``population.csv``  ``x_m,y_m,age,minority,tertiary_edu,disposable_income``
* ``jobs.csv``        ``x_m,y_m``

Events come in two flavours: :func:`read_events` streams validated
:class:`CellEvent` objects, :func:`load_events` parses a whole file into a
columnar :class:`EventTable` for the batch pipeline. Both enforce the same
rules.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from .errors import (DataError, InvalidCoordinateError,
                     PrivacyViolationError, RowError)
from .geo import SLOT_MINUTES, PlanarPoint

log = logging.getLogger(__name__)

EVENT_COLUMNS = ("phone_id", "timestamp", "tower_id")
TOWER_COLUMNS = ("tower_id", "x_m", "y_m")
POPULATION_COLUMNS = ("x_m", "y_m", "age", "minority", "tertiary_edu", "disposable_income")
JOB_COLUMNS = ("x_m", "y_m")

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"
MAX_SPAN_MINUTES = 24 * 60
ADULT_AGE = 18
LATTICE_M = 100.0

EPOCH = dt.datetime(1970, 1, 1)


@dataclass(frozen=True)
class CellEvent:
    phone_id: str
    timestamp: dt.datetime
    tower_id: str


@dataclass(frozen=True)
class TowerSite:
    tower_id: str
    location: PlanarPoint


@dataclass(frozen=True)
class PersonRecord:
    location: PlanarPoint
    age: int
    minority: bool
    tertiary_edu: bool
    disposable_income: float

    @property
    def adult(self) -> bool:
        return self.age >= ADULT_AGE


@dataclass(frozen=True)
class JobSite:
    location: PlanarPoint


def minute_to_datetime(minute: int) -> dt.datetime:
    return EPOCH + dt.timedelta(minutes=int(minute))


def datetime_to_minute(ts: dt.datetime) -> int:
    return int((ts - EPOCH) // dt.timedelta(minutes=1))


def day_to_date(day: int) -> dt.date:
    return (EPOCH + dt.timedelta(days=int(day))).date()


def date_to_day(date: dt.date) -> int:
    return (date - EPOCH.date()).days


def _parse_coord(text, path, line, name):
    try:
        v = float(text)
    except ValueError:
        raise RowError(path, line, f"{name} is not a number: {text!r}") from None
    if not math.isfinite(v) or v < 0:
        raise RowError(path, line, f"{name} must be finite and non-negative, got {text!r}")
    return v


def _check_header(path, header, expected):
    if tuple(h.strip() for h in header) != expected:
        raise RowError(path, 1, f"header {list(header)} does not match {list(expected)}")


def _open_csv(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    return path, open(path, newline="", encoding="utf-8")


# ----------------------------------------------------------------- towers

class TowerRegistry:
    """Tower coordinates indexed by position in sorted ``tower_id`` order."""

    def __init__(self, sites):
        sites = sorted(sites, key=lambda s: s.tower_id)
        ids = [s.tower_id for s in sites]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate tower_id in registry")
        self.ids = np.array(ids, dtype=object)
        self.x = np.array([s.location.x for s in sites], dtype=float)
        self.y = np.array([s.location.y for s in sites], dtype=float)
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise InvalidCoordinateError("non-finite tower coordinate")
        if np.any(self.x < 0) or np.any(self.y < 0):
            raise InvalidCoordinateError("negative tower coordinate")
        self.index = {t: i for i, t in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, tower_id):
        return tower_id in self.index

    def __getitem__(self, tower_id) -> PlanarPoint:
        i = self.index[tower_id]
        return PlanarPoint(float(self.x[i]), float(self.y[i]))

    def sites(self):
        return [TowerSite(t, PlanarPoint(float(x), float(y)))
                for t, x, y in zip(self.ids, self.x, self.y)]

    @classmethod
    def from_mapping(cls, mapping):
        return cls(TowerSite(t, PlanarPoint(float(p[0]), float(p[1]))) for t, p in mapping.items())


def read_towers(path) -> TowerRegistry:
    path, fh = _open_csv(path)
    sites = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise RowError(path, 1, "missing header")
        _check_header(path, header, TOWER_COLUMNS)
        seen = set()
        for line, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise RowError(path, line, f"expected 3 fields, got {len(row)}")
            tid = row[0].strip()
            if not tid:
                raise RowError(path, line, "empty tower_id")
            if tid in seen:
                raise RowError(path, line, f"duplicate tower_id {tid!r}")
            seen.add(tid)
            sites.append(TowerSite(tid, PlanarPoint(_parse_coord(row[1], path, line, "x_m"),
                                                    _parse_coord(row[2], path, line, "y_m"))))
    return TowerRegistry(sites)


def write_towers(path, towers: TowerRegistry):
    write_table(path, [(t, x, y) for t, x, y in zip(towers.ids, towers.x, towers.y)],
                columns=TOWER_COLUMNS)


# ----------------------------------------------------------------- events

@dataclass
class IngestReport:
    path: str = ""
    n_rows: int = 0
    n_events: int = 0
    n_dropped_unknown_tower: int = 0
    n_phones: int = 0
    n_granularity_warnings: int = 0

    def lines(self):
        return [f"{k}={v}" for k, v in self.__dict__.items()]


def _parse_timestamp(text, path, line):
    if len(text) != 16:
        raise RowError(path, line, f"timestamp {text!r} is not YYYY-MM-DDTHH:MM")
    try:
        return dt.datetime.strptime(text, TIMESTAMP_FORMAT)
    except ValueError:
        raise RowError(path, line, f"timestamp {text!r} is not YYYY-MM-DDTHH:MM") from None


class read_events:
    """Stream validated :class:`CellEvent` objects from ``events.csv``.

    Events naming a tower missing from the registry are dropped and
    counted in :attr:`report`. A phone whose events span more than 24 hours
    raises :class:`PrivacyViolationError` at the offending row.
    """

    def __init__(self, path, towers: TowerRegistry, strict_granularity=True):
        self.path = Path(path)
        self.towers = towers
        self.strict_granularity = strict_granularity
        self.report = IngestReport(path=str(path))

    def __iter__(self):
        path, fh = _open_csv(self.path)
        span = {}
        phones = set()
        with fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise RowError(path, 1, "missing header")
            _check_header(path, header, EVENT_COLUMNS)
            for line, row in enumerate(reader, start=2):
                if len(row) != 3:
                    raise RowError(path, line, f"expected 3 fields, got {len(row)}")
                phone, ts_text, tower = (c.strip() for c in row)
                if not phone or not tower:
                    raise RowError(path, line, "empty phone_id or tower_id")
                ts = _parse_timestamp(ts_text, path, line)
                self.report.n_rows += 1
                if ts.minute % SLOT_MINUTES:
                    if self.strict_granularity:
                        raise RowError(path, line, f"timestamp {ts_text} not on a 5-minute boundary")
                    self.report.n_granularity_warnings += 1
                    log.warning("%s:%d: timestamp %s not on a 5-minute boundary", path, line, ts_text)
                lo, hi = span.get(phone, (ts, ts))
                lo, hi = min(lo, ts), max(hi, ts)
                if hi - lo > dt.timedelta(minutes=MAX_SPAN_MINUTES):
                    raise PrivacyViolationError(
                        f"{path}:{line}: phone {phone!r} traced for {hi - lo}, beyond the 24 hour cap")
                span[phone] = (lo, hi)
                if tower not in self.towers:
                    self.report.n_dropped_unknown_tower += 1
                    continue
                if phone not in phones:
                    phones.add(phone)
                    self.report.n_phones += 1
                self.report.n_events += 1
                yield CellEvent(phone, ts, tower)


@dataclass
class EventTable:
    """Columnar events: ``phone`` codes into ``phone_labels``, epoch minutes,
    and tower indices into a :class:`TowerRegistry`."""
    phone: np.ndarray
    minute: np.ndarray
    tower: np.ndarray
    phone_labels: np.ndarray

    def __len__(self):
        return len(self.phone)

    @property
    def n_phones(self):
        return len(np.unique(self.phone))

    def take(self, idx) -> "EventTable":
        return EventTable(self.phone[idx], self.minute[idx], self.tower[idx], self.phone_labels)

    @classmethod
    def from_events(cls, events, towers: TowerRegistry) -> "EventTable":
        events = list(events)
        labels, codes = np.unique(np.array([e.phone_id for e in events], dtype=object),
                                  return_inverse=True) if events else (np.array([], dtype=object), np.array([], dtype=np.int64))
        return cls(
            phone=np.asarray(codes, dtype=np.int64),
            minute=np.array([datetime_to_minute(e.timestamp) for e in events], dtype=np.int64),
            tower=np.array([towers.index[e.tower_id] for e in events], dtype=np.int64),
            phone_labels=labels,
        )


def check_tracking_cap(phone, minute, labels, path="events"):
    if len(phone) == 0:
        return
    n = int(phone.max()) + 1
    lo = np.full(n, np.iinfo(np.int64).max)
    hi = np.full(n, np.iinfo(np.int64).min)
    np.minimum.at(lo, phone, minute)
    np.maximum.at(hi, phone, minute)
    bad = np.flatnonzero(hi - lo > MAX_SPAN_MINUTES)
    if len(bad):
        p = bad[0]
        raise PrivacyViolationError(
            f"{path}: phone {labels[p]!r} traced for {int(hi[p] - lo[p])} minutes, "
            f"beyond the 24 hour cap ({len(bad)} phone(s) affected)")


def load_events(path, towers: TowerRegistry, strict_granularity=True):
    """Parse ``events.csv`` into an :class:`EventTable` plus an :class:`IngestReport`."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split(",")
    _check_header(path, header, EVENT_COLUMNS)
    bad_rows = []

    def on_invalid(row):
        bad_rows.append(row)
        return "skip"

    try:
        table = pacsv.read_csv(
            path,
            read_options=pacsv.ReadOptions(use_threads=False, block_size=1 << 26),
            parse_options=pacsv.ParseOptions(invalid_row_handler=on_invalid),
            convert_options=pacsv.ConvertOptions(
                column_types={c: pa.string() for c in EVENT_COLUMNS},
                strings_can_be_null=False, quoted_strings_can_be_null=False),
        )
    except pa.ArrowInvalid as exc:
        raise DataError(f"{path}: {exc}") from None
    if bad_rows:
        r = bad_rows[0]
        raise RowError(path, r.number, f"expected {r.expected_columns} fields, got {r.actual_columns}")

    def line_of(mask):
        return int(np.flatnonzero(mask)[0]) + 2

    phone_col = pc.utf8_trim_whitespace(table["phone_id"])
    tower_col = pc.utf8_trim_whitespace(table["tower_id"])
    ts_col = table["timestamp"]
    n = table.num_rows
    report = IngestReport(path=str(path), n_rows=n)
    if n:
        for col, name in ((phone_col, "phone_id"), (tower_col, "tower_id")):
            empty = pc.equal(pc.utf8_length(col), 0).to_numpy(zero_copy_only=False)
            if empty.any():
                raise RowError(path, line_of(empty), f"empty {name}")
        wrong_len = pc.not_equal(pc.utf8_length(ts_col), 16).to_numpy(zero_copy_only=False)
        parsed = pc.strptime(ts_col, format=TIMESTAMP_FORMAT, unit="s", error_is_null=True)
        invalid = parsed.is_null().to_numpy(zero_copy_only=False) | wrong_len
        if invalid.any():
            ln = line_of(invalid)
            raise RowError(path, ln, f"timestamp {ts_col[ln - 2].as_py()!r} is not YYYY-MM-DDTHH:MM")
        minute = parsed.cast(pa.int64()).to_numpy() // 60
    else:
        minute = np.empty(0, dtype=np.int64)
    off_grid = minute % SLOT_MINUTES != 0
    if off_grid.any():
        if strict_granularity:
            raise RowError(path, line_of(off_grid), "timestamp not on a 5-minute boundary")
        report.n_granularity_warnings = int(off_grid.sum())
        log.warning("%s: %d timestamps not on a 5-minute boundary", path, report.n_granularity_warnings)

    enc = pc.dictionary_encode(phone_col).combine_chunks() if n else None
    if n:
        phone = enc.indices.to_numpy().astype(np.int64)
        labels = np.array(enc.dictionary.to_pylist(), dtype=object)
    else:
        phone, labels = np.empty(0, dtype=np.int64), np.array([], dtype=object)
    check_tracking_cap(phone, minute, labels, path)

    if n:
        tower_idx = pc.index_in(tower_col, value_set=pa.array(list(towers.ids), type=pa.string()))
        known = tower_idx.is_valid().to_numpy(zero_copy_only=False)
        tower = pc.fill_null(tower_idx, -1).to_numpy().astype(np.int64)
    else:
        known = np.empty(0, dtype=bool)
        tower = np.empty(0, dtype=np.int64)
    report.n_dropped_unknown_tower = int((~known).sum())
    if report.n_dropped_unknown_tower:
        log.info("%s: dropped %d events with unknown towers", path, report.n_dropped_unknown_tower)
    events = EventTable(phone[known], minute[known], tower[known], labels)
    report.n_events = len(events)
    report.n_phones = events.n_phones
    return events, report


def write_events(path, events):
    """Write :class:`CellEvent` objects (or an equivalent DataFrame) to ``events.csv``."""
    if isinstance(events, pd.DataFrame):
        rows = events[list(EVENT_COLUMNS)]
    else:
        rows = [(e.phone_id, e.timestamp.strftime(TIMESTAMP_FORMAT), e.tower_id) for e in events]
    write_table(path, rows, columns=EVENT_COLUMNS)


# -------------------------------------------------------------- population

def _parse_bool(text, path, line, name):
    t = text.strip()
    if t not in ("0", "1"):
        raise RowError(path, line, f"{name} must be 0 or 1, got {text!r}")
    return t == "1"


def read_population(path) -> list[PersonRecord]:
    path, fh = _open_csv(path)
    out = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise RowError(path, 1, "missing header")
        _check_header(path, header, POPULATION_COLUMNS)
        for line, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise RowError(path, line, f"expected 6 fields, got {len(row)}")
            x = _parse_coord(row[0], path, line, "x_m")
            y = _parse_coord(row[1], path, line, "y_m")
            if x % LATTICE_M or y % LATTICE_M:
                raise RowError(path, line, f"location ({x}, {y}) is not on the 100 m lattice")
            try:
                age = int(row[2])
            except ValueError:
                raise RowError(path, line, f"age is not an integer: {row[2]!r}") from None
            if age < 0:
                raise RowError(path, line, f"age must be >= 0, got {age}")
            try:
                income = float(row[5])
            except ValueError:
                raise RowError(path, line, f"disposable_income is not a number: {row[5]!r}") from None
            if not math.isfinite(income) or income < 0:
                raise RowError(path, line, f"disposable_income must be >= 0, got {row[5]!r}")
            out.append(PersonRecord(PlanarPoint(x, y), age,
                                    _parse_bool(row[3], path, line, "minority"),
                                    _parse_bool(row[4], path, line, "tertiary_edu"),
                                    income))
    return out


def write_population(path, persons):
    write_table(path, [(p.location.x, p.location.y, p.age, p.minority, p.tertiary_edu,
                        p.disposable_income) for p in persons], columns=POPULATION_COLUMNS)


def read_jobs(path) -> list[JobSite]:
    path, fh = _open_csv(path)
    out = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise RowError(path, 1, "missing header")
        _check_header(path, header, JOB_COLUMNS)
        for line, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise RowError(path, line, f"expected 2 fields, got {len(row)}")
            out.append(JobSite(PlanarPoint(_parse_coord(row[0], path, line, "x_m"),
                                           _parse_coord(row[1], path, line, "y_m"))))
    return out


def write_jobs(path, jobs):
    write_table(path, [(j.location.x, j.location.y) for j in jobs], columns=JOB_COLUMNS)


# ------------------------------------------------------------------ tables

def _fmt(value, decimals):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return ""
        if decimals is not None:
            s = f"{v:.{decimals}f}"
            return "0" + s[2:] if s.startswith("-0") and float(s) == 0 else s
        if v.is_integer() and abs(v) < 1e16:
            return f"{v:.1f}"
        return repr(v)
    if isinstance(value, (dt.date, dt.datetime)):
        return value.isoformat()
    return str(value)


def write_table(path, rows, columns=None, decimals=None, sort_by=None):
    """Write rows as CSV with a header, byte-deterministically.

    ``rows`` is a DataFrame or a sequence of tuples/dicts. Floats are written
    with ``repr`` (exact round trip) unless ``decimals`` fixes a column's
    precision. The file is written to a temporary sibling and renamed, so a
    reader never sees a partial table.
    """
    decimals = decimals or {}
    if isinstance(rows, pd.DataFrame):
        columns = list(columns or rows.columns)
        frame = rows[columns]
        if sort_by:
            frame = frame.sort_values(list(sort_by), kind="mergesort")
        records = frame.itertuples(index=False, name=None)
    else:
        rows = list(rows)
        if columns is None:
            if not rows or not isinstance(rows[0], dict):
                raise ValueError("columns required for non-dict rows")
            columns = list(rows[0])
        columns = list(columns)
        if rows and isinstance(rows[0], dict):
            rows = [tuple(r[c] for c in columns) for r in rows]
        if sort_by:
            keys = [columns.index(c) for c in sort_by]
            rows = sorted(rows, key=lambda r: tuple(r[k] for k in keys))
        records = rows
    digits = [decimals.get(c) for c in columns]
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for rec in records:
                if len(rec) != len(columns):
                    raise ValueError(f"row {rec!r} does not match columns {columns}")
                writer.writerow([_fmt(v, d) for v, d in zip(rec, digits)])
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


STRING_COLUMNS = ("phone_id", "tower_id", "date", "class", "metric", "bin", "group", "role")


def read_table(path, str_columns=STRING_COLUMNS) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
    dtypes = {c: str for c in header if c in str_columns}
    return pd.read_csv(path, dtype=dtypes, float_precision="round_trip", keep_default_na=False,
                       na_values=[""])
