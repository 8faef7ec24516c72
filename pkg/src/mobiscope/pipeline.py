"""File-based pipeline stages, report tables and the run orchestrator.

Stages communicate only through CSV files in the output directory:

=============  ==========================================================
stage          writes
=============  ==========================================================
aggregate      homes.csv, grid_hourly.csv, home_distance.csv
did            did_grid.csv
lisa           lisa.csv
demographics   demographics.csv
report         summary.csv, histogram.csv, lisa_summary.csv
=============  ==========================================================

``run_pipeline`` executes them in order inside a scratch directory and
moves the results into place only when every stage succeeded.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .dataio import load_events, read_jobs, read_population, read_table, read_towers, write_table
from .demographics import ATTRIBUTES, attribute_predicates, context_for_cells
from .did import HIST_EDGES, HIST_LABELS, ROLES, did_grid, distance_histogram, hotcold_pct_change, \
    subgroup_did, subgroup_mask
from .errors import ConfigError, DataError, EmptyInputError, MobiscopeError
from .geo import KmCell
from .gridagg import aggregate_sharded, frames_from_output, home_distance_output, presence_output
from .lisa import dist_to_k_jobs, lisa

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

DEFAULT_DATES = {
    "treated_pre": dt.date(2020, 1, 16),
    "treated_post": dt.date(2020, 3, 26),
    "control_pre": dt.date(2019, 1, 17),
    "control_post": dt.date(2019, 3, 28),
}

# fields that change how fast a run is, never what it produces
EXECUTION_FIELDS = ("out_dir", "shards", "threads")
PATH_FIELDS = ("events", "towers", "population", "jobs", "out_dir")


def _minute_of(text: str) -> int:
    try:
        t = dt.time.fromisoformat(text)
    except (TypeError, ValueError):
        raise ConfigError(f"bad time of day {text!r}, expected HH:MM") from None
    return t.hour * 60 + t.minute


@dataclass
class RunConfig:
    events: Path | None = None
    towers: Path | None = None
    population: Path | None = None
    jobs: Path | None = None
    out_dir: Path = Path("out")
    dates: dict = field(default_factory=lambda: dict(DEFAULT_DATES))
    hour: int = 10
    night_start: str = "03:00"
    night_end: str = "06:55"
    strict_granularity: bool = True
    lisa_max_dist: float = 3000.0
    permutations: int = 499
    alpha: float = 0.05
    row_standardize: bool = True
    seed: int = 0
    k: int = 100
    jobs_k: int = 100
    percentile: float = 90.0
    poor_stat: str = "mean"
    poor_ref_ages: tuple | None = (16, 74)
    cover_radius: float | None = None
    hotcold_method: str = "ratio"
    shards: int = 1
    threads: int | None = None

    @property
    def night(self) -> tuple:
        return _minute_of(self.night_start), _minute_of(self.night_end)

    def validate(self) -> "RunConfig":
        if sorted(self.dates) != sorted(ROLES):
            raise ConfigError(f"dates must name exactly {ROLES}")
        if len(set(self.dates.values())) != 4:
            raise ConfigError("the four dates must be distinct")
        if not 0 <= self.hour <= 23:
            raise ConfigError(f"analysis hour {self.hour} outside 0-23")
        lo, hi = self.night
        if lo > hi:
            raise ConfigError("night window must not wrap midnight")
        if self.permutations < 1:
            raise ConfigError("permutations must be >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.lisa_max_dist <= 0:
            raise ConfigError("lisa_max_dist must be positive")
        if self.k < 1 or self.jobs_k < 1:
            raise ConfigError("k and jobs_k must be >= 1")
        if not 0 < self.percentile < 100:
            raise ConfigError("percentile must lie in (0, 100)")
        if self.poor_stat not in ("mean", "median"):
            raise ConfigError("poor_stat must be 'mean' or 'median'")
        if self.hotcold_method not in ("ratio", "mean"):
            raise ConfigError("hotcold_method must be 'ratio' or 'mean'")
        if self.shards < 1 or (self.threads is not None and self.threads < 1):
            raise ConfigError("shards and threads must be >= 1")
        return self

    def date_str(self, role: str) -> str:
        return self.dates[role].isoformat()

    def canonical(self) -> dict:
        """Result-relevant settings as plain JSON values."""
        out = {}
        for f in dataclasses.fields(self):
            if f.name in EXECUTION_FIELDS or f.name in PATH_FIELDS:
                continue
            v = getattr(self, f.name)
            if f.name == "dates":
                v = {r: v[r].isoformat() for r in ROLES}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def config_from_dict(d: dict, base: Path | None = None) -> RunConfig:
    """Build a config from a TOML-shaped dict (sections are flattened)."""
    flat = {}
    for key, value in d.items():
        if isinstance(value, dict) and key != "dates":
            flat.update(value)
        else:
            flat[key] = value
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(flat) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "dates" in flat:
        dates = dict(DEFAULT_DATES)
        for role, v in flat["dates"].items():
            if role not in ROLES:
                raise ConfigError(f"unknown date role {role!r}")
            try:
                dates[role] = v if isinstance(v, dt.date) else dt.date.fromisoformat(str(v))
            except ValueError:
                raise ConfigError(f"bad date {v!r} for {role}") from None
        flat["dates"] = dates
    for name in PATH_FIELDS:
        if flat.get(name) is not None:
            p = Path(flat[name])
            flat[name] = p if p.is_absolute() or base is None else base / p
    if flat.get("poor_ref_ages") is not None:
        flat["poor_ref_ages"] = tuple(flat["poor_ref_ages"])
    try:
        return RunConfig(**flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data = {}
    base = None
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.parent
    cfg = config_from_dict(data, base)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "dates":
            cfg.dates = {**cfg.dates, **value}
        elif key in PATH_FIELDS:
            setattr(cfg, key, Path(value))
        else:
            setattr(cfg, key, value)
    return cfg.validate()


# ------------------------------------------------------------------ stages

def _need(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise DataError(f"{stage}: missing upstream file {path.name} in {path.parent}")
    return path


def _need_input(cfg: RunConfig, name: str) -> Path:
    p = getattr(cfg, name)
    if p is None:
        raise ConfigError(f"no {name} input configured")
    if not Path(p).is_file():
        raise DataError(f"{name} input not found: {p}")
    return Path(p)


def ingest(cfg: RunConfig):
    towers = read_towers(_need_input(cfg, "towers"))
    events, report = load_events(_need_input(cfg, "events"), towers, cfg.strict_granularity)
    return towers, events, report


def stage_aggregate(cfg: RunConfig, out: Path, homes_only: bool = False) -> dict:
    t0 = time.perf_counter()
    towers, events, report = ingest(cfg)
    t1 = time.perf_counter()
    res = aggregate_sharded(events, towers, cfg.shards, cfg.threads, cfg.night)
    t2 = time.perf_counter()
    elapsed = t2 - t0
    rate = res.n_events / elapsed if elapsed > 0 else math.inf
    log.info("ingested and aggregated %d events in %.2f s (%.0f events/s)", res.n_events, elapsed, rate)
    homes = res.homes.copy()
    homes["ox"] = homes["ox"].astype(np.int64)
    homes["oy"] = homes["oy"].astype(np.int64)
    write_table(out / "homes.csv", homes)
    if not homes_only:
        write_table(out / "grid_hourly.csv", presence_output(res.presence))
        write_table(out / "home_distance.csv", home_distance_output(res.home_distance))
    return {"n_rows": report.n_rows, "n_events": res.n_events, "n_duplicates": res.n_duplicates,
            "n_phones": report.n_phones, "n_homes": len(homes), "ingest_seconds": t1 - t0,
            "aggregate_seconds": t2 - t1,
            "events_per_second": rate}


def stage_did(cfg: RunConfig, out: Path):
    grid = read_table(_need(out / "grid_hourly.csv", "did"))
    present = set(grid["date"]) if len(grid) else set()
    for role in ROLES:
        if cfg.date_str(role) not in present:
            raise EmptyInputError(f"did: no presence data on the {role} date {cfg.date_str(role)}")
    frames = {r: frames_from_output(grid, cfg.date_str(r), cfg.hour) for r in ROLES}
    cells = did_grid(frames["treated_post"], frames["treated_pre"],
                     frames["control_post"], frames["control_pre"])
    rows = [{"cx": int(c.cx), "cy": int(c.cy), "did": int(d.did), "baseline": int(d.baseline),
             "pct_change": math.nan if d.pct_change is None else d.pct_change}
            for c, d in cells.items()]
    write_table(out / "did_grid.csv", rows, columns=["cx", "cy", "did", "baseline", "pct_change"])


def stage_lisa(cfg: RunConfig, out: Path):
    grid = read_table(_need(out / "did_grid.csv", "lisa"))
    values = {KmCell(float(x), float(y)): float(v) for x, y, v in zip(grid["cx"], grid["cy"], grid["did"])}
    if not values:
        raise EmptyInputError("lisa: no cells in did_grid.csv")
    res = lisa(values, cfg.lisa_max_dist, cfg.permutations, cfg.seed, cfg.alpha, cfg.row_standardize)
    rows = [{"cx": int(c.cx), "cy": int(c.cy), "did": values[c], "local_i": r.local_i,
             "pseudo_p": r.pseudo_p, "z": r.z, "lag": r.lag, "class": r.cls}
            for c, r in res.items()]
    write_table(out / "lisa.csv", rows,
                columns=["cx", "cy", "did", "local_i", "pseudo_p", "z", "lag", "class"])


def _home_cells(homes: pd.DataFrame, cfg: RunConfig):
    dates = {cfg.date_str(r) for r in ROLES}
    sub = homes[homes["date"].isin(dates)]
    return sorted({KmCell(float(x), float(y)) for x, y in zip(sub["ox"], sub["oy"])})


def stage_demographics(cfg: RunConfig, out: Path):
    homes = read_table(_need(out / "homes.csv", "demographics"))
    population = read_population(_need_input(cfg, "population"))
    specs = attribute_predicates(population, cfg.k, cfg.poor_stat, cfg.poor_ref_ages)
    cells = _home_cells(homes, cfg)
    if not cells:
        raise EmptyInputError("demographics: no home cells on the analysed dates")
    ctx = context_for_cells(cells, population, specs, cfg.cover_radius)
    rows = [{"cx": int(c.cell.cx), "cy": int(c.cell.cy), **{a: c.shares[a] for a in ATTRIBUTES},
             "covered": c.covered, "nearest_m": c.distance} for c in ctx]
    write_table(out / "demographics.csv", rows,
                columns=["cx", "cy", *ATTRIBUTES, "covered", "nearest_m"])


def _summary(cfg, homes, demo):
    by_role = {r: homes[homes["date"] == cfg.date_str(r)] for r in ROLES}
    covered = demo[demo["covered"] == 1]
    columns = {"all": subgroup_did(by_role)}
    for attr in ATTRIBUTES:
        shares = {KmCell(float(x), float(y)): float(v)
                  for x, y, v in zip(covered["cx"], covered["cy"], covered[attr])}
        mask = subgroup_mask(attr, shares, cfg.percentile)
        columns[f"{attr}_p{cfg.percentile:g}"] = subgroup_did(by_role, mask)
    metrics = [("baseline_m", lambda s: s.baseline), ("did_m", lambda s: s.did),
               ("pct_change", lambda s: math.nan if s.pct is None else s.pct),
               ("n_obs", lambda s: s.n)]
    rows = [{"metric": name, **{col: fn(s) for col, s in columns.items()}} for name, fn in metrics]
    return rows, ["metric", *columns]


def _histogram(cfg, homes):
    cols = {}
    for role in ("treated_pre", "treated_post"):
        sub = homes[homes["date"] == cfg.date_str(role)]
        cols[f"share_{cfg.date_str(role)}"] = distance_histogram(sub).shares
    uppers = list(HIST_EDGES[1:]) + [math.nan]
    rows = [{"bin": HIST_LABELS[i], "lower_m": HIST_EDGES[i], "upper_m": uppers[i],
             **{k: v[i] for k, v in cols.items()}} for i in range(len(HIST_LABELS))]
    return rows, ["bin", "lower_m", "upper_m", *cols]


def _lisa_summary(cfg, lisa_df, jobs):
    cls = dict(zip(zip(lisa_df["cx"], lisa_df["cy"]), lisa_df["class"]))
    did = {k: float(v) for k, v in zip(zip(lisa_df["cx"], lisa_df["cy"]), lisa_df["did"])}
    base = {k: float(v) for k, v in zip(zip(lisa_df["cx"], lisa_df["cy"]), lisa_df["baseline"])}
    hh = [c for c, k in cls.items() if k == "HH"]
    ll = [c for c, k in cls.items() if k == "LL"]
    pct_hh, pct_ll = hotcold_pct_change(did, base, hh, ll, cfg.hotcold_method)
    rows = []
    for name, cells, pct in (("HH", hh, pct_hh), ("LL", ll, pct_ll)):
        d = np.array(list(dist_to_k_jobs(cells, jobs, cfg.jobs_k).values())) if cells else np.array([])
        rows.append({
            "class": name, "n_cells": len(cells),
            "pct_change": math.nan if pct is None else pct,
            "mean_jobs_dist_m": math.fsum(d.tolist()) / len(d) if len(d) else math.nan,
            "median_jobs_dist_m": float(np.median(d)) if len(d) else math.nan,
            "max_jobs_dist_m": float(d.max()) if len(d) else math.nan,
        })
    return rows, ["class", "n_cells", "pct_change", "mean_jobs_dist_m", "median_jobs_dist_m",
                  "max_jobs_dist_m"]


def report(cfg: RunConfig, out: Path):
    """Write summary.csv, histogram.csv and lisa_summary.csv from stage outputs."""
    out = Path(out)
    homes = read_table(_need(out / "homes.csv", "report"))
    demo = read_table(_need(out / "demographics.csv", "report"))
    lisa_df = read_table(_need(out / "lisa.csv", "report"))
    did_df = read_table(_need(out / "did_grid.csv", "report"))
    jobs = read_jobs(_need_input(cfg, "jobs"))
    lisa_df = lisa_df.merge(did_df[["cx", "cy", "baseline"]], on=["cx", "cy"], how="left")
    rows, cols = _summary(cfg, homes, demo)
    write_table(out / "summary.csv", rows, columns=cols)
    rows, cols = _histogram(cfg, homes)
    write_table(out / "histogram.csv", rows, columns=cols)
    rows, cols = _lisa_summary(cfg, lisa_df, jobs)
    write_table(out / "lisa_summary.csv", rows, columns=cols)


# ------------------------------------------------------------ orchestration

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _row_count(path: Path) -> int:
    with open(path, "rb") as fh:
        return max(sum(1 for _ in fh) - 1, 0)


def write_manifest(cfg: RunConfig, out: Path):
    files = sorted(p for p in out.iterdir() if p.suffix == ".csv")
    inputs = {name: _sha256(Path(getattr(cfg, name))) for name in ("events", "towers", "population", "jobs")
              if getattr(cfg, name) is not None}
    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.canonical(),
        "inputs": inputs,
        "outputs": {p.name: {"rows": _row_count(p), "sha256": _sha256(p)} for p in files},
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


STAGES = ("aggregate", "did", "lisa", "demographics", "report")


def _run_stage(name, fn, *args):
    try:
        return fn(*args)
    except MobiscopeError as exc:
        msg = str(exc)
        if not msg.startswith(f"{name}:"):
            exc.args = (f"{name}: {msg}",) + exc.args[1:]
        raise
    except Exception as exc:
        raise MobiscopeError(f"{name}: internal error: {exc!r}") from exc


def run_pipeline(cfg: RunConfig) -> dict:
    """Run every stage; outputs land in ``cfg.out_dir`` only if all succeed."""
    cfg.validate()
    for name in ("events", "towers", "population", "jobs"):
        _run_stage("ingest", _need_input, cfg, name)
    out = Path(cfg.out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        stats = _run_stage("aggregate", stage_aggregate, cfg, scratch)
        _run_stage("did", stage_did, cfg, scratch)
        _run_stage("lisa", stage_lisa, cfg, scratch)
        _run_stage("demographics", stage_demographics, cfg, scratch)
        _run_stage("report", report, cfg, scratch)
        manifest = _run_stage("manifest", write_manifest, cfg, scratch)
        out.mkdir(parents=True, exist_ok=True)
        for p in sorted(scratch.iterdir()):
            os.replace(p, out / p.name)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    return {"stats": stats, "manifest": manifest}
