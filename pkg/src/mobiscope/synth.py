"""Deterministic synthetic world: towers, agents, schedules and ground truth.

Every km cell carries two towers, ``a`` at ``(cx - 250, cy)`` and ``b`` at
``(cx + 250, cy)``. An agent sleeps on the ``a`` tower of its home cell,
and on a working day leaves between 07:00 and 07:55, hops along a
straight chain of cells (``speed_cells`` per 5-minute slot), then
alternates between the two towers of its work cell until it returns home
between 16:00 and 16:55. Phones emit an event on every handover, once an
hour as a periodic update, and at random with ``activity_rate``.

Ground truth is read off the realised tower schedule (where the agent
actually was), never from the pipeline's position estimates.

Random streams: ``default_rng([seed, 1])`` draws agents, ``[seed, 2]`` the
population and jobs, ``[seed, 3]`` phone identifiers, and
``[seed, 10 + r]`` everything for the date with role index ``r``.
"""
from __future__ import annotations

import datetime as dt
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.csv as pacsv

from .dataio import (EVENT_COLUMNS, EventTable, JobSite, PersonRecord, TowerRegistry,
                     TowerSite, date_to_day, write_jobs, write_population, write_table,
                     write_towers)
from .did import ROLES
from .errors import ConfigError, GenerationError
from .geo import KM, HALF_KM, KmCell, PlanarPoint

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SLOTS = 288
NIGHT_END_SLOT = 84          # 07:00
TOWER_OFFSET = 250.0

DEFAULT_DATES = {
    "treated_pre": dt.date(2020, 1, 16),
    "treated_post": dt.date(2020, 3, 26),
    "control_pre": dt.date(2019, 1, 17),
    "control_post": dt.date(2019, 3, 28),
}


@dataclass
class AgentGroup:
    """A block of agents sharing home/work regions, attendance and attributes.

    Regions are inclusive ``(ix0, iy0, ix1, iy1)`` cell index boxes relative
    to the grid origin; ``None`` means the whole grid.
    """
    name: str = "background"
    share: float = 1.0
    home_region: tuple | None = None
    work_region: tuple | None = None
    attendance: dict = field(default_factory=dict)
    minority_rate: float = 0.1
    tertiary_rate: float = 0.3
    elderly_rate: float = 0.15
    income_scale: float = 1.0


@dataclass
class Scenario:
    seed: int = 0
    n_agents: int = 1000
    width_km: int = 20
    height_km: int = 20
    origin_x: float = 600_000.0
    origin_y: float = 6_600_000.0
    dates: dict = field(default_factory=lambda: dict(DEFAULT_DATES))
    attendance: dict = field(default_factory=dict)
    groups: list = field(default_factory=lambda: [AgentGroup()])
    night_coverage: float = 1.0
    activity_rate: float = 0.1
    speed_cells: int = 4
    depart_slots: tuple = (84, 96)
    return_slots: tuple = (192, 204)
    settle_slots: int = 8
    pingpong_period: int = 3
    persons_per_agent: int = 2
    extra_jobs: int = 200

    def rate(self, group: AgentGroup, role: str) -> float:
        return float(group.attendance.get(role, self.attendance.get(role, 1.0)))

    def validate(self):
        if self.n_agents < 0:
            raise ConfigError("n_agents must be >= 0")
        if sorted(self.dates) != sorted(ROLES):
            raise ConfigError(f"dates must name exactly the roles {ROLES}")
        if len(set(self.dates.values())) != 4:
            raise ConfigError("the four dates must be distinct")
        for g in self.groups:
            for role in ROLES:
                r = self.rate(g, role)
                if not 0.0 <= r <= 1.0:
                    raise ConfigError(f"attendance {r} for {g.name}/{role} outside [0, 1]")
        shares = [g.share for g in self.groups]
        if not self.groups or any(s < 0 for s in shares) or not math.isclose(sum(shares), 1.0):
            raise ConfigError("group shares must be non-negative and sum to 1")
        for v in (self.night_coverage, self.activity_rate):
            if not 0.0 <= v <= 1.0:
                raise ConfigError("night_coverage and activity_rate must lie in [0, 1]")
        if self.origin_x < 0 or self.origin_y < 0 or self.origin_x % KM or self.origin_y % KM:
            raise ConfigError("grid origin must be non-negative whole kilometres")
        if self.width_km * self.height_km < 2 or self.speed_cells < 1:
            raise GenerationError("tower layout too sparse for commutes: need at least 2 cells")
        longest = math.ceil(max(self.width_km, self.height_km) / self.speed_cells)
        if self.depart_slots[1] + longest + self.settle_slots > self.return_slots[0]:
            raise GenerationError(
                f"tower layout too sparse: a {longest}-slot commute does not fit before the return window")
        if self.return_slots[1] + longest > SLOTS:
            raise GenerationError("return commute runs past midnight")
        for g in self.groups:
            for reg in (g.home_region, g.work_region):
                if reg is not None:
                    x0, y0, x1, y1 = reg
                    if not (0 <= x0 <= x1 < self.width_km and 0 <= y0 <= y1 < self.height_km):
                        raise ConfigError(f"region {reg} of group {g.name} lies outside the grid")


def _coerce_date(v):
    return v if isinstance(v, dt.date) else dt.date.fromisoformat(str(v))


def scenario_from_dict(d: dict) -> Scenario:
    d = dict(d)
    known = {f.name for f in fields(Scenario)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    if "dates" in d:
        d["dates"] = {k: _coerce_date(v) for k, v in d["dates"].items()}
    if "groups" in d:
        gk = {f.name for f in fields(AgentGroup)}
        groups = []
        for g in d["groups"]:
            bad = set(g) - gk
            if bad:
                raise ConfigError(f"unknown group keys: {sorted(bad)}")
            g = dict(g)
            for reg in ("home_region", "work_region"):
                if g.get(reg) is not None:
                    g[reg] = tuple(int(v) for v in g[reg])
            groups.append(AgentGroup(**g))
        d["groups"] = groups
    for key in ("depart_slots", "return_slots"):
        if key in d:
            d[key] = tuple(d[key])
    sc = Scenario(**d)
    sc.validate()
    return sc


def load_scenario(path) -> Scenario:
    try:
        with open(path, "rb") as fh:
            return scenario_from_dict(tomllib.load(fh))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc


# ------------------------------------------------------------------ world

@dataclass
class GroundTruth:
    agents: pd.DataFrame
    agent_days: pd.DataFrame
    counts: pd.DataFrame
    effects: pd.DataFrame

    def oracle_home(self, agent: int) -> KmCell:
        row = self.agents[self.agents["agent"] == agent]
        if row.empty:
            raise KeyError(f"unknown agent {agent}")
        return KmCell(float(row["home_cx"].iloc[0]), float(row["home_cy"].iloc[0]))

    def oracle_max_dist(self, agent: int, date) -> float:
        date = _coerce_date(date).isoformat()
        row = self.agent_days[(self.agent_days["agent"] == agent) & (self.agent_days["date"] == date)]
        if row.empty:
            raise KeyError(f"unknown agent/date {agent}/{date}")
        return float(row["max_dist_m"].iloc[0])

    def oracle_counts(self, date, hour: int) -> dict:
        date = _coerce_date(date).isoformat()
        if date not in set(self.agent_days["date"]):
            raise KeyError(f"unknown date {date}")
        sub = self.counts[(self.counts["date"] == date) & (self.counts["hour"] == hour)]
        return {KmCell(float(x), float(y)): int(n) for x, y, n in zip(sub["cx"], sub["cy"], sub["n_phones"])}


@dataclass
class SynthWorld:
    scenario: Scenario
    towers: TowerRegistry
    ev_phone: np.ndarray
    ev_minute: np.ndarray
    ev_tower: np.ndarray
    phone_labels: np.ndarray
    population: list
    jobs: list
    truth: GroundTruth

    @property
    def n_events(self) -> int:
        return len(self.ev_phone)

    def event_table(self) -> EventTable:
        """Events as an in-memory table (tower codes re-indexed to the registry)."""
        labels = self.phone_labels
        order = np.argsort(labels)
        remap = np.empty(len(labels), dtype=np.int64)
        remap[order] = np.arange(len(labels))
        return EventTable(remap[self.ev_phone], self.ev_minute.copy(), self.ev_tower.copy(),
                          labels[order])

    def write_events(self, path):
        ts_minutes = np.unique(self.ev_minute)
        ts_labels = np.datetime_as_string(ts_minutes.astype("datetime64[m]"), unit="m")
        ts_idx = np.searchsorted(ts_minutes, self.ev_minute)
        cols = [
            pa.DictionaryArray.from_arrays(pa.array(self.ev_phone.astype(np.int32)),
                                           pa.array(self.phone_labels.astype(str))),
            pa.DictionaryArray.from_arrays(pa.array(ts_idx.astype(np.int32)),
                                           pa.array(ts_labels.astype(str))),
            pa.DictionaryArray.from_arrays(pa.array(self.ev_tower.astype(np.int32)),
                                           pa.array(self.towers.ids.astype(str))),
        ]
        table = pa.table([c.dictionary_decode() for c in cols], names=list(EVENT_COLUMNS))
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write((",".join(EVENT_COLUMNS) + "\n").encode())
            pacsv.write_csv(table, fh, write_options=pacsv.WriteOptions(
                include_header=False, quoting_style="none"))

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_towers(out / "towers.csv", self.towers)
        self.write_events(out / "events.csv")
        write_population(out / "population.csv", self.population)
        write_jobs(out / "jobs.csv", self.jobs)
        write_table(out / "truth.csv", self.truth.agent_days)
        write_table(out / "truth_counts.csv", self.truth.counts)
        write_table(out / "truth_effects.csv", self.truth.effects)
        write_table(out / "truth_agents.csv", self.truth.agents)


def _tower_grid(sc: Scenario):
    sites = []
    for ix in range(sc.width_km):
        for iy in range(sc.height_km):
            cx = sc.origin_x + ix * KM + HALF_KM
            cy = sc.origin_y + iy * KM + HALF_KM
            sites.append(TowerSite(f"T{ix:04d}-{iy:04d}a", PlanarPoint(cx - TOWER_OFFSET, cy)))
            sites.append(TowerSite(f"T{ix:04d}-{iy:04d}b", PlanarPoint(cx + TOWER_OFFSET, cy)))
    return TowerRegistry(sites)


def _tower_index(sc, ix, iy, b=0):
    # registry order: sorted ids == (ix, iy, a|b) lexicographic
    return (ix * sc.height_km + iy) * 2 + b


def _region_cells(sc, region, n, rng):
    x0, y0, x1, y1 = region if region is not None else (0, 0, sc.width_km - 1, sc.height_km - 1)
    return rng.integers(x0, x1 + 1, size=n), rng.integers(y0, y1 + 1, size=n)


def _group_sizes(sc: Scenario):
    sizes = [int(math.floor(g.share * sc.n_agents)) for g in sc.groups]
    sizes[-1] += sc.n_agents - sum(sizes)
    return sizes


def _commute_paths(sc, hx, hy, wx, wy):
    dx, dy = wx - hx, wy - hy
    L = np.ceil(np.maximum(np.abs(dx), np.abs(dy)) / sc.speed_cells).astype(np.int64)
    Lmax = int(L.max()) if len(L) else 0
    s = np.arange(1, Lmax + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(L[:, None] > 0, s[None, :] / np.maximum(L[:, None], 1), 0.0)
    px = hx[:, None] + np.floor(frac * dx[:, None] + 0.5).astype(np.int64)
    py = hy[:, None] + np.floor(frac * dy[:, None] + 0.5).astype(np.int64)
    valid = s[None, :] <= L[:, None]
    return L, np.where(valid, px, -1), np.where(valid, py, -1), valid


def _day_schedule(sc, rng, attend, home_t, L, path_t, work_a, work_b):
    """Tower index per (agent, slot) for one date."""
    n = len(home_t)
    T = np.repeat(home_t[:, None], SLOTS, axis=1)
    dep = rng.integers(sc.depart_slots[0], sc.depart_slots[1], size=n)
    ret = rng.integers(sc.return_slots[0], sc.return_slots[1], size=n)
    slot = np.arange(SLOTS)[None, :]
    Lmax = path_t.shape[1]
    a = np.flatnonzero(attend)
    if Lmax:
        j = np.arange(Lmax)[None, :]
        valid = j < L[a, None]
        rows = np.broadcast_to(a[:, None], valid.shape)[valid]
        T[rows, (dep[a, None] + j)[valid]] = path_t[a][valid]
        # way back: path cells in reverse, ending on the home tower
        back_idx = L[a, None] - 2 - j
        back = np.where(back_idx >= 0, np.take_along_axis(path_t[a], np.maximum(back_idx, 0), axis=1),
                        home_t[a, None])
        T[rows, (ret[a, None] + j)[valid]] = back[valid]
    arrive = dep[a] + L[a]
    u = slot - arrive[:, None]
    at_work = (u >= 0) & (slot < ret[a, None])
    phase = np.where(u < sc.settle_slots, u, sc.settle_slots + (u - sc.settle_slots) // sc.pingpong_period)
    wt = np.where(phase % 2 == 0, work_a[a, None], work_b[a, None])
    sub = T[a]
    sub[at_work] = wt[at_work]
    T[a] = sub
    return T


def generate(sc: Scenario) -> SynthWorld:
    sc.validate()
    towers = _tower_grid(sc)
    tx, ty = towers.x, towers.y
    n = sc.n_agents
    rng_agents = np.random.default_rng([sc.seed, 1])
    group_of = np.repeat(np.arange(len(sc.groups)), _group_sizes(sc))
    hx = np.empty(n, dtype=np.int64)
    hy = np.empty(n, dtype=np.int64)
    wx = np.empty(n, dtype=np.int64)
    wy = np.empty(n, dtype=np.int64)
    for gi, g in enumerate(sc.groups):
        m = group_of == gi
        k = int(m.sum())
        hx[m], hy[m] = _region_cells(sc, g.home_region, k, rng_agents)
        wx[m], wy[m] = _region_cells(sc, g.work_region, k, rng_agents)
    home_t = _tower_index(sc, hx, hy)
    work_a = _tower_index(sc, wx, wy)
    work_b = work_a + 1
    L, px, py, valid = _commute_paths(sc, hx, hy, wx, wy)
    path_t = np.where(valid, _tower_index(sc, np.maximum(px, 0), np.maximum(py, 0)), -1)

    rng_ids = np.random.default_rng([sc.seed, 3])
    id_codes = rng_ids.permutation(max(n * len(ROLES), 1))[: n * len(ROLES)].reshape(len(ROLES), n) \
        if n else np.empty((len(ROLES), 0), dtype=np.int64)
    phone_labels = np.char.mod("%08x", id_codes.ravel()).astype(object) if n else np.array([], dtype=object)

    ev_parts = []
    day_rows = []
    count_parts = []
    home_x, home_y = tx[home_t], ty[home_t]
    for r, role in enumerate(ROLES):
        date = sc.dates[role]
        day0 = date_to_day(date) * 1440
        rng = np.random.default_rng([sc.seed, 10 + r])
        rates = np.array([sc.rate(g, role) for g in sc.groups])
        attend = rng.random(n) < rates[group_of] if n else np.zeros(0, dtype=bool)
        covered = rng.random(n) < sc.night_coverage
        hb = rng.integers(0, 12, size=n)
        T = _day_schedule(sc, rng, attend, home_t, L, path_t, work_a, work_b)
        emitted = rng.random((n, SLOTS)) < sc.activity_rate
        emitted[:, 1:] |= T[:, 1:] != T[:, :-1]
        emitted |= (np.arange(SLOTS)[None, :] % 12) == hb[:, None]
        emitted[~covered, :NIGHT_END_SLOT] = False
        # slot-major order gives a time-ordered log
        s_idx, a_idx = np.nonzero(emitted.T)
        ev_parts.append((r * n + a_idx, day0 + 5 * s_idx, T[a_idx, s_idx]))

        true_d = np.sqrt((tx[T] - home_x[:, None]) ** 2 + (ty[T] - home_y[:, None]) ** 2).max(axis=1) \
            if n else np.empty(0)
        night_seen = emitted[:, 36:84].any(axis=1) if n else np.zeros(0, dtype=bool)
        day_rows.append(pd.DataFrame({
            "agent": np.arange(n), "group": [sc.groups[g].name for g in group_of],
            "role": role, "date": date.isoformat(), "phone_id": phone_labels[r * n:(r + 1) * n].astype(str),
            "attended": attend, "night_service": night_seen, "max_dist_m": true_d,
        }))
        cell_x = (tx[T[a_idx, s_idx]] // KM) * KM + HALF_KM
        cell_y = (ty[T[a_idx, s_idx]] // KM) * KM + HALF_KM
        cdf = pd.DataFrame({"hour": s_idx // 12, "cx": cell_x.astype(np.int64),
                            "cy": cell_y.astype(np.int64), "agent": a_idx}).drop_duplicates()
        cnt = cdf.groupby(["hour", "cx", "cy"], sort=True).size().rename("n_phones").reset_index()
        cnt.insert(0, "date", date.isoformat())
        count_parts.append(cnt)

    ev_phone = np.concatenate([p[0] for p in ev_parts]).astype(np.int64)
    ev_minute = np.concatenate([p[1] for p in ev_parts]).astype(np.int64)
    ev_tower = np.concatenate([p[2] for p in ev_parts]).astype(np.int64)

    agents = pd.DataFrame({
        "agent": np.arange(n), "group": [sc.groups[g].name for g in group_of],
        "home_x": home_x, "home_y": home_y,
        "home_cx": (home_x // KM) * KM + HALF_KM, "home_cy": (home_y // KM) * KM + HALF_KM,
        "work_cx": sc.origin_x + wx * KM + HALF_KM, "work_cy": sc.origin_y + wy * KM + HALF_KM,
    })
    agent_days = pd.concat(day_rows, ignore_index=True)
    counts = pd.concat(count_parts, ignore_index=True)[["date", "hour", "cx", "cy", "n_phones"]]
    population, jobs = _population_and_jobs(sc, group_of, hx, hy, wx, wy)
    world = SynthWorld(sc, towers, ev_phone, ev_minute, ev_tower, phone_labels, population, jobs,
                       GroundTruth(agents, agent_days, counts, _effects(sc, agent_days)))
    return world


def _effects(sc: Scenario, agent_days: pd.DataFrame) -> pd.DataFrame:
    """Injected attendance rates and the DiD of true mean max distance per group."""
    rows = []
    seen = agent_days[agent_days["night_service"]]
    for name in [g.name for g in sc.groups] + ["all"]:
        sub = seen if name == "all" else seen[seen["group"] == name]
        row = {"group": name, "n_agents": int(sub["agent"].nunique())}
        means = {}
        for role in ROLES:
            r = sub[sub["role"] == role]
            row[f"attendance_{role}"] = float(r["attended"].mean()) if len(r) else math.nan
            means[role] = math.fsum(r["max_dist_m"]) / len(r) if len(r) else math.nan
        did = (means["treated_post"] - means["treated_pre"]) - (means["control_post"] - means["control_pre"])
        row["true_baseline_m"] = means["treated_pre"]
        row["true_did_m"] = did
        row["true_did_pct"] = 100.0 * did / means["treated_pre"] if means["treated_pre"] > 0 else math.nan
        rows.append(row)
    return pd.DataFrame(rows)


def _population_and_jobs(sc, group_of, hx, hy, wx, wy):
    rng = np.random.default_rng([sc.seed, 2])
    k = sc.persons_per_agent
    n = len(group_of)
    owner = np.repeat(np.arange(n), k)
    g = group_of[owner]
    minority_rate = np.array([x.minority_rate for x in sc.groups])[g]
    tertiary_rate = np.array([x.tertiary_rate for x in sc.groups])[g]
    elderly_rate = np.array([x.elderly_rate for x in sc.groups])[g]
    income_scale = np.array([x.income_scale for x in sc.groups])[g]
    m = len(owner)
    lx = sc.origin_x + hx[owner] * KM + 100.0 * rng.integers(0, 10, size=m)
    ly = sc.origin_y + hy[owner] * KM + 100.0 * rng.integers(0, 10, size=m)
    elderly = rng.random(m) < elderly_rate
    age = np.where(elderly, rng.integers(70, 96, size=m), rng.integers(0, 70, size=m))
    minority = rng.random(m) < minority_rate
    tertiary = (rng.random(m) < tertiary_rate) & (age >= 18)
    income = np.round(np.exp(rng.normal(12.0, 0.5, size=m)) * income_scale)
    population = [PersonRecord(PlanarPoint(float(x), float(y)), int(a), bool(mi), bool(te), float(inc))
                  for x, y, a, mi, te, inc in zip(lx, ly, age, minority, tertiary, income)]
    jx = sc.origin_x + wx * KM + 100.0 * rng.integers(0, 10, size=n)
    jy = sc.origin_y + wy * KM + 100.0 * rng.integers(0, 10, size=n)
    ex = sc.origin_x + 100.0 * rng.integers(0, sc.width_km * 10, size=sc.extra_jobs)
    ey = sc.origin_y + 100.0 * rng.integers(0, sc.height_km * 10, size=sc.extra_jobs)
    jobs = [JobSite(PlanarPoint(float(x), float(y)))
            for x, y in zip(np.concatenate([jx, ex]), np.concatenate([jy, ey]))]
    return population, jobs
