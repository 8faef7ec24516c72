import datetime as dt

import pytest

from mobiscope.dataio import load_events, read_towers
from mobiscope.errors import ConfigError, GenerationError
from mobiscope.geo import KmCell
from mobiscope.gridagg import aggregate_sharded, frames_from_output, presence_output
from mobiscope.synth import AgentGroup, Scenario, generate, load_scenario, scenario_from_dict


@pytest.fixture(scope="module")
def world():
    sc = Scenario(seed=11, n_agents=600, width_km=12, height_km=10, activity_rate=0.15,
                  night_coverage=0.9, attendance={"treated_post": 0.5})
    return generate(sc)


@pytest.fixture(scope="module")
def pipeline_result(world, tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    world.write(d)
    towers = read_towers(d / "towers.csv")
    events, report = load_events(d / "events.csv", towers)
    return report, aggregate_sharded(events, towers, n_shards=3)


def test_same_seed_same_bytes(tmp_path):
    sc = Scenario(seed=5, n_agents=50, width_km=6, height_km=6)
    generate(sc).write(tmp_path / "a")
    generate(sc).write(tmp_path / "b")
    for name in ("events.csv", "towers.csv", "population.csv", "jobs.csv", "truth.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    generate(Scenario(seed=6, n_agents=50, width_km=6, height_km=6)).write(tmp_path / "c")
    assert (tmp_path / "a" / "events.csv").read_bytes() != (tmp_path / "c" / "events.csv").read_bytes()


def test_zero_agents():
    w = generate(Scenario(n_agents=0, width_km=4, height_km=4))
    assert w.n_events == 0
    assert w.truth.agent_days.empty and w.truth.counts.empty


def test_stationary_agent_has_zero_max_dist():
    w = generate(Scenario(n_agents=20, width_km=6, height_km=6, attendance={r: 0.0 for r in (
        "treated_pre", "treated_post", "control_pre", "control_post")}))
    assert (w.truth.agent_days["max_dist_m"] == 0).all()
    assert w.truth.oracle_max_dist(3, "2020-01-16") == 0.0


def test_single_commute_closed_form():
    sc = Scenario(n_agents=1, width_km=10, height_km=3, groups=[AgentGroup(
        home_region=(1, 1, 1, 1), work_region=(7, 1, 7, 1))], activity_rate=0.0)
    w = generate(sc)
    # home tower a at cx - 250, farthest serving tower b of the work cell at cx + 250
    assert w.truth.oracle_max_dist(0, sc.dates["treated_pre"]) == 6 * 1000 + 500
    assert w.truth.oracle_home(0) == KmCell(sc.origin_x + 1500, sc.origin_y + 1500)


def test_single_agent_counts_are_visited_cells():
    sc = Scenario(n_agents=1, width_km=10, height_km=3, groups=[AgentGroup(
        home_region=(1, 1, 1, 1), work_region=(7, 1, 7, 1))], activity_rate=0.0)
    w = generate(sc)
    date = sc.dates["treated_pre"]
    night = w.truth.oracle_counts(date, 3)
    assert night == {KmCell(sc.origin_x + 1500, sc.origin_y + 1500): 1}
    noon = w.truth.oracle_counts(date, 12)
    assert noon == {KmCell(sc.origin_x + 7500, sc.origin_y + 1500): 1}
    with pytest.raises(KeyError):
        w.truth.oracle_counts(dt.date(2000, 1, 1), 3)
    with pytest.raises(KeyError):
        w.truth.oracle_max_dist(99, date)


def test_stream_meets_ingest_invariants(world, pipeline_result):
    report, _ = pipeline_result
    assert report.n_rows == world.n_events
    assert report.n_dropped_unknown_tower == 0
    assert report.n_granularity_warnings == 0


def test_pipeline_homes_match_oracle(world, pipeline_result):
    _, res = pipeline_result
    days = world.truth.agent_days
    agents = world.truth.agents.set_index("agent")
    merged = days.merge(res.homes, on=["phone_id", "date"], how="left")
    seen = merged[merged["night_service"]]
    assert seen["ox"].notna().all()
    hit = (seen["ox"].to_numpy() == agents.loc[seen["agent"], "home_cx"].to_numpy()) & \
          (seen["oy"].to_numpy() == agents.loc[seen["agent"], "home_cy"].to_numpy())
    assert hit.mean() >= 0.99
    assert merged[~merged["night_service"]]["ox"].isna().all()


@pytest.mark.parametrize("hour", [0, 3, 6, 10, 12, 15])
def test_presence_matches_oracle_on_dwelling_hours(world, pipeline_result, hour):
    _, res = pipeline_result
    out = presence_output(res.presence)
    for date in world.scenario.dates.values():
        got = frames_from_output(out, date.isoformat(), hour).cells
        assert got == world.truth.oracle_counts(date, hour)


def test_effects_track_attendance(world):
    eff = world.truth.effects.set_index("group")
    assert eff.loc["all", "attendance_treated_pre"] == 1.0
    assert abs(eff.loc["all", "attendance_treated_post"] - 0.5) < 0.1


def test_scenario_validation():
    with pytest.raises(ConfigError):
        Scenario(attendance={"treated_post": 1.5}).validate()
    with pytest.raises(ConfigError):
        Scenario(dates={"treated_pre": dt.date(2020, 1, 1), "treated_post": dt.date(2020, 1, 1),
                        "control_pre": dt.date(2019, 1, 1), "control_post": dt.date(2019, 2, 1)}).validate()
    with pytest.raises(GenerationError):
        generate(Scenario(width_km=1, height_km=1))
    with pytest.raises(GenerationError):
        generate(Scenario(width_km=200, height_km=200, speed_cells=1))
    with pytest.raises(ConfigError):
        scenario_from_dict({"n_agent": 3})


def test_load_scenario_toml(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text('seed = 4\nn_agents = 10\n[attendance]\ntreated_post = 0.3\n'
                 '[[groups]]\nname = "a"\nshare = 0.5\nhome_region = [0, 0, 2, 2]\n'
                 '[[groups]]\nname = "b"\nshare = 0.5\nattendance = { treated_post = 0.9 }\n')
    sc = load_scenario(p)
    assert sc.seed == 4 and sc.groups[0].home_region == (0, 0, 2, 2)
    assert sc.rate(sc.groups[0], "treated_post") == 0.3
    assert sc.rate(sc.groups[1], "treated_post") == 0.9
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing.toml")
