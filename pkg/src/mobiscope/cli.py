"""``mobiscope`` command line.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 internal error.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .dataio import load_events, read_towers
from .errors import MobiscopeError
from .synth import generate, load_scenario

log = logging.getLogger("mobiscope")


def _date(text):
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad date {text!r}, expected YYYY-MM-DD") from None


def _add_run_options(p: argparse.ArgumentParser, inputs=True):
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--out", type=Path, dest="out_dir", help="output directory")
    if inputs:
        p.add_argument("--events", type=Path)
        p.add_argument("--towers", type=Path)
    p.add_argument("--population", type=Path)
    p.add_argument("--jobs", type=Path)
    for role in ("treated-pre", "treated-post", "control-pre", "control-post"):
        p.add_argument(f"--{role}", type=_date, dest=role.replace("-", "_"))
    p.add_argument("--hour", type=int, help="analysis hour (window hour:00-hour+1:00)")
    p.add_argument("--night-start")
    p.add_argument("--night-end")
    p.add_argument("--lenient", action="store_true", help="warn instead of failing on off-grid timestamps")
    p.add_argument("--permutations", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lisa-max-dist", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--jobs-k", type=int)
    p.add_argument("--shards", type=int)
    p.add_argument("--threads", type=int)


def _config(args) -> pipeline.RunConfig:
    overrides = {}
    for key in ("out_dir", "events", "towers", "population", "jobs", "hour", "night_start",
                "night_end", "permutations", "alpha", "lisa_max_dist", "seed", "k", "jobs_k",
                "shards", "threads"):
        overrides[key] = getattr(args, key, None)
    dates = {r: getattr(args, r) for r in pipeline.ROLES if getattr(args, r, None)}
    if dates:
        overrides["dates"] = dates
    if getattr(args, "lenient", False):
        overrides["strict_granularity"] = False
    return pipeline.load_config(args.config, overrides)


def cmd_ingest_check(args):
    towers = read_towers(args.towers)
    _, report = load_events(args.events, towers, not args.lenient)
    print(json.dumps(report.__dict__, sort_keys=True))


def cmd_stage(args):
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.command in ("homes", "aggregate"):
        stats = pipeline.stage_aggregate(cfg, out, homes_only=args.command == "homes")
        print(json.dumps(stats, sort_keys=True))
    elif args.command == "did":
        pipeline.stage_did(cfg, out)
    elif args.command == "lisa":
        pipeline.stage_lisa(cfg, out)
    elif args.command == "demographics":
        pipeline.stage_demographics(cfg, out)
    elif args.command == "report":
        pipeline.report(cfg, out)


def cmd_run(args):
    cfg = _config(args)
    result = pipeline.run_pipeline(cfg)
    stats = result["stats"]
    print(f"events: {stats['n_events']}  phones: {stats['n_phones']}  homes: {stats['n_homes']}")
    print(f"aggregation throughput: {stats['events_per_second']:.0f} events/s")
    print(f"config hash: {result['manifest']['config_hash']}")
    print(f"outputs in {cfg.out_dir}")


def cmd_synth(args):
    world = generate(load_scenario(args.scenario))
    world.write(args.out)
    print(f"{world.n_events} events for {world.scenario.n_agents} agents written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobiscope", description="Phone-event mobility pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-check", help="validate an event file against a tower registry")
    p.add_argument("--events", type=Path, required=True)
    p.add_argument("--towers", type=Path, required=True)
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_ingest_check)

    for name, help_ in (("homes", "infer homes and max distances"),
                        ("aggregate", "homes plus hourly grid and home-distance tables"),
                        ("did", "per-cell DiD of the analysis hour"),
                        ("lisa", "local Moran's I on the DiD grid"),
                        ("demographics", "k-NN population shares for home cells"),
                        ("report", "summary, histogram and hot/cold tables")):
        p = sub.add_parser(name, help=help_)
        _add_run_options(p)
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("run", help="full pipeline")
    _add_run_options(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--scenario", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MobiscopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - last resort
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
