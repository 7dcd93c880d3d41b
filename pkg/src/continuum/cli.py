"""``continuum`` command line: run a scenario file or preset, or sweep a grid."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path as FsPath

from . import scenario as sc
from .builders import InvalidParams
from .simulation import HandlerFailure

log = logging.getLogger("continuum.cli")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

SUMMARY_HEADER = ["run_id", "topology", "size", "strategy", "policy", "load", "seed", "success_rate", "ticks_per_s"]
AGGREGATE_HEADER = ["topology", "strategy", "policy", "runs", "mean_success_rate"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="continuum", description="Deterministic cloud-edge placement simulator.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="scenario YAML file")
    src.add_argument("--scenario", metavar="NAME", help="bundled preset (see --list)")
    p.add_argument("--list", action="store_true", help="list bundled presets and exit")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--ticks", type=int, help="override simulation.max_ticks")
    p.add_argument("--out", metavar="DIR", default="runs", help="output directory (default: runs)")
    p.add_argument("--sweep", action="store_true", help="run the scenario's sweep grid")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    p.add_argument("--dry-run", action="store_true", help="with --sweep: list the runs without executing them")
    p.add_argument("--format", choices=sc.FORMATS, help="report mode for callbacks without one")
    p.add_argument("--fail-fast", action="store_true", help="abort on the first failing event handler")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args) -> sc.ScenarioConfig:
    if args.config:
        return sc.load(args.config)
    return sc.load_preset(args.scenario)


def run_scenario(cfg: sc.ScenarioConfig, out: str, seed=None, ticks=None, fmt=None, fail_fast=False,
                 run_id=None, quiet=False) -> int:
    try:
        scen = sc.build(cfg, seed=seed, ticks=ticks, out=out, fmt=fmt, run_id=run_id, fail_fast=fail_fast or None)
    except (sc.ParseError, InvalidParams, ValueError, LookupError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = scen.run()
    except HandlerFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not quiet:
        s = report.summary
        print(f"{report.run_id}: {report.ticks} ticks in {report.wall_time:.2f}s "
              f"({report.ticks_per_s:.1f} ticks/s), fulfilled {s.get('fulfilled', 0)}/{len(scen.env.apps)} apps, "
              f"output {scen.reporter.root}")
    return EXIT_OK


def _sweep_worker(args):
    data, base_dir, point, out, ticks, fmt = args
    cfg = sc.ScenarioConfig.from_dict(data, base_dir)
    run_cfg = sc.config_for_point(cfg, point)
    rid = sc.run_id_for(point)
    scen = sc.build(run_cfg, ticks=ticks, out=out, fmt=fmt, run_id=rid)
    report = scen.run()
    rates = report.summary.get("success_rate", {})
    return _row(point, rid, sum(rates.values()) / len(rates) if rates else 0.0, report.ticks_per_s)


def _row(point, rid, rate, tps) -> dict:
    return {
        "run_id": rid, "topology": point["topology"], "size": point["size"],
        "strategy": point["strategy"] or "config", "policy": point["policy"] or "none",
        "load": f"{point['load']:g}", "seed": point["seed"],
        "success_rate": f"{rate:.9g}", "ticks_per_s": f"{tps:.3f}",
    }


def _row_from_report(point, rid, path) -> dict:
    import json

    report = json.loads(path.read_text())
    rates = report.get("summary", {}).get("success_rate", {})
    tps = report.get("timing", {}).get("ticks_per_s", 0.0)
    return _row(point, rid, sum(rates.values()) / len(rates) if rates else 0.0, float(tps))


def aggregate(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[(r["topology"], r["strategy"], r["policy"])].append(float(r["success_rate"]))
    return [
        {"topology": t, "strategy": s, "policy": p, "runs": len(v), "mean_success_rate": f"{sum(v) / len(v):.9g}"}
        for (t, s, p), v in sorted(groups.items())
    ]


def run_sweep(cfg: sc.ScenarioConfig, out: str, jobs: int = 1, ticks=None, fmt=None, quiet=False) -> int:
    points = sc.sweep_points(cfg)
    if not quiet:
        print(f"sweep: {len(points)} runs")
    root = FsPath(out)
    root.mkdir(parents=True, exist_ok=True)
    rows: dict[str, dict] = {}
    todo = []
    for point in points:
        rid = sc.run_id_for(point)
        done = root / rid / "report.json"
        if done.is_file():
            rows[rid] = _row_from_report(point, rid, done)
        else:
            todo.append((cfg.to_dict(), cfg.base_dir, point, out, ticks, fmt))
    if not quiet and len(todo) < len(points):
        print(f"sweep: skipping {len(points) - len(todo)} completed runs")
    failed = 0
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_sweep_worker, t) for t in todo]
            for fut, t in zip(futures, todo):
                try:
                    row = fut.result()
                    rows[row["run_id"]] = row
                except Exception as exc:
                    failed += 1
                    print(f"run {sc.run_id_for(t[2])} failed: {exc}", file=sys.stderr)
    else:
        for t in todo:
            try:
                row = _sweep_worker(t)
                rows[row["run_id"]] = row
            except Exception as exc:
                failed += 1
                print(f"run {sc.run_id_for(t[2])} failed: {exc}", file=sys.stderr)
    ordered = [rows[sc.run_id_for(p)] for p in points if sc.run_id_for(p) in rows]
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(ordered)
    with open(root / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, AGGREGATE_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(aggregate(ordered))
    if not quiet:
        print(f"sweep: {len(ordered)} rows written to {root / 'summary.csv'}")
    return EXIT_RUNTIME if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.list:
        for name in sc.preset_names():
            print(name)
        return EXIT_OK
    if not args.config and not args.scenario:
        print("error: give --config PATH or --scenario NAME", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load(args)
    except sc.ParseError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.ticks is not None and args.ticks < 1:
        print("configuration error: --ticks must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.sweep:
        if not cfg.sweep:
            print("configuration error: scenario has no sweep block", file=sys.stderr)
            return EXIT_CONFIG
        if args.seed is not None:
            cfg = cfg.replace(sweep={**cfg.sweep, "seeds": [args.seed]})
        if args.dry_run:
            points = sc.sweep_points(cfg)
            print(f"sweep: {len(points)} runs")
            for point in points:
                print(sc.run_id_for(point))
            return EXIT_OK
        return run_sweep(cfg, args.out, max(1, args.jobs), args.ticks, args.format)
    return run_scenario(cfg, args.out, args.seed, args.ticks, args.format, args.fail_fast)


if __name__ == "__main__":
    sys.exit(main())
