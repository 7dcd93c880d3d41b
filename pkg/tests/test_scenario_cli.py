import csv
import time

import pytest
import yaml

from continuum import cli
from continuum import scenario as sc
from continuum.placement import make_strategy

from conftest import output_digests

GRID = {
    "topologies": ["hierarchical", "star", "random"],
    "sizes": [50, 100, 300],
    "strategies": ["first_fit", "best_fit", "min_energy"],
    "policies": ["degrade(50)", "kill(5)"],
    "loads": [0.0, 0.25, 0.5, 0.75],
    "seeds": [1, 2, 3],
}

MINIMAL = """\
name: tiny
seed: 4
simulation: {max_ticks: 5}
infrastructure: {builder: hierarchical, size: 12}
applications:
  - id: a
    strategy: first_fit
    services:
      - {id: x, requirements: {cpu: 1}}
      - {id: y, requirements: {cpu: 1}}
    interactions:
      - {src: x, dst: y, requirements: {latency: 200}}
    flows: [[x, y]]
callbacks: [placement_success, response_time]
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- parsing -------------------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["uc1-small", "uc2", "uc3"])
def test_presets_parse(name):
    cfg = sc.load_preset(name)
    assert cfg.name == name
    assert name in sc.preset_names()


def test_uc2_preset_shape():
    cfg = sc.load_preset("uc2")
    assert cfg.infrastructure["size"] == 187
    (app,) = cfg.applications
    assert len(app["services"]) == 8 and app["flows"]
    scen = sc.build(cfg)
    assert len(scen.env.infra.nodes) == 187


def test_unknown_strategy_names_field():
    bad = MINIMAL.replace("strategy: first_fit", "strategy: worst_fit")
    with pytest.raises(sc.ParseError) as exc:
        sc.parse(bad)
    (issue,) = exc.value.issues
    assert issue.path == "applications[0].strategy"
    assert "worst_fit" in issue.message
    assert issue.line == 7


def test_all_errors_collected():
    bad = (MINIMAL.replace("strategy: first_fit", "strategy: worst_fit")
           .replace("[placement_success, response_time]", "[placement_success, nope]")
           .replace("size: 12", "size: -3"))
    with pytest.raises(sc.ParseError) as exc:
        sc.parse(bad)
    paths = {i.path for i in exc.value.issues}
    assert {"applications[0].strategy", "infrastructure.size"} <= paths
    assert any(p.startswith("callbacks") for p in paths)
    assert all(i.line for i in exc.value.issues)


def test_unresolved_references():
    bad = MINIMAL.replace("flows: [[x, y]]", "flows: [[x, z]]").replace("dst: y", "dst: w")
    with pytest.raises(sc.ParseError) as exc:
        sc.parse(bad)
    msgs = " ".join(str(i) for i in exc.value.issues)
    assert "z" in msgs and "w" in msgs


def test_malformed_yaml():
    with pytest.raises(sc.ParseError) as exc:
        sc.parse("name: [unclosed\n")
    assert exc.value.issues[0].line


@pytest.mark.parametrize("name", ["uc1-small", "uc2", "uc3"])
def test_config_round_trip(name):
    cfg = sc.load_preset(name)
    again = sc.parse(cfg.dump())
    assert again.to_dict() == cfg.to_dict()
    assert sc.config_digest(again) == sc.config_digest(cfg)


def test_round_trip_with_defaults():
    cfg = sc.parse(MINIMAL)
    assert sc.parse(cfg.dump()).to_dict() == cfg.to_dict()
    assert yaml.safe_load(cfg.dump())["name"] == "tiny"


# -- sweeps --------------------------------------------------------------------------------------


def test_sweep_count_648(tmp_path, capsys):
    cfg = sc.load_preset("uc1-small").replace(sweep=GRID)
    assert sc.sweep_size(cfg) == 648
    points = sc.sweep_points(cfg)
    assert len(points) == 648
    assert len({sc.run_id_for(p) for p in points}) == 648
    p = write(tmp_path, cfg.dump())
    assert cli.main(["--config", str(p), "--sweep", "--dry-run"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "sweep: 648 runs"
    assert len(out) == 649


def test_run_ids_pure():
    cfg = sc.load_preset("uc1-small").replace(sweep=GRID)
    first = [sc.run_id_for(p) for p in sc.sweep_points(cfg)]
    second = [sc.run_id_for(dict(reversed(list(p.items())))) for p in sc.sweep_points(sc.parse(cfg.dump()))]
    assert first == second
    assert sc.run_id_for({"topology": "star", "size": 50, "strategy": "best_fit", "policy": "kill(5)",
                          "load": 0.25, "seed": 2}) == "star-50-best_fit-kill5-load0.25-s2"


def test_config_for_point_applies_axes():
    cfg = sc.load_preset("uc1-small")
    point = {"topology": "star", "size": 30, "strategy": "best_fit", "policy": "kill(20)", "load": 0.5, "seed": 9}
    run = sc.config_for_point(cfg, point)
    assert run.seed == 9 and not run.sweep
    assert run.infrastructure["builder"] == "star" and run.infrastructure["size"] == 30
    assert all(a["strategy"] == "best_fit" for a in run.applications)
    assert run.policies == ["kill(20)"]


DESK = {"topologies": ["hierarchical"], "sizes": [20, 30], "strategies": ["first_fit", "best_fit", "min_energy"],
        "policies": ["degrade(50)", "kill(5)"], "loads": [0.25], "seeds": [1, 2, 3]}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def desk_sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = sc.load_preset("uc1-small").replace(sweep=DESK)
    assert cli.run_sweep(cfg, str(root), jobs=2, ticks=20, quiet=True) == 0
    return cfg, root


def test_desk_grid_rows(desk_sweep):
    cfg, root = desk_sweep
    rows = read_csv(root / "summary.csv")
    assert len(rows) == 36
    assert list(rows[0]) == cli.SUMMARY_HEADER
    assert [r["run_id"] for r in rows] == [sc.run_id_for(p) for p in sc.sweep_points(cfg)]
    agg = read_csv(root / "aggregate.csv")
    assert list(agg[0]) == cli.AGGREGATE_HEADER
    assert len(agg) == 6 and sum(int(a["runs"]) for a in agg) == 36


def test_aggregate_recomputed(desk_sweep):
    _, root = desk_sweep
    rows = read_csv(root / "summary.csv")
    for a in read_csv(root / "aggregate.csv"):
        vals = [float(r["success_rate"]) for r in rows
                if (r["topology"], r["strategy"], r["policy"]) == (a["topology"], a["strategy"], a["policy"])]
        assert len(vals) == int(a["runs"])
        assert float(a["mean_success_rate"]) == pytest.approx(sum(vals) / len(vals), abs=1e-9)


def test_per_run_csv_matches_summary(desk_sweep):
    _, root = desk_sweep
    for r in read_csv(root / "summary.csv")[:6]:
        records = read_csv(root / r["run_id"] / "metrics" / "placement_success.csv")
        last = max(int(rec["tick"]) for rec in records)
        final = [float(rec["value"]) for rec in records if int(rec["tick"]) == last]
        mean = sum(final) / len(final)
        assert float(r["success_rate"]) == pytest.approx(mean, abs=1e-9)


def test_sweep_resume_skips_completed(desk_sweep, tmp_path, capsys):
    cfg, root = desk_sweep
    before = read_csv(root / "summary.csv")
    victim = root / before[5]["run_id"]
    stamp = {p: p.stat().st_mtime_ns for p in root.glob("*/report.json") if p.parent != victim}
    import shutil

    shutil.rmtree(victim)
    assert cli.run_sweep(cfg, str(root), ticks=20) == 0
    out = capsys.readouterr().out
    assert "sweep: 36 runs" in out and "skipping 35 completed runs" in out
    assert (victim / "report.json").is_file()
    assert {p: p.stat().st_mtime_ns for p in stamp} == stamp
    after = read_csv(root / "summary.csv")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "ticks_per_s"} for r in rows]
    assert strip(after) == strip(before)


def test_sweep_parallel_matches_serial(tmp_path):
    grid = {**DESK, "sizes": [20], "seeds": [1], "strategies": ["first_fit", "best_fit"]}
    cfg = sc.load_preset("uc1-small").replace(sweep=grid)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run_sweep(cfg, str(a), jobs=1, ticks=10, quiet=True) == 0
    assert cli.run_sweep(cfg, str(b), jobs=3, ticks=10, quiet=True) == 0
    strip = lambda rows: [{k: v for k, v in r.items() if k != "ticks_per_s"} for r in rows]
    assert strip(read_csv(a / "summary.csv")) == strip(read_csv(b / "summary.csv"))


# -- run_scenario / main -------------------------------------------------------------------------


def test_uc1_small_under_60s(tmp_path, capsys):
    t0 = time.perf_counter()
    assert cli.main(["--scenario", "uc1-small", "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 60
    out = capsys.readouterr().out
    assert "200 ticks" in out and "ticks/s" in out and "fulfilled" in out and str(tmp_path) in out


def test_seed_twice_identical(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["--scenario", "uc1-small", "--seed", "1", "--ticks", "60", "--out", str(tmp_path / d),
                         "--format", "json"]) == 0
    da, db = output_digests(tmp_path / "a"), output_digests(tmp_path / "b")
    assert da and da == db


def test_invalid_config_exit_2_no_outputs(tmp_path, capsys):
    p = write(tmp_path, MINIMAL.replace("strategy: first_fit", "strategy: worst_fit"))
    out = tmp_path / "out"
    assert cli.main(["--config", str(p), "--out", str(out)]) == 2
    assert not out.exists()
    assert "applications[0].strategy" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["--scenario", "no-such-preset"],
    ["--config", "/nonexistent/cfg.yaml"],
    [],
    ["--scenario", "uc2", "--ticks", "0"],
    ["--scenario", "uc2", "--sweep"],
])
def test_config_errors_exit_2(argv, tmp_path):
    out = tmp_path / "out"
    assert cli.main(argv + ["--out", str(out)]) == 2
    assert not out.exists()


def test_runtime_failure_exit_1(tmp_path, monkeypatch):
    from continuum import reporting

    def broken(id_, mode="csv"):
        spec = reporting.CALLBACKS["alive_nodes"](id_, mode)

        def handler(ctx):
            raise RuntimeError("boom")

        spec.handler = handler
        return spec

    monkeypatch.setitem(sc.CALLBACKS, "placement_success", broken)
    p = write(tmp_path, MINIMAL)
    assert cli.main(["--config", str(p), "--out", str(tmp_path / "o"), "--fail-fast"]) == 1


def test_list_presets(capsys):
    assert cli.main(["--list"]) == 0
    assert capsys.readouterr().out.split() == ["uc1-small", "uc2", "uc3"]


def test_format_flag(tmp_path):
    p = write(tmp_path, MINIMAL)
    assert cli.main(["--config", str(p), "--out", str(tmp_path / "o"), "--format", "json"]) == 0
    files = {f.name for f in (tmp_path / "o").rglob("*") if f.is_file()}
    assert files == {"records.json", "report.json", "logs.txt"}
    import json

    records = json.loads(next((tmp_path / "o").rglob("records.json")).read_text())
    assert set(records["1"]) == {"placement_success", "response_time"}


def test_ticks_override(tmp_path):
    p = write(tmp_path, MINIMAL)
    assert cli.main(["--config", str(p), "--out", str(tmp_path / "o"), "--ticks", "3"]) == 0
    rows = read_csv(next((tmp_path / "o").rglob("placement_success.csv")))
    assert sorted({int(r["tick"]) for r in rows}) == [1, 2, 3]


def test_presets_feasible_on_every_uc1_instance():
    """Each preset application fits on an empty instance of every swept topology at tick 0."""
    cfg = sc.load_preset("uc1-small")
    for point in sc.sweep_points(cfg):
        scen = sc.build(sc.config_for_point(cfg, point))
        env = scen.env
        for app in env.apps.values():
            placement = make_strategy("first_fit").place(app, env.infra, env.residual)
            assert placement is not None, (sc.run_id_for(point), app.id)
