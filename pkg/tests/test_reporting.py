import csv
import json

import pytest

from continuum.assets import AssetKind, AssetSet, AssetSpec
from continuum.environment import Environment
from continuum.graph import Application, Infrastructure, read_infrastructure_gml
from continuum.placement import StaticStrategy
from continuum.reporting import (
    CSV_HEADER, ReportRecord, Reporter, assets_callback, canonical, decode_cell, encode_cell, flow_response_time,
    metric_alive_nodes, metric_assets, metric_placement_success, metric_response_time, nest, read_csv,
    placement_state_callback, placement_success_callback, snapshot_callback, sim_time_callback,
    write_records,
)
from continuum.simulation import (
    EventSpec, SimGraph, Simulation, SimulationConfig, Trigger, callback, default_step_events,
)
from conftest import chain_app, line_infra


def three_nodes():
    assets = AssetSet([AssetSpec("cpu", AssetKind.ADDITIVE), AssetSpec("ram", AssetKind.ADDITIVE)])
    infra = Infrastructure("t", node_assets=assets)
    for i in range(3):
        infra.add_node(f"n{i}", {"cpu": 8, "ram": 16})
    return infra


def test_metric_assets_cardinality_and_residual():
    env = Environment(three_nodes())
    assert len(metric_assets(env)) == 6
    env.residual.allocate_node("x", "n0", {"cpu": 3})
    rec = dict(metric_assets(env))
    assert rec["n0/cpu"] == {"residual": 5, "capacity": 8}


def test_symbolic_values_sorted():
    assert canonical(frozenset({"b", "a", "c"})) == ["a", "b", "c"]
    assert encode_cell(frozenset({"z", "x"})) == '["x","z"]'


def test_canonical_floats():
    assert canonical(0.1 + 0.2) == 0.3
    assert canonical(float("inf")) == "inf"
    assert canonical(3.0) == 3
    assert decode_cell(encode_cell({"a": 1.5})) == {"a": 1.5}
    assert decode_cell("") is None


def test_success_rate_ratio():
    env = Environment(three_nodes())
    app = Application("a", env.infra.node_assets)
    app.add_service("s", {"cpu": 1})
    env.add_application(app)
    never = Application("b", env.infra.node_assets)
    never.add_service("s", {"cpu": 100})
    env.add_application(never)
    for tick in range(200):
        if tick == 150:
            env.infra.set_active("n0", False)
            env.infra.set_active("n1", False)
            env.infra.set_active("n2", False)
        env.lookup()
        env.fulfil()
    rates = dict(metric_placement_success(env))
    assert rates == {"a": 0.75, "b": 0.0}


def test_response_time_colocated():
    infra = Infrastructure("one")
    infra.add_node("n", {"cpu": 8, "processing_time": 2.0})
    env = Environment(infra)
    env.add_application(chain_app(n=2, cpu=1, lat=50))
    env.lookup()
    env.fulfil()
    assert flow_response_time(env, "app", ("s0", "s1")) == 4.0


def test_response_time_over_path():
    infra = line_infra((10.0,))
    env = Environment(infra)
    env.add_application(chain_app(n=2, cpu=1, lat=50), StaticStrategy({"s0": "n0", "s1": "n1"}))
    env.lookup()
    env.fulfil()
    out = dict(metric_response_time(env))
    assert out["app/flow0"] == 12.0
    assert out["app"] == 12.0


def test_response_time_unplaced_is_null():
    env = Environment(line_infra((10.0,), cpu=0.5))
    env.add_application(chain_app(n=2, cpu=1))
    env.lookup()
    env.fulfil()
    assert dict(metric_response_time(env))["app"] is None


@pytest.mark.parametrize("mode", ["mean", "source"])
def test_user_doubling_raises_response_time(mode):
    infra = line_infra((10.0, 5.0))
    env = Environment(infra)
    env.add_application(chain_app(n=2, cpu=1, lat=50), StaticStrategy({"s0": "n1", "s1": "n2"}))
    env.lookup()
    env.fulfil()
    env.hub = "n0"
    env.user_delay_in_rt = mode
    env.users = {"n0": 4, "n1": 4, "n2": 4}
    before = dict(metric_response_time(env))["app"]
    env.users = {n: 2 * u for n, u in env.users.items()}
    after = dict(metric_response_time(env))["app"]
    assert after > before
    env.user_delay_in_rt = False
    assert dict(metric_response_time(env))["app"] == 7.0  # 1 + 5 + 1


def test_alive_nodes():
    env = Environment(three_nodes())
    assert metric_alive_nodes(env) == 3
    env.infra.set_active("n1", False)
    assert metric_alive_nodes(env) == 2


def test_write_records_csv_and_json(tmp_path):
    recs = [ReportRecord(t, "m", "node", f"n{i}", t * 0.5 + i) for t in range(1, 4) for i in range(2)]
    write_records(recs, "csv", tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == len(recs) + 1
    write_records(recs, "json", tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    rows = read_csv(tmp_path / "m.csv")
    assert nest(recs) == doc
    for r in rows:
        assert doc[str(r["tick"])][r["callback"]][r["subject"]] == r["value"]


def run_with(tmp_path, run_id, mode, ticks=12):
    infra = line_infra((5.0, 7.0), cpu=8.0)
    env = Environment(infra)
    env.add_application(chain_app(n=3, cpu=2, lat=50, bw=10))
    g = default_step_events(env)
    for cb in (assets_callback(report_mode=mode), placement_success_callback(report_mode=mode),
               placement_state_callback(report_mode=mode)):
        g.add_callback(cb)
        g.connect("fulfil", cb.id)
    rep = Reporter(tmp_path, run_id)
    Simulation(SimulationConfig(max_ticks=ticks, run_id=run_id), env, g, rep).run()
    return rep.root


def test_csv_json_equivalent(tmp_path):
    csv_root = run_with(tmp_path, "csv", "csv")
    json_root = run_with(tmp_path, "json", "json")
    doc = json.loads((json_root / "metrics" / "records.json").read_text())
    count = 0
    for name in ("assets", "placement_success", "placement_state"):
        rows = read_csv(csv_root / "metrics" / f"{name}.csv")
        ticks = [r["tick"] for r in rows]
        assert ticks == sorted(ticks)
        for r in rows:
            assert doc[str(r["tick"])][name][r["subject"]] == r["value"]
            count += 1
    assert count == sum(len(subjects) for per in doc.values() for subjects in per.values())


def test_output_layout(tmp_path):
    root = run_with(tmp_path, "layout", "csv")
    assert (root / "report.json").is_file()
    assert (root / "logs.txt").is_file()
    report = json.loads((root / "report.json").read_text())
    assert report["ticks"] == 12 and "timing" in report
    logs = (root / "logs.txt").read_text().splitlines()
    assert any("event=fulfil" in line for line in logs)


def test_gml_snapshot_round_trip(tmp_path):
    infra = line_infra((5.0, 7.0), cpu=8.0)
    env = Environment(infra)
    env.add_application(chain_app(n=3, cpu=2, lat=50, bw=10))
    g = default_step_events(env)
    snap = snapshot_callback(ticks=[2])
    g.add_callback(snap)
    g.connect("fulfil", snap.id)
    rep = Reporter(tmp_path, "gml")
    Simulation(SimulationConfig(max_ticks=4, run_id="gml"), env, g, rep).run()
    files = sorted(p.name for p in (rep.root / "snapshots").iterdir())
    assert files == ["snapshot_t2.gml"]
    back = read_infrastructure_gml(rep.root / "snapshots" / "snapshot_t2.gml")
    assert back.nodes == infra.nodes
    assert sorted(back.links) == sorted(infra.links)
    for n in infra.nodes:
        assert dict(back.capacity(n)) == dict(infra.capacity(n))
    text = (rep.root / "snapshots" / "snapshot_t2.gml").read_text()
    assert "residual_cpu" in text


def test_sim_time_rate(tmp_path):
    env = Environment(line_infra((1.0,)))
    g = default_step_events(env)
    cb = sim_time_callback()
    g.add_callback(cb)
    g.connect("fulfil", cb.id)
    sim = Simulation(SimulationConfig(max_ticks=5), env, g)
    report = sim.run()
    last = {r.subject: r.value for r in sim.records if r.callback == "sim_time" and r.tick == 5}
    assert last["ticks_per_s"] == pytest.approx(5 / last["wall_s"])
    assert report.ticks_per_s == pytest.approx(report.ticks / report.wall_time)


def test_host_usage_sampled_each_tick():
    from continuum.reporting import host_usage_callback

    env = Environment(line_infra((1.0,)))
    g = default_step_events(env)
    g.add_callback(host_usage_callback())
    g.connect("fulfil", "host_usage")
    sim = Simulation(SimulationConfig(max_ticks=4), env, g)
    sim.run()
    recs = [r for r in sim.records if r.callback == "host_usage"]
    assert [(r.tick, r.subject) for r in recs] == [(t, k) for t in range(1, 5) for k in ("cpu_percent", "rss_mb")]
    assert recs[1].value > 0


def test_reporting_does_not_mutate(tmp_path):
    a = run_with(tmp_path, "a", "csv")
    infra = line_infra((5.0, 7.0), cpu=8.0)
    env = Environment(infra)
    env.add_application(chain_app(n=3, cpu=2, lat=50, bw=10))
    plain = Simulation(SimulationConfig(max_ticks=12), env, default_step_events(env)).run()
    with_cb = json.loads((a / "report.json").read_text())
    assert with_cb["summary"] == canonical(plain.summary)
