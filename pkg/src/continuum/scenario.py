"""Scenario documents (YAML): parsing with line diagnostics, validation, and building.

A scenario names everything a run needs: assets, infrastructure, applications
with their strategies, update policies, callbacks and simulation settings.
See README.md for the schema.
"""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path as FsPath
from typing import Any, Mapping

import yaml

from . import dynamics
from .assets import AssetError, AssetSet, AssetSpec, default_link_assets, default_node_assets, default_path_assets
from .builders import KIND_DEFAULTS, InvalidParams, build_topology
from .emulation import BEHAVIOURS, Emulator
from .environment import Environment
from .graph import Application, GraphError, Infrastructure, read_infrastructure_gml
from .placement import STRATEGIES, make_strategy
from .reporting import CALLBACKS, Reporter, remote_metric_callback
from .simulation import (
    EventSpec,
    SimGraph,
    Simulation,
    SimulationConfig,
    Trigger,
    default_step_events,
    last_step_event,
)

TOP_KEYS = ("name", "description", "seed", "simulation", "assets", "infrastructure", "applications",
            "policies", "callbacks", "emulation", "sweep")
SIM_KEYS = ("max_ticks", "tick_period", "remote", "fail_fast", "format")
SWEEP_KEYS = ("topologies", "sizes", "strategies", "policies", "loads", "seeds")
FORMATS = ("csv", "json", "gml")


@dataclass
class Issue:
    path: str
    message: str
    line: int | None = None

    def __str__(self):
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.path or '<document>'}: {self.message}"


class ParseError(ValueError):
    def __init__(self, issues: list[Issue], source: str = "<config>"):
        self.issues = list(issues)
        self.source = source
        super().__init__("\n".join(f"{source}: {i}" for i in self.issues))


# -- YAML with line numbers ---------------------------------------------------------------------


def _line_map(text: str) -> dict[tuple, int]:
    """Map each key path (tuple of keys / indices) to its 1-based source line."""
    lines: dict[tuple, int] = {}
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return lines

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (k.value,)
                lines[key] = k.start_mark.line + 1
                walk(v, key)
                lines[key] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    if root is not None:
        walk(root, ())
    return lines


def _fmt_path(path: tuple) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


@dataclass
class ScenarioConfig:
    """Validated scenario document. ``to_dict`` / ``from_dict`` round-trip."""

    name: str = "scenario"
    description: str = ""
    seed: int = 0
    simulation: dict = field(default_factory=dict)
    assets: dict | None = None
    infrastructure: dict = field(default_factory=dict)
    applications: list = field(default_factory=list)
    policies: list = field(default_factory=list)
    callbacks: list = field(default_factory=list)
    emulation: dict = field(default_factory=dict)
    sweep: dict | None = None
    base_dir: str = field(default=".", compare=False, repr=False)

    @property
    def max_ticks(self) -> int:
        return int(self.simulation.get("max_ticks", 100))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name}
        if self.description:
            out["description"] = self.description
        out["seed"] = self.seed
        out["simulation"] = copy.deepcopy(self.simulation)
        if self.assets is not None:
            out["assets"] = copy.deepcopy(self.assets)
        out["infrastructure"] = copy.deepcopy(self.infrastructure)
        out["applications"] = copy.deepcopy(self.applications)
        out["policies"] = copy.deepcopy(self.policies)
        out["callbacks"] = copy.deepcopy(self.callbacks)
        if self.emulation:
            out["emulation"] = copy.deepcopy(self.emulation)
        if self.sweep is not None:
            out["sweep"] = copy.deepcopy(self.sweep)
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: Mapping, base_dir: str = ".", lines: dict | None = None,
                  source: str = "<config>") -> "ScenarioConfig":
        issues = validate(data, base_dir)
        if issues:
            lines = lines or {}
            for issue in issues:
                issue.line = _nearest_line(lines, issue._path)
            raise ParseError(issues, source)
        return cls(
            name=str(data.get("name", "scenario")),
            description=str(data.get("description", "")),
            seed=int(data.get("seed", 0)),
            simulation=dict(data.get("simulation") or {}),
            assets=copy.deepcopy(data.get("assets")),
            infrastructure=copy.deepcopy(dict(data.get("infrastructure") or {})),
            applications=copy.deepcopy(list(data.get("applications") or [])),
            policies=copy.deepcopy(list(data.get("policies") or [])),
            callbacks=copy.deepcopy(list(data.get("callbacks") or [])),
            emulation=copy.deepcopy(dict(data.get("emulation") or {})),
            sweep=copy.deepcopy(data.get("sweep")),
            base_dir=base_dir,
        )

    def replace(self, **changes) -> "ScenarioConfig":
        data = self.to_dict()
        data.update(changes)
        return ScenarioConfig.from_dict(data, self.base_dir)


def _nearest_line(lines: dict, path: tuple) -> int | None:
    while True:
        if path in lines:
            return lines[path]
        if not path:
            return None
        path = path[:-1]


def parse(text: str, base_dir: str = ".", source: str = "<config>") -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ParseError([Issue("", f"malformed YAML: {getattr(exc, 'problem', exc)}", line)], source) from None
    if not isinstance(data, dict):
        raise ParseError([Issue("", "a scenario must be a mapping", 1)], source)
    return ScenarioConfig.from_dict(data, base_dir, _line_map(text), source)


def load(path) -> ScenarioConfig:
    path = FsPath(path)
    return parse(path.read_text(), str(path.parent), str(path))


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("continuum.presets").iterdir() if p.name.endswith(".yaml"))


def preset_text(name: str) -> str:
    res = resources.files("continuum.presets") / f"{name}.yaml"
    if not res.is_file():
        raise ParseError([Issue("scenario", f"unknown preset {name!r}; available: {', '.join(preset_names())}")])
    return res.read_text()


def load_preset(name: str) -> ScenarioConfig:
    return parse(preset_text(name), ".", f"preset:{name}")


# -- validation ---------------------------------------------------------------------------------


class _Collector:
    def __init__(self):
        self.issues: list[Issue] = []

    def add(self, path: tuple, message: str):
        issue = Issue(_fmt_path(path), message)
        issue._path = path
        self.issues.append(issue)

    def expect(self, cond, path, message) -> bool:
        if not cond:
            self.add(path, message)
        return bool(cond)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _asset_sets(data: Mapping, c: _Collector | None = None):
    node, link = default_node_assets(), default_link_assets()
    spec = data.get("assets")
    if spec:
        try:
            if "node" in spec:
                node = AssetSet.from_list(spec["node"])
            if "link" in spec:
                link = AssetSet.from_list(spec["link"])
        except (AssetError, ValueError, TypeError, KeyError) as exc:
            if c is not None:
                c.add(("assets",), f"invalid asset declaration: {exc}")
    return node, link, default_path_assets(link)


def validate(data: Mapping, base_dir: str = ".") -> list[Issue]:
    """Every problem in the document, not just the first."""
    c = _Collector()
    if not isinstance(data, Mapping):
        c.add((), "a scenario must be a mapping")
        return c.issues
    for key in data:
        c.expect(key in TOP_KEYS, (key,), f"unknown section {key!r}")
    if "seed" in data:
        c.expect(_is_int(data["seed"]), ("seed",), "seed must be an integer")

    sim = data.get("simulation") or {}
    if c.expect(isinstance(sim, Mapping), ("simulation",), "must be a mapping"):
        for k in sim:
            c.expect(k in SIM_KEYS, ("simulation", k), f"unknown simulation field {k!r}")
        if "max_ticks" in sim:
            c.expect(_is_int(sim["max_ticks"]) and sim["max_ticks"] >= 1, ("simulation", "max_ticks"),
                     "max_ticks must be an integer >= 1")
        if "tick_period" in sim:
            c.expect(_is_num(sim["tick_period"]) and sim["tick_period"] >= 0, ("simulation", "tick_period"),
                     "tick_period must be a number >= 0")
        for k in ("remote", "fail_fast"):
            if k in sim:
                c.expect(isinstance(sim[k], bool), ("simulation", k), f"{k} must be true or false")
        if "format" in sim:
            c.expect(sim["format"] in FORMATS, ("simulation", "format"), f"format must be one of {FORMATS}")

    node_assets, link_assets, path_assets = _asset_sets(data, c)
    node_ids = _validate_infra(data.get("infrastructure"), c, node_assets, link_assets, base_dir)
    services = _validate_apps(data.get("applications"), c, node_assets, path_assets, node_ids)
    _validate_policies(data.get("policies") or [], c, node_ids, ("policies",))
    _validate_callbacks(data.get("callbacks") or [], c, bool(sim.get("remote", False)) if isinstance(sim, Mapping) else False)
    emu = data.get("emulation") or {}
    if c.expect(isinstance(emu, Mapping), ("emulation",), "must be a mapping"):
        for k in emu:
            c.expect(k in ("tick_ms", "timeout_factor"), ("emulation", k), f"unknown emulation field {k!r}")
        if "tick_ms" in emu:
            c.expect(_is_num(emu["tick_ms"]) and emu["tick_ms"] > 0, ("emulation", "tick_ms"), "tick_ms must be > 0")
    if data.get("sweep") is not None:
        _validate_sweep(data["sweep"], c, node_ids)
    return c.issues


def _validate_infra(infra, c: _Collector, node_assets, link_assets, base_dir) -> list[str] | None:
    path = ("infrastructure",)
    if not c.expect(isinstance(infra, Mapping), path, "an infrastructure section is required"):
        return None
    sources = [k for k in ("builder", "gml", "nodes") if k in infra]
    if not c.expect(len(sources) == 1, path, "give exactly one of builder, gml or nodes"):
        return None
    allowed = {"builder": ("builder", "size", "params", "seed", "load"),
               "gml": ("gml", "load"),
               "nodes": ("nodes", "links", "load")}[sources[0]]
    for k in infra:
        c.expect(k in allowed, path + (k,), f"unknown infrastructure field {k!r}")
    if "load" in infra:
        load = infra["load"]
        if isinstance(load, Mapping):
            for tier, f in load.items():
                c.expect(_is_num(f) and 0 <= f < 1, path + ("load", tier), "load fractions must be in [0, 1)")
        else:
            c.expect(_is_num(load) and 0 <= load < 1, path + ("load",), "load must be a fraction in [0, 1)")
    if sources[0] == "builder":
        kind = infra["builder"]
        if not c.expect(kind in KIND_DEFAULTS, path + ("builder",),
                        f"unknown builder {kind!r}; expected one of {sorted(KIND_DEFAULTS)}"):
            return None
        size = infra.get("size")
        if not c.expect(_is_int(size) and size >= 2, path + ("size",), "size must be an integer >= 2"):
            return None
        params = infra.get("params") or {}
        if not c.expect(isinstance(params, Mapping), path + ("params",), "params must be a mapping"):
            return None
        try:
            from .builders import _check
            _check(kind, size, params)
        except InvalidParams as exc:
            c.add(path + ("params",), str(exc))
            return None
        width = max(2, len(str(size - 1)))
        return [f"n{i:0{width}d}" for i in range(size)]
    if sources[0] == "gml":
        p = FsPath(base_dir) / str(infra["gml"])
        if not c.expect(p.is_file(), path + ("gml",), f"GML file {str(p)!r} not found"):
            return None
        try:
            return read_infrastructure_gml(p, node_assets, link_assets).nodes
        except Exception as exc:  # networkx raises a variety of errors on bad GML
            c.add(path + ("gml",), f"cannot read GML: {exc}")
            return None
    nodes = infra.get("nodes")
    if not c.expect(isinstance(nodes, list) and nodes, path + ("nodes",), "nodes must be a non-empty list"):
        return None
    ids: list[str] = []
    for i, n in enumerate(nodes):
        np_ = path + ("nodes", i)
        if not c.expect(isinstance(n, Mapping) and "id" in n, np_, "each node needs an id"):
            continue
        nid = str(n["id"])
        c.expect(nid not in ids, np_ + ("id",), f"duplicate node id {nid!r}")
        ids.append(nid)
        for k in n:
            c.expect(k in ("id", "tier", "capacity"), np_ + (k,), f"unknown node field {k!r}")
        try:
            node_assets.validate(n.get("capacity") or {})
        except (AssetError, ValueError, TypeError) as exc:
            c.add(np_ + ("capacity",), str(exc))
    seen = set()
    for i, link in enumerate(infra.get("links") or []):
        lp = path + ("links", i)
        if not c.expect(isinstance(link, Mapping) and "src" in link and "dst" in link, lp, "links need src and dst"):
            continue
        for end in ("src", "dst"):
            c.expect(str(link[end]) in ids, lp + (end,), f"unknown node {link[end]!r}")
        key = tuple(sorted((str(link["src"]), str(link["dst"]))))
        c.expect(key[0] != key[1], lp, "self-loops are not allowed")
        c.expect(key not in seen, lp, f"duplicate link {key}")
        seen.add(key)
        for k in link:
            c.expect(k in ("src", "dst", "capacity"), lp + (k,), f"unknown link field {k!r}")
        try:
            link_assets.validate(link.get("capacity") or {})
        except (AssetError, ValueError, TypeError) as exc:
            c.add(lp + ("capacity",), str(exc))
    return ids


def _validate_strategy(strategy, c: _Collector, path, services, node_ids):
    if isinstance(strategy, str):
        name, params = strategy, {}
    elif isinstance(strategy, Mapping) and "name" in strategy:
        name, params = strategy["name"], {k: v for k, v in strategy.items() if k != "name"}
    else:
        c.add(path, "strategy must be a name or a mapping with a name")
        return
    if not c.expect(name in STRATEGIES, path, f"unknown strategy {name!r}; expected one of {sorted(STRATEGIES)}"):
        return
    allowed = {"static": ("mapping",), "min_energy": ("weights", "mode")}.get(name, ())
    for k in params:
        c.expect(k in allowed, path + (k,), f"unknown parameter {k!r} for strategy {name}")
    if name == "static":
        mapping = params.get("mapping")
        if c.expect(isinstance(mapping, Mapping), path + ("mapping",), "static strategy needs a mapping"):
            for s in mapping:
                c.expect(s in services, path + ("mapping", s), f"unknown service {s!r}")
            # nodes are checked at validation time of the placement, not here
    if name == "min_energy" and "mode" in params:
        c.expect(params["mode"] in ("total", "delta"), path + ("mode",), "mode must be total or delta")
    if name == "min_energy" and "weights" in params:
        w = params["weights"]
        if c.expect(isinstance(w, Mapping), path + ("weights",), "weights must be a mapping"):
            for k, v in w.items():
                c.expect(_is_num(v) and v >= 0, path + ("weights", k), "weights must be non-negative numbers")


def _validate_apps(apps, c: _Collector, node_assets, path_assets, node_ids) -> dict:
    path = ("applications",)
    if not c.expect(isinstance(apps, list) and apps, path, "at least one application is required"):
        return {}
    out = {}
    for i, app in enumerate(apps):
        ap = path + (i,)
        if not c.expect(isinstance(app, Mapping) and "id" in app, ap, "each application needs an id"):
            continue
        aid = str(app["id"])
        c.expect(aid not in out, ap + ("id",), f"duplicate application id {aid!r}")
        for k in app:
            c.expect(k in ("id", "services", "interactions", "flows", "strategy"), ap + (k,),
                     f"unknown application field {k!r}")
        services = []
        svc = app.get("services")
        if c.expect(isinstance(svc, list) and svc, ap + ("services",), "services must be a non-empty list"):
            for j, s in enumerate(svc):
                sp = ap + ("services", j)
                if not c.expect(isinstance(s, Mapping) and "id" in s, sp, "each service needs an id"):
                    continue
                sid = str(s["id"])
                c.expect(sid not in services, sp + ("id",), f"duplicate service id {sid!r}")
                services.append(sid)
                for k in s:
                    c.expect(k in ("id", "requirements", "behaviour"), sp + (k,), f"unknown service field {k!r}")
                try:
                    node_assets.validate(s.get("requirements") or {})
                except (AssetError, ValueError, TypeError) as exc:
                    c.add(sp + ("requirements",), str(exc))
                if "behaviour" in s:
                    b = s["behaviour"]
                    name = b if isinstance(b, str) else (b.get("name") if isinstance(b, Mapping) else None)
                    c.expect(name in BEHAVIOURS, sp + ("behaviour",),
                             f"unknown behaviour {name!r}; expected one of {sorted(BEHAVIOURS)}")
        pairs = set()
        for j, it in enumerate(app.get("interactions") or []):
            ip = ap + ("interactions", j)
            if not c.expect(isinstance(it, Mapping) and "src" in it and "dst" in it, ip, "interactions need src and dst"):
                continue
            for end in ("src", "dst"):
                c.expect(str(it[end]) in services, ip + (end,), f"unknown service {it[end]!r}")
            pair = (str(it["src"]), str(it["dst"]))
            c.expect(pair not in pairs, ip, f"duplicate interaction {pair}")
            c.expect(pair[0] != pair[1], ip, "self-interactions are not allowed")
            pairs.add(pair)
            for k in it:
                c.expect(k in ("src", "dst", "requirements"), ip + (k,), f"unknown interaction field {k!r}")
            try:
                path_assets.validate(it.get("requirements") or {})
            except (AssetError, ValueError, TypeError) as exc:
                c.add(ip + ("requirements",), str(exc))
        for j, flow in enumerate(app.get("flows") or []):
            fp = ap + ("flows", j)
            if not c.expect(isinstance(flow, list) and flow, fp, "a flow is a non-empty list of services"):
                continue
            for a, b in zip(flow, flow[1:]):
                c.expect((str(a), str(b)) in pairs, fp, f"flow step {a}->{b} is not a declared interaction")
        _validate_strategy(app.get("strategy", "first_fit"), c, ap + ("strategy",), services, node_ids)
        out[aid] = services
    return out


def _validate_policies(policies, c: _Collector, node_ids, path):
    if not c.expect(isinstance(policies, list), path, "policies must be a list"):
        return
    for i, p in enumerate(policies):
        pp = path + (i,)
        if isinstance(p, str):
            try:
                dynamics.parse_policy(p, horizon=1)
            except dynamics.PolicyError as exc:
                c.add(pp, str(exc))
            continue
        if not c.expect(isinstance(p, Mapping) and "kind" in p, pp, "a policy is 'degrade(X)', 'kill(X)' or a mapping with a kind"):
            continue
        kind = p["kind"]
        allowed = {
            "degrade": ("kind", "floor", "horizon", "assets"),
            "kill": ("kind", "pct", "protect", "tiers"),
            "users": ("kind", "trace", "total", "period", "modifiers", "hub", "response_time", "cycle"),
            "link_failure": ("kind", "tick", "link", "factor"),
        }
        if not c.expect(kind in allowed, pp + ("kind",), f"unknown policy kind {kind!r}; expected one of {sorted(allowed)}"):
            continue
        for k in p:
            c.expect(k in allowed[kind], pp + (k,), f"unknown field {k!r} for {kind} policy")
        try:
            if kind == "degrade":
                dynamics.DegradePolicy(float(p.get("floor", 0)), p.get("horizon"))
            elif kind == "kill":
                dynamics.KillPolicy(float(p.get("pct", 0)))
            elif kind == "users":
                dynamics.UserLoadPolicy(dynamics.Trace(), tuple(tuple(m) for m in p.get("modifiers") or ()))
                trace = p.get("trace", "synthetic")
                c.expect(isinstance(trace, str), pp + ("trace",), "trace is 'synthetic' or a CSV path")
                c.expect(p.get("response_time", "mean") in (True, False, None, "mean", "source"),
                         pp + ("response_time",), "response_time is 'mean', 'source' or false")
            elif kind == "link_failure":
                c.expect(_is_int(p.get("tick")) and p["tick"] >= 1, pp + ("tick",), "tick must be an integer >= 1")
                link = p.get("link")
                if c.expect(isinstance(link, list) and len(link) == 2, pp + ("link",), "link is a [src, dst] pair"):
                    if node_ids is not None:
                        for end in link:
                            c.expect(str(end) in node_ids, pp + ("link",), f"unknown node {end!r}")
                dynamics.LinkFailurePolicy(1, ("a", "b"), float(p.get("factor", 10.0)))
        except (dynamics.PolicyError, ValueError, TypeError) as exc:
            c.add(pp, str(exc))
        if kind == "users" and node_ids is not None and p.get("hub") is not None:
            c.expect(str(p["hub"]) in node_ids, pp + ("hub",), f"unknown hub node {p['hub']!r}")


def _callback_name(cb):
    return cb if isinstance(cb, str) else (cb.get("name") if isinstance(cb, Mapping) else None)


def _validate_callbacks(callbacks, c: _Collector, remote: bool):
    path = ("callbacks",)
    if not c.expect(isinstance(callbacks, list), path, "callbacks must be a list"):
        return
    ids = set()
    for i, cb in enumerate(callbacks):
        cp = path + (i,)
        name = _callback_name(cb)
        known = name in CALLBACKS or name == "remote"
        if not c.expect(known, cp, f"unknown callback {name!r}; expected one of {sorted(CALLBACKS) + ['remote']}"):
            continue
        if isinstance(cb, Mapping):
            for k in cb:
                c.expect(k in ("name", "id", "mode", "after", "scope", "ticks", "metric", "every"), cp + (k,),
                         f"unknown callback field {k!r}")
            if "mode" in cb:
                c.expect(cb["mode"] in FORMATS + ("none",), cp + ("mode",), f"mode must be one of {FORMATS + ('none',)}")
            if "after" in cb:
                c.expect(cb["after"] in ("start", "step", "update", "lookup", "fulfil", "emulate", "stop"),
                         cp + ("after",), f"unknown event {cb['after']!r}")
            if name == "remote":
                c.expect(isinstance(cb.get("metric"), str), cp + ("metric",), "remote callbacks name a metric")
                c.expect(remote, cp, "remote callbacks need simulation.remote: true")
            if "every" in cb:
                c.expect(_is_int(cb["every"]) and cb["every"] >= 1, cp + ("every",), "every must be an integer >= 1")
            cid = cb.get("id", cb.get("metric") if name == "remote" else name)
        else:
            c.expect(name != "remote", cp, "remote callbacks need a mapping with a metric")
            cid = name
        c.expect(cid not in ids, cp, f"duplicate callback id {cid!r}")
        ids.add(cid)


def _validate_sweep(sweep, c: _Collector, node_ids):
    path = ("sweep",)
    if not c.expect(isinstance(sweep, Mapping), path, "sweep must be a mapping of value lists"):
        return
    for k, vals in sweep.items():
        if not c.expect(k in SWEEP_KEYS, path + (k,), f"unknown sweep parameter {k!r}; expected {SWEEP_KEYS}"):
            continue
        if not c.expect(isinstance(vals, list) and vals, path + (k,), "sweep values must be a non-empty list"):
            continue
        for j, v in enumerate(vals):
            vp = path + (k, j)
            if k == "topologies":
                c.expect(v in KIND_DEFAULTS, vp, f"unknown topology {v!r}")
            elif k == "sizes":
                c.expect(_is_int(v) and v >= 2, vp, "sizes must be integers >= 2")
            elif k == "strategies":
                c.expect(v in ("first_fit", "best_fit", "min_energy"), vp, f"unknown strategy {v!r}")
            elif k == "policies":
                try:
                    dynamics.parse_policy(str(v), horizon=1)
                except dynamics.PolicyError as exc:
                    c.add(vp, str(exc))
            elif k == "loads":
                c.expect(_is_num(v) and 0 <= v < 1, vp, "loads must be fractions in [0, 1)")
            elif k == "seeds":
                c.expect(_is_int(v), vp, "seeds must be integers")


# -- building -------------------------------------------------------------------------------------


@dataclass
class Scenario:
    config: ScenarioConfig
    env: Environment
    graph: SimGraph
    sim_config: SimulationConfig
    reporter: Reporter | None

    def simulation(self) -> Simulation:
        return Simulation(self.sim_config, self.env, self.graph, self.reporter)

    def run(self):
        return self.simulation().run()


def _build_infra(cfg: ScenarioConfig, node_assets, link_assets, path_assets) -> Infrastructure:
    spec = cfg.infrastructure
    if "builder" in spec:
        return build_topology(spec["builder"], int(spec["size"]), spec.get("params") or {},
                              seed=int(spec.get("seed", cfg.seed)), node_assets=node_assets,
                              link_assets=link_assets, path_assets=path_assets)
    if "gml" in spec:
        return read_infrastructure_gml(FsPath(cfg.base_dir) / spec["gml"], node_assets, link_assets, path_assets)
    infra = Infrastructure(cfg.name, node_assets, link_assets, path_assets)
    for n in spec["nodes"]:
        attrs = {"tier": n["tier"]} if "tier" in n else {}
        infra.add_node(str(n["id"]), n.get("capacity") or {}, **attrs)
    for link in spec.get("links") or []:
        infra.add_link(str(link["src"]), str(link["dst"]), link.get("capacity") or {})
    return infra


def _strategy(spec):
    if isinstance(spec, str):
        return make_strategy(spec)
    params = {k: v for k, v in spec.items() if k != "name"}
    return make_strategy(spec["name"], **params)


def _policy(spec, cfg: ScenarioConfig, infra: Infrastructure, env: Environment):
    horizon = cfg.max_ticks
    if isinstance(spec, str):
        return dynamics.parse_policy(spec, horizon=horizon)
    kind = spec["kind"]
    if kind == "degrade":
        assets = tuple(spec["assets"]) if spec.get("assets") else None
        return dynamics.DegradePolicy(float(spec.get("floor", 0)), int(spec.get("horizon", horizon)), assets)
    if kind == "kill":
        tiers = tuple(spec["tiers"]) if spec.get("tiers") else None
        return dynamics.KillPolicy(float(spec["pct"]), protect=tuple(spec.get("protect") or ()), tiers=tiers)
    if kind == "users":
        trace_spec = spec.get("trace", "synthetic")
        if trace_spec == "synthetic":
            trace = dynamics.synthetic_trace(infra.nodes, cfg.max_ticks, int(spec.get("total", 3000)),
                                             int(spec.get("period", 10)), seed=cfg.seed,
                                             cycle=int(spec.get("cycle", 500)))
        else:
            trace = dynamics.load_trace_csv(FsPath(cfg.base_dir) / trace_spec)
        hub = str(spec["hub"]) if spec.get("hub") is not None else infra.nodes[0]
        env.hub = hub
        rt = spec.get("response_time", "mean")
        env.user_delay_in_rt = "mean" if rt is True else (rt or False)
        return dynamics.UserLoadPolicy(trace, tuple(tuple(m) for m in spec.get("modifiers") or ()), hub)
    if kind == "link_failure":
        return dynamics.LinkFailurePolicy(int(spec["tick"]), tuple(str(x) for x in spec["link"]),
                                          float(spec.get("factor", 10.0)))
    raise dynamics.PolicyError(f"unknown policy kind {kind!r}")


def _apply_load(env: Environment, load) -> None:
    if not load:
        return
    for node in env.infra.nodes:
        if isinstance(load, Mapping):
            frac = load.get(env.infra.node_attrs(node).get("tier"), 0.0)
        else:
            frac = load
        if frac:
            env.residual.set_load(node, float(frac))


def _every(fn, n):
    def handler(ctx):
        if ctx.tick % n:
            return None
        return fn(ctx)
    return handler


def build(cfg: ScenarioConfig, seed: int | None = None, ticks: int | None = None, out: str | None = None,
          fmt: str | None = None, run_id: str | None = None, fail_fast: bool | None = None) -> Scenario:
    """Instantiate environment, event graph and settings; writes nothing yet."""
    if ticks is not None:
        cfg = cfg.replace(simulation={**cfg.simulation, "max_ticks": int(ticks)})
    if seed is not None:
        cfg = cfg.replace(seed=int(seed))
    sim = cfg.simulation
    node_assets, link_assets, path_assets = _asset_sets(cfg.to_dict())
    infra = _build_infra(cfg, node_assets, link_assets, path_assets)
    env = Environment(infra)
    behaviours: dict[str, dict] = {}
    for a in cfg.applications:
        app = Application(str(a["id"]), node_assets, path_assets)
        for s in a["services"]:
            app.add_service(str(s["id"]), s.get("requirements") or {})
            if "behaviour" in s:
                b = s["behaviour"]
                name, params = (b, {}) if isinstance(b, str) else (b["name"], b.get("params") or {})
                behaviours.setdefault(app.id, {})[str(s["id"])] = (name, params)
        for it in a.get("interactions") or []:
            app.add_interaction(str(it["src"]), str(it["dst"]), it.get("requirements") or {})
        for flow in a.get("flows") or []:
            app.add_flow([str(x) for x in flow])
        env.add_application(app, _strategy(a.get("strategy", "first_fit")))
    _apply_load(env, cfg.infrastructure.get("load"))
    env.policies = [_policy(p, cfg, infra, env) for p in cfg.policies]

    remote = bool(sim.get("remote", False))
    if remote:
        emu = cfg.emulation
        env.emulator = Emulator(env, float(emu.get("tick_ms", 1000.0)), seed=cfg.seed, behaviours=behaviours,
                                timeout_factor=float(emu.get("timeout_factor", 10.0)))
    graph = default_step_events(env, remote=remote)
    default_mode = fmt or sim.get("format", "csv")
    anchor = last_step_event(graph)
    for cb in cfg.callbacks:
        name = _callback_name(cb)
        opts = cb if isinstance(cb, Mapping) else {}
        if name == "remote":
            spec = remote_metric_callback(opts["metric"], opts.get("id"), opts.get("mode", default_mode))
        elif name == "snapshot":
            spec = CALLBACKS[name](opts.get("id", name), opts.get("ticks"))
        elif name == "assets":
            spec = CALLBACKS[name](opts.get("id", name), opts.get("scope", "node"), opts.get("mode", default_mode))
        else:
            mode = opts.get("mode", default_mode)
            spec = CALLBACKS[name](opts.get("id", name), "csv" if mode == "gml" else mode)
        if opts.get("every"):
            spec.handler = _every(spec.handler, int(opts["every"]))
        graph.add_event(spec)
        graph.connect(opts.get("after", anchor), spec.id)

    sim_cfg = SimulationConfig(
        max_ticks=cfg.max_ticks,
        tick_period=float(sim.get("tick_period", 0.0)),
        seed=cfg.seed,
        output=out,
        remote=remote,
        fail_fast=bool(sim.get("fail_fast", False)) if fail_fast is None else fail_fast,
        run_id=run_id or f"{cfg.name}-s{cfg.seed}",
    )
    reporter = Reporter(out, sim_cfg.run_id) if out is not None else None
    return Scenario(cfg, env, graph, sim_cfg, reporter)


# -- sweeps ---------------------------------------------------------------------------------------


def sweep_points(cfg: ScenarioConfig) -> list[dict]:
    """Cross product of the sweep block, in a fixed nesting order."""
    sw = cfg.sweep or {}
    infra = cfg.infrastructure
    axes = {
        "topology": sw.get("topologies", [infra.get("builder", "hierarchical")]),
        "size": sw.get("sizes", [infra.get("size", 50)]),
        "strategy": sw.get("strategies", [None]),
        "policy": sw.get("policies", [None]),
        "load": sw.get("loads", [infra.get("load", 0.0) if not isinstance(infra.get("load"), Mapping) else 0.0]),
        "seed": sw.get("seeds", [cfg.seed]),
    }
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def sweep_size(cfg: ScenarioConfig) -> int:
    n = 1
    for vals in (cfg.sweep or {}).values():
        n *= len(vals)
    return n


def run_id_for(point: Mapping) -> str:
    policy = re.sub(r"[^A-Za-z0-9.]+", "", str(point["policy"])) if point["policy"] else "none"
    strategy = point["strategy"] or "config"
    return f"{point['topology']}-{point['size']}-{strategy}-{policy}-load{point['load']:g}-s{point['seed']}"


def config_for_point(cfg: ScenarioConfig, point: Mapping) -> ScenarioConfig:
    data = cfg.to_dict()
    data.pop("sweep", None)
    infra = dict(data["infrastructure"])
    infra.pop("gml", None)
    infra.pop("nodes", None)
    infra.pop("links", None)
    infra["builder"] = point["topology"]
    infra["size"] = int(point["size"])
    if infra.get("params"):
        allowed = set(KIND_DEFAULTS[point["topology"]]) | {"scale", "tier_weights"}
        infra["params"] = {k: v for k, v in infra["params"].items() if k in allowed}
    infra["load"] = float(point["load"])
    infra.pop("seed", None)
    data["infrastructure"] = infra
    data["seed"] = int(point["seed"])
    if point["strategy"]:
        for app in data["applications"]:
            app["strategy"] = point["strategy"]
    if point["policy"]:
        data["policies"] = [str(point["policy"])] + [
            p for p in data.get("policies", []) if isinstance(p, Mapping) and p.get("kind") not in ("degrade", "kill")
        ]
    return ScenarioConfig.from_dict(data, cfg.base_dir)


def config_digest(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:12]
