"""Metric callbacks and the csv / json / gml sinks of a run directory.

Run layout::

    <out>/<run-id>/report.json
    <out>/<run-id>/logs.txt
    <out>/<run-id>/metrics/<callback>.csv   (csv callbacks)
    <out>/<run-id>/metrics/records.json     (json callbacks, tick -> callback -> subject)
    <out>/<run-id>/snapshots/<callback>_t<tick>.gml
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Any, Iterable

from .graph import BrokenPath, path_latency, write_infrastructure_gml
from .simulation import EventSpec

log = logging.getLogger(__name__)

CSV_HEADER = ["tick", "callback", "scope", "subject", "value"]


@dataclass(frozen=True)
class ReportRecord:
    tick: int
    callback: str
    scope: str
    subject: Any
    value: Any


# -- canonical encoding -------------------------------------------------------------------


def subject_str(subject) -> str:
    if isinstance(subject, tuple):
        if len(subject) == 2 and isinstance(subject[1], tuple):
            return f"{subject[0]}/{subject[1][0]}->{subject[1][1]}"
        return "/".join(str(s) for s in subject)
    return str(subject)


def canonical(value):
    """JSON-ready form: floats to 9 significant digits, sets as sorted lists."""
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        out = float(f"{value:.9g}")
        return int(out) if out.is_integer() and abs(out) < 1e15 else out
    if isinstance(value, (set, frozenset)):
        return sorted(canonical(v) for v in value)
    if isinstance(value, dict) or hasattr(value, "items"):
        return {str(k): canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [canonical(v) for v in value]
    if hasattr(value, "item"):  # numpy scalar
        return canonical(value.item())
    return str(value)


def encode_cell(value) -> str:
    value = canonical(value)
    if value is None:
        return ""
    if isinstance(value, (dict, list)):
        return json.dumps(value, separators=(",", ":"))
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def decode_cell(text: str):
    if text == "":
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["tick"] = int(r["tick"])
        r["value"] = decode_cell(r["value"])
    return rows


def write_records(records: Iterable[ReportRecord], mode: str, path) -> None:
    """Write records in one go (csv rows or nested json); used outside a live run."""
    records = list(records)
    if mode == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in records:
                w.writerow([r.tick, r.callback, r.scope, subject_str(r.subject), encode_cell(r.value)])
    elif mode == "json":
        with open(path, "w") as fh:
            json.dump(nest(records), fh, indent=1)
            fh.write("\n")
    else:
        raise ValueError(f"records cannot be written as {mode!r}")


def nest(records: Iterable[ReportRecord]) -> dict:
    doc: dict = {}
    for r in records:
        doc.setdefault(str(r.tick), {}).setdefault(r.callback, {})[subject_str(r.subject)] = canonical(r.value)
    return doc


# -- sinks ------------------------------------------------------------------------------------


class Reporter:
    """Streams callback records of one run to its output directory."""

    def __init__(self, out_dir, run_id: str = "run", log_events: bool = True):
        self.root = FsPath(out_dir) / run_id
        self.run_id = run_id
        self.log_events = log_events
        self._csv: dict[str, Any] = {}
        self._json: dict = {}
        self._handler = None
        self._saved_level = None

    @property
    def metrics_dir(self) -> FsPath:
        return self.root / "metrics"

    @property
    def snapshots_dir(self) -> FsPath:
        return self.root / "snapshots"

    def open(self, sim) -> None:
        self.metrics_dir.mkdir(parents=True, exist_ok=True)
        (self.root / "report.json").unlink(missing_ok=True)
        self._handler = logging.FileHandler(self.root / "logs.txt", mode="w")
        self._handler.setFormatter(logging.Formatter("%(message)s"))
        logger = logging.getLogger("continuum.events")
        self._saved_level = logger.level
        logger.setLevel(logging.INFO if self.log_events else logging.WARNING)
        logger.addHandler(self._handler)

    def emit(self, cb: EventSpec, records: list[ReportRecord], sim) -> None:
        mode = cb.report_mode
        if mode == "csv":
            fh = self._csv.get(cb.id)
            if fh is None:
                fh = open(self.metrics_dir / f"{cb.id}.csv", "w", newline="")
                fh.write(",".join(CSV_HEADER) + "\n")
                self._csv[cb.id] = fh
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            for r in records:
                w.writerow([r.tick, r.callback, r.scope, subject_str(r.subject), encode_cell(r.value)])
            fh.write(buf.getvalue())
        elif mode == "json":
            for r in records:
                self._json.setdefault(str(r.tick), {}).setdefault(r.callback, {})[subject_str(r.subject)] = canonical(r.value)
        elif mode == "gml":
            self.snapshots_dir.mkdir(parents=True, exist_ok=True)
            write_infrastructure_gml(sim.env.infra, self.snapshots_dir / f"{cb.id}_t{sim.tick}.gml",
                                     residual=sim.env.residual)

    def end_tick(self, sim) -> None:
        for fh in self._csv.values():
            fh.flush()

    def close(self, sim, report) -> None:
        for fh in self._csv.values():
            fh.close()
        self._csv.clear()
        if self._json:
            with open(self.metrics_dir / "records.json", "w") as fh:
                json.dump(self._json, fh, indent=1)
                fh.write("\n")
        with open(self.root / "report.json", "w") as fh:
            json.dump(canonical(report.to_dict()), fh, indent=1, sort_keys=True)
            fh.write("\n")
        logger = logging.getLogger("continuum.events")
        if self._handler is not None:
            logger.removeHandler(self._handler)
            self._handler.close()
            self._handler = None
        if self._saved_level is not None:
            logger.setLevel(self._saved_level)


# -- metrics ------------------------------------------------------------------------------------


def metric_assets(env, scope: str = "node") -> list[tuple]:
    """``[(subject/asset, {residual, capacity})]`` for every node or link asset."""
    out = []
    if scope == "node":
        for node in env.infra.nodes:
            cap = env.infra.capacity(node)
            res = env.residual.node_residual(node)
            for a, c in cap.items():
                out.append((f"{node}/{a}", {"residual": res.get(a, c), "capacity": c}))
    elif scope == "link":
        for a, b in env.infra.links:
            cap = env.infra.link_capacity(a, b)
            res = env.residual.link_residual(a, b)
            for name, c in cap.items():
                out.append((f"{a}-{b}/{name}", {"residual": res.get(name, c), "capacity": c}))
    else:
        raise ValueError(f"assets are monitored at node or link scope, not {scope!r}")
    return out


def metric_placement_state(env) -> list[tuple]:
    out = []
    for app_id in env.apps:
        pl = env.placements[app_id]
        out.append((app_id, {
            "status": pl.status,
            "mapping": dict(pl.mapping),
            "success_rate": env.success_rate(app_id),
        }))
    return out


def metric_placement_success(env) -> list[tuple]:
    return [(a, env.success_rate(a)) for a in env.apps]


def flow_response_time(env, app_id: str, flow) -> float | None:
    pl = env.placements[app_id]
    if pl.status != "fulfilled":
        return None
    paths = env.residual.paths.get(app_id, {})
    total = 0.0
    for s in flow:
        total += float(env.infra.capacity(pl.mapping[s]).get("processing_time", 0.0))
    for a, b in zip(flow, flow[1:]):
        path = paths.get((a, b))
        if path is None:
            return None
        try:
            total += path_latency(env.infra, path)
        except BrokenPath:
            return None
    return total


def metric_response_time(env) -> list[tuple]:
    """Per flow and per application (critical path, plus user delay when enabled).

    ``env.user_delay_in_rt`` is falsy (off), ``"mean"``/True (mean delay over nodes that
    reach the hub) or ``"source"`` (delay at the node hosting each flow's first service).
    """
    from .dynamics import user_delays

    mode = env.user_delay_in_rt
    delays = user_delays(env) if mode else {}
    mean = sum(delays.values()) / len(delays) if delays else None
    out = []
    for app_id, app in env.apps.items():
        flows = app.flows or [tuple(app.services)[:1]]
        values = []
        for f in flows:
            v = flow_response_time(env, app_id, f)
            if v is not None and mode == "source":
                d = delays.get(env.placements[app_id].mapping[f[0]])
                v = None if d is None else v + d
            values.append(v)
        for i, v in enumerate(values):
            out.append((f"{app_id}/flow{i}", v))
        if any(v is None for v in values) or not values:
            out.append((app_id, None))
        else:
            rt = max(values)
            if mode != "source" and mean is not None:
                rt += mean
            out.append((app_id, rt))
    return out


def metric_alive_nodes(env) -> int:
    return len(env.infra.active_nodes())


def metric_user_count(env) -> int:
    return int(sum(env.users.values()))


def metric_user_delay(env) -> float | None:
    from .dynamics import mean_user_delay

    return mean_user_delay(env)


class _SimTime:
    def __call__(self, ctx):
        wall = time.perf_counter() - ctx.sim._t0 if getattr(ctx.sim, "_t0", None) else 0.0
        return {"wall_s": wall, "ticks_per_s": ctx.tick / wall if wall > 0 else 0.0}


def _host_usage(ctx):
    import psutil

    proc = psutil.Process(os.getpid())
    return {"cpu_percent": proc.cpu_percent(interval=None), "rss_mb": proc.memory_info().rss / 2 ** 20}


# Callback factories: each returns an EventSpec ready to be attached to an event.

def _cb(id, fn, scope, report_mode, **params):
    return EventSpec(id, fn, scope, True, report_mode, params=params)


def assets_callback(id="assets", scope="node", report_mode="csv"):
    return _cb(id, lambda ctx: metric_assets(ctx.env, scope), scope, report_mode)


def placement_state_callback(id="placement_state", report_mode="json"):
    return _cb(id, lambda ctx: metric_placement_state(ctx.env), "application", report_mode)


def placement_success_callback(id="placement_success", report_mode="csv"):
    return _cb(id, lambda ctx: metric_placement_success(ctx.env), "application", report_mode)


def response_time_callback(id="response_time", report_mode="csv"):
    return _cb(id, lambda ctx: metric_response_time(ctx.env), "application", report_mode)


def alive_nodes_callback(id="alive_nodes", report_mode="csv"):
    return _cb(id, lambda ctx: metric_alive_nodes(ctx.env), "infrastructure", report_mode)


def user_count_callback(id="user_count", report_mode="csv"):
    return _cb(id, lambda ctx: metric_user_count(ctx.env), "infrastructure", report_mode)


def user_delay_callback(id="user_delay", report_mode="csv"):
    return _cb(id, lambda ctx: metric_user_delay(ctx.env), "infrastructure", report_mode)


def sim_time_callback(id="sim_time", report_mode="csv"):
    return _cb(id, _SimTime(), "simulation", report_mode)


def host_usage_callback(id="host_usage", report_mode="csv"):
    return _cb(id, _host_usage, "simulation", report_mode)


def snapshot_callback(id="snapshot", ticks=None):
    """GML snapshot of the infrastructure with residuals, at ``ticks`` (every tick if None)."""
    wanted = None if ticks is None else frozenset(int(t) for t in ticks)

    def handler(ctx):
        return wanted is None or ctx.tick in wanted

    return _cb(id, handler, "infrastructure", "gml")


def remote_metric_callback(name: str, id: str | None = None, report_mode="csv"):
    """Values produced inside actors, collected by the emulator during the tick."""
    def handler(ctx):
        emu = ctx.env.emulator
        if emu is None:
            return None
        return emu.collect(name, ctx.tick)

    return EventSpec(id or name, handler, "service", True, report_mode, remote=True)


CALLBACKS = {
    "assets": assets_callback,
    "placement_state": placement_state_callback,
    "placement_success": placement_success_callback,
    "response_time": response_time_callback,
    "alive_nodes": alive_nodes_callback,
    "user_count": user_count_callback,
    "user_delay": user_delay_callback,
    "sim_time": sim_time_callback,
    "host_usage": host_usage_callback,
    "snapshot": snapshot_callback,
}
