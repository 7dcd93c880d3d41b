"""Simulation graph of triggers, events and callbacks; plan compilation; the tick loop.

A trigger starts a workflow: its events run depth-first in edge-insertion
order, and each event's callbacks run right after it, before its children.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from .rng import RngStreams

log = logging.getLogger(__name__)
# per-event lines; routed to a run's logs.txt by the reporter, silent otherwise
events_log = logging.getLogger("continuum.events")
events_log.propagate = False
events_log.addHandler(logging.NullHandler())

SCOPES = ("simulation", "infrastructure", "application", "node", "service", "link", "interaction")
REPORT_MODES = ("csv", "json", "gml", "none")
TRIGGER_VARIANTS = ("manual", "periodic", "scheduled", "random", "cascade")


class SimulationError(Exception):
    pass


class GraphStructureError(SimulationError, ValueError):
    pass


class CycleError(GraphStructureError):
    pass


class OrphanEvent(GraphStructureError):
    pass


class MultiParentCallback(GraphStructureError):
    pass


class UnknownTrigger(SimulationError, LookupError):
    pass


class NotManual(SimulationError, ValueError):
    pass


class HandlerFailure(SimulationError):
    """Raised out of :meth:`Simulation.run` when ``fail_fast`` is set."""


@dataclass(frozen=True)
class Trigger:
    id: str
    variant: str = "manual"
    interval: int | None = None
    ticks: tuple = ()
    prob: float | None = None
    stream: str | None = None
    source: str | None = None

    def __post_init__(self):
        if self.variant not in TRIGGER_VARIANTS:
            raise ValueError(f"unknown trigger variant {self.variant!r}")
        if self.variant == "periodic" and (self.interval is None or int(self.interval) < 1):
            raise ValueError("periodic interval must be >= 1")
        if self.variant == "scheduled":
            ticks = tuple(int(t) for t in self.ticks)
            if any(b <= a for a, b in zip(ticks, ticks[1:])):
                raise ValueError("scheduled ticks must be strictly increasing")
            object.__setattr__(self, "ticks", ticks)
        if self.variant == "random" and not (self.prob is not None and 0.0 < self.prob <= 1.0):
            raise ValueError("random trigger probability must be in (0, 1]")
        if self.variant == "cascade" and not self.source:
            raise ValueError("cascade triggers need a source event")

    @classmethod
    def manual(cls, id):
        return cls(id)

    @classmethod
    def periodic(cls, id, interval=1):
        return cls(id, "periodic", interval=int(interval))

    @classmethod
    def scheduled(cls, id, ticks):
        return cls(id, "scheduled", ticks=tuple(ticks))

    @classmethod
    def random(cls, id, prob, stream=None):
        return cls(id, "random", prob=float(prob), stream=stream)

    @classmethod
    def cascade(cls, id, source):
        return cls(id, "cascade", source=source)

    def fires_at(self, tick: int, rngs: RngStreams | None = None) -> bool:
        if self.variant == "periodic":
            return tick % self.interval == 0
        if self.variant == "scheduled":
            return tick in self.ticks
        if self.variant == "random":
            # one draw per tick, whether or not it fires
            return float(rngs.get(self.stream or f"trigger/{self.id}").random()) < self.prob
        return False


@dataclass
class EventSpec:
    id: str
    handler: Callable | None = None
    scope: str = "simulation"
    is_callback: bool = False
    report_mode: str = "none"
    remote: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.report_mode not in REPORT_MODES:
            raise ValueError(f"unknown report mode {self.report_mode!r}")
        if self.report_mode != "none" and not self.is_callback:
            raise ValueError("only callbacks report")


def callback(id, handler, scope="simulation", report_mode="csv", **kw) -> EventSpec:
    return EventSpec(id, handler, scope, True, report_mode, **kw)


class SimGraph:
    """Triggers live in their own id space; events and callbacks share another."""

    def __init__(self):
        self.triggers: dict[str, Trigger] = {}
        self.events: dict[str, EventSpec] = {}
        self._roots: dict[str, list[str]] = {}
        self._children: dict[str, list[str]] = {}
        self._parents: dict[str, list[str]] = {}

    def add_trigger(self, trigger: Trigger) -> Trigger:
        if trigger.id in self.triggers:
            raise GraphStructureError(f"duplicate trigger {trigger.id!r}")
        self.triggers[trigger.id] = trigger
        self._roots[trigger.id] = []
        return trigger

    def add_event(self, event: EventSpec) -> EventSpec:
        if event.id in self.events:
            raise GraphStructureError(f"duplicate event {event.id!r}")
        self.events[event.id] = event
        self._children[event.id] = []
        self._parents[event.id] = []
        return event

    def add_callback(self, event: EventSpec) -> EventSpec:
        if not event.is_callback:
            event = EventSpec(event.id, event.handler, event.scope, True, event.report_mode,
                              event.remote, dict(event.params))
        return self.add_event(event)

    def attach(self, trigger_id: str, event_id: str) -> None:
        """Trigger ``trigger_id`` activates ``event_id``."""
        if trigger_id not in self.triggers:
            raise UnknownTrigger(trigger_id)
        ev = self._event(event_id)
        if ev.is_callback:
            raise GraphStructureError(f"callback {event_id!r} must be activated by an event, not a trigger")
        self._roots[trigger_id].append(event_id)

    def connect(self, src: str, dst: str) -> None:
        """Event ``src`` activates event or callback ``dst``."""
        s = self._event(src)
        self._event(dst)
        if s.is_callback:
            raise GraphStructureError(f"callback {src!r} cannot activate anything")
        if dst in self._children[src]:
            raise GraphStructureError(f"duplicate edge {src}->{dst}")
        self._children[src].append(dst)
        self._parents[dst].append(src)

    def chain(self, *ids: str) -> None:
        for a, b in zip(ids, ids[1:]):
            self.connect(a, b)

    def _event(self, eid: str) -> EventSpec:
        try:
            return self.events[eid]
        except KeyError:
            raise GraphStructureError(f"unknown event {eid!r}") from None

    def children(self, eid: str) -> list[str]:
        return list(self._children[eid])

    def parents(self, eid: str) -> list[str]:
        return list(self._parents[eid])

    def roots(self, tid: str) -> list[str]:
        return list(self._roots[tid])

    def merge(self, other: "SimGraph") -> "SimGraph":
        for t in other.triggers.values():
            self.add_trigger(t)
        for e in other.events.values():
            self.add_event(e)
        for t, roots in other._roots.items():
            for e in roots:
                self.attach(t, e)
        for e, kids in other._children.items():
            for k in kids:
                self.connect(e, k)
        return self


@dataclass(frozen=True)
class Step:
    event: str
    callback: bool
    parent: str | None


@dataclass
class ExecutionPlan:
    triggers: dict[str, Trigger]
    events: dict[str, EventSpec]
    workflows: dict[str, tuple[Step, ...]]

    def sequence(self, trigger_id: str) -> list[str]:
        return [s.event for s in self.workflows[trigger_id]]

    def notation(self, trigger_id: str) -> str:
        """Render a workflow as ``e1,(c1),e2`` with each event's callbacks grouped."""
        parts: list[str] = []
        group: list[str] = []
        for step in self.workflows[trigger_id]:
            if step.callback:
                group.append(step.event)
                continue
            if group:
                parts.append("(" + ",".join(group) + ")")
                group = []
            parts.append(step.event)
        if group:
            parts.append("(" + ",".join(group) + ")")
        return ",".join(parts)

    def __eq__(self, other):
        if not isinstance(other, ExecutionPlan):
            return NotImplemented
        return (self.workflows == other.workflows and self.triggers == other.triggers
                and list(self.events) == list(other.events))


def compile(graph: SimGraph, single_parent_callbacks: bool = False) -> ExecutionPlan:
    """Validate the graph and resolve each trigger into its depth-first event sequence.

    With ``single_parent_callbacks`` a callback activated by more than one
    event is rejected; by default such a callback runs after each of them.
    """
    # cycle detection over event edges (iterative three-colour DFS)
    colour = dict.fromkeys(graph.events, 0)
    for start in graph.events:
        if colour[start]:
            continue
        stack = [(start, iter(graph._children[start]))]
        colour[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = 2
                stack.pop()
            elif colour[nxt] == 1:
                raise CycleError(f"cycle through {nxt!r}")
            elif colour[nxt] == 0:
                colour[nxt] = 1
                stack.append((nxt, iter(graph._children[nxt])))

    for eid, ev in graph.events.items():
        if ev.is_callback:
            parents = graph._parents[eid]
            if not parents:
                raise OrphanEvent(f"callback {eid!r} has no activating event")
            if single_parent_callbacks and len(parents) > 1:
                raise MultiParentCallback(f"callback {eid!r} is activated by {parents}")

    for t in graph.triggers.values():
        if t.variant == "cascade" and t.source not in graph.events:
            raise OrphanEvent(f"cascade trigger {t.id!r} watches unknown event {t.source!r}")

    workflows: dict[str, tuple[Step, ...]] = {}
    reached: set[str] = set()
    for tid in sorted(graph.triggers):
        steps: list[Step] = []
        seen: set[str] = set()

        def visit(eid: str, parent: str | None):
            seen.add(eid)
            steps.append(Step(eid, False, parent))
            kids = graph._children[eid]
            for k in kids:
                if graph.events[k].is_callback:
                    steps.append(Step(k, True, eid))
            for k in kids:
                if not graph.events[k].is_callback and k not in seen:
                    visit(k, eid)

        for root in graph._roots[tid]:
            if root not in seen:
                visit(root, None)
        workflows[tid] = tuple(steps)
        reached |= seen

    for eid, ev in graph.events.items():
        if not ev.is_callback and eid not in reached:
            raise OrphanEvent(f"event {eid!r} is not reachable from any trigger")
    return ExecutionPlan(dict(graph.triggers), dict(graph.events), workflows)


# -- execution ---------------------------------------------------------------------------


@dataclass
class SimulationConfig:
    max_ticks: int = 100
    tick_period: float = 0.0
    seed: int = 0
    output: str | None = None
    remote: bool = False
    fail_fast: bool = False
    run_id: str = "run"

    def __post_init__(self):
        if int(self.max_ticks) < 1:
            raise ValueError("max_ticks must be >= 1")
        if self.tick_period < 0:
            raise ValueError("tick_period must be >= 0")


@dataclass
class RunReport:
    run_id: str
    seed: int
    ticks: int
    event_counts: dict
    failures: dict
    wall_time: float = 0.0
    summary: dict = field(default_factory=dict)

    @property
    def ticks_per_s(self) -> float:
        return self.ticks / self.wall_time if self.wall_time > 0 else float("inf")

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "run_id": self.run_id,
            "seed": self.seed,
            "ticks": self.ticks,
            "event_counts": dict(self.event_counts),
            "failures": dict(self.failures),
            "summary": self.summary,
        }
        if timing:
            out["timing"] = {"wall_time_s": round(self.wall_time, 6), "ticks_per_s": round(self.ticks_per_s, 3)}
        return out


@dataclass
class EventContext:
    sim: "Simulation"
    event: EventSpec
    tick: int
    parent: str | None

    @property
    def env(self):
        return self.sim.env

    @property
    def params(self) -> dict:
        return self.event.params

    def rng(self, name: str = "default"):
        return self.sim.rngs.get(f"event/{self.event.id}/{name}")

    def result(self, event_id: str | None = None):
        """Return value of an event that already ran this tick (default: the activating one)."""
        return self.sim.results.get(event_id or self.parent)

    def subjects(self) -> list:
        env = self.env
        scope = self.event.scope
        if scope == "node":
            return list(env.infra.nodes)
        if scope == "link":
            return list(env.infra.links)
        if scope == "application":
            return list(env.apps)
        if scope == "service":
            return [(a, s) for a, app in env.apps.items() for s in app.services]
        if scope == "interaction":
            return [(a, i) for a, app in env.apps.items() for i in app.interactions]
        return ["-"]


def _records(tick, cb: EventSpec, value) -> list:
    from .reporting import ReportRecord

    if value is None:
        return []
    if isinstance(value, Mapping):
        items = value.items()
    elif isinstance(value, list):
        items = value
    else:
        items = [("-", value)]
    return [ReportRecord(tick, cb.id, cb.scope, subject, v) for subject, v in items]


class Simulation:
    def __init__(self, config: SimulationConfig, env, plan: ExecutionPlan | SimGraph, reporter=None):
        self.config = config
        self.env = env
        self.plan = plan if isinstance(plan, ExecutionPlan) else compile(plan)
        self.reporter = reporter
        self.rngs = RngStreams(config.seed)
        self.tick = 0
        self.results: dict[str, Any] = {}
        self.event_counts = {eid: 0 for eid in self.plan.events}
        self.failures = {eid: 0 for eid in self.plan.events}
        self.records: list = []
        self._manual: list[str] = []
        self._completed: set[str] = set()
        self._cascade_fired: set[str] = set()
        self._cascades = sorted(
            (t for t in self.plan.triggers.values() if t.variant == "cascade"), key=lambda t: t.id
        )
        self._timed = [
            t for tid, t in sorted(self.plan.triggers.items()) if t.variant not in ("manual", "cascade")
        ]
        self.wall_time = 0.0

    def fire_manual(self, trigger_id: str) -> None:
        trig = self.plan.triggers.get(trigger_id)
        if trig is None:
            raise UnknownTrigger(trigger_id)
        if trig.variant != "manual":
            raise NotManual(f"trigger {trigger_id!r} is {trig.variant}")
        self._manual.append(trigger_id)

    # -- workflow execution -----------------------------------------------------------------

    def _execute(self, step: Step) -> bool:
        ev = self.plan.events[step.event]
        ctx = EventContext(self, ev, self.tick, step.parent)
        t0 = time.perf_counter()
        try:
            if ev.is_callback:
                with self.env.read_only():
                    value = ev.handler(ctx) if ev.handler else None
                if ev.report_mode == "gml":
                    if value and self.reporter is not None:
                        self.reporter.emit(ev, [], self)
                else:
                    records = _records(self.tick, ev, value)
                    self.records.extend(records)
                    if self.reporter is not None and ev.report_mode != "none":
                        self.reporter.emit(ev, records, self)
            else:
                self.results[ev.id] = ev.handler(ctx) if ev.handler else None
        except Exception as exc:
            self.failures[ev.id] += 1
            log.warning("tick=%d event=%s failed: %r", self.tick, ev.id, exc)
            events_log.info("tick=%d event=%s status=failed error=%r", self.tick, ev.id, exc)
            if self.config.fail_fast:
                raise HandlerFailure(f"event {ev.id!r} failed at tick {self.tick}: {exc}") from exc
            return False
        self.event_counts[ev.id] += 1
        if events_log.isEnabledFor(logging.INFO):
            events_log.info("tick=%d event=%s status=ok duration_ms=%.3f", self.tick, ev.id,
                            (time.perf_counter() - t0) * 1e3)
        if not ev.is_callback:
            self._completed.add(ev.id)
        return True

    def _workflow(self, trigger_id: str) -> None:
        for step in self.plan.workflows[trigger_id]:
            if not self._execute(step):
                if not step.callback:
                    break
        for cas in self._cascades:
            if cas.id not in self._cascade_fired and cas.source in self._completed:
                self._cascade_fired.add(cas.id)
                self._workflow(cas.id)

    def _begin_tick(self, tick: int) -> None:
        self.tick = tick
        self.results = {}
        self._completed = set()
        self._cascade_fired = set()
        self.env.tick = tick

    def _drain_manual(self) -> None:
        while self._manual:
            self._workflow(self._manual.pop(0))

    def step(self) -> None:
        """Advance one tick: queued manual triggers first, then timed triggers by id."""
        self._begin_tick(self.tick + 1)
        self._drain_manual()
        for trig in self._timed:
            if trig.fires_at(self.tick, self.rngs):
                self._workflow(trig.id)
        if self.reporter is not None:
            self.reporter.end_tick(self)

    def run(self) -> RunReport:
        t0 = self._t0 = time.perf_counter()
        if self.reporter is not None:
            self.reporter.open(self)
        try:
            self._begin_tick(0)
            if "start" in self.plan.triggers and self.plan.triggers["start"].variant == "manual":
                self._manual.insert(0, "start")
            self._drain_manual()
            for _ in range(int(self.config.max_ticks)):
                self.step()
                if self.config.tick_period > 0:
                    target = t0 + self.tick * self.config.tick_period
                    delay = target - time.perf_counter()
                    if delay > 0:
                        time.sleep(delay)
            if "stop" in self.plan.triggers and self.plan.triggers["stop"].variant == "manual":
                self._manual.append("stop")
            self._drain_manual()
        finally:
            self.wall_time = time.perf_counter() - t0
            report = self.report()
            if self.reporter is not None:
                self.reporter.close(self, report)
        return report

    def report(self) -> RunReport:
        summary = {}
        env = self.env
        if getattr(env, "apps", None):
            summary["success_rate"] = {a: round(env.success_rate(a), 9) for a in env.apps}
            summary["fulfilled"] = sum(1 for a in env.apps if env.is_fulfilled(a))
        return RunReport(self.config.run_id, self.config.seed, self.tick, dict(self.event_counts),
                         {k: v for k, v in self.failures.items() if v}, self.wall_time, summary)


# -- default wiring -----------------------------------------------------------------------


def default_step_events(env, remote: bool = False) -> SimGraph:
    """Core triggers (start, step, stop) wired to step → update → lookup → fulfil."""
    g = SimGraph()
    g.add_trigger(Trigger.manual("start"))
    g.add_trigger(Trigger.periodic("step", 1))
    g.add_trigger(Trigger.manual("stop"))

    def on_start(ctx):
        if ctx.env.emulator is not None:
            ctx.env.emulator.start()

    def on_stop(ctx):
        if ctx.env.emulator is not None:
            ctx.env.emulator.stop()

    g.add_event(EventSpec("start", on_start))
    g.add_event(EventSpec("step", None))
    g.add_event(EventSpec("update", lambda ctx: ctx.env.update(ctx.tick, ctx.sim.rngs), "infrastructure"))
    g.add_event(EventSpec("lookup", lambda ctx: ctx.env.lookup(), "application"))
    g.add_event(EventSpec("fulfil", lambda ctx: ctx.env.fulfil(), "application"))
    g.add_event(EventSpec("stop", on_stop))
    g.attach("start", "start")
    g.attach("step", "step")
    g.attach("stop", "stop")
    g.chain("step", "update", "lookup", "fulfil")
    if remote:
        g.add_event(EventSpec("emulate", lambda ctx: ctx.env.emulator.advance(ctx.tick)))
        g.connect("fulfil", "emulate")
    return g


def last_step_event(graph: SimGraph) -> str:
    return "emulate" if "emulate" in graph.events else "fulfil"
