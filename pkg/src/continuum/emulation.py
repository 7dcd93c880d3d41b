"""In-process emulation: service actors exchanging messages that pay route costs.

Time is virtual (milliseconds). Each simulation tick covers ``tick_ms`` of
virtual time; :meth:`Emulator.advance` runs every timer and delivery that
falls inside the tick. A message sent at ``t`` over a route of cost ``d``
is delivered at ``t + d``, or later if an earlier message on the same
(src, dst) channel is still due, which keeps every channel FIFO.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from .graph import NoRoute, find_path, path_bucket
from .rng import RngStreams

log = logging.getLogger(__name__)

IDLE, DEPLOYED, STOPPED = "idle", "deployed", "stopped"
REQUEST, RESPONSE, ONEWAY = "request", "response", "oneway"


class EmulationError(Exception):
    pass


class AlreadyDeployed(EmulationError):
    pass


class NotDeployed(EmulationError):
    pass


class DstUnavailable(EmulationError):
    pass


class RequestTimeout(EmulationError, TimeoutError):
    pass


@dataclass
class Message:
    src: str
    dst: str
    kind: str = ONEWAY
    size: int = 0  # bits
    correlation: int | None = None
    payload: Any = None
    sent_at: float = 0.0
    deliver_at: float = 0.0

    def __post_init__(self):
        if self.kind not in (REQUEST, RESPONSE, ONEWAY):
            raise ValueError(f"unknown message kind {self.kind!r}")
        if isinstance(self.payload, (bytes, bytearray)):
            self.size = max(int(self.size), 8 * len(self.payload))
        if self.size < 0:
            raise ValueError("message size must be non-negative")


def route_cost(infra, residual, n1: str, n2: str, size: float) -> tuple:
    """``(path, delay_ms)``: path latency plus transmission time at the path bandwidth (Mb/s)."""
    if n1 == n2:
        path = find_path(infra, n1, n2)
        if path is None:
            raise NoRoute(f"{n1!r} is not active")
        return path, 0.0
    path = find_path(infra, n1, n2, None, residual)
    if path is None:
        raise NoRoute(f"no route from {n1!r} to {n2!r}")
    bucket = path_bucket(infra, path)  # message cost uses link rates, not reservations
    latency = float(bucket.get("latency", 0.0))
    bw = bucket.get("bandwidth")
    transmit = 0.0
    if size:
        if bw is None or math.isinf(bw):
            transmit = 0.0
        elif bw <= 0:
            raise NoRoute(f"route {n1!r}->{n2!r} has no bandwidth")
        else:
            transmit = float(size) / (float(bw) * 1000.0)  # Mb/s == 1000 bits per ms
    return path, latency + transmit


@dataclass
class ChannelStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0

    @property
    def in_flight(self) -> int:
        return self.sent - self.delivered - self.dropped


class Behaviour:
    """Service logic plug-in. Every hook is optional."""

    def __init__(self, **params):
        self.params = params

    def on_deploy(self, actor: "ServiceActor") -> None:
        pass

    def on_undeploy(self, actor: "ServiceActor") -> None:
        pass

    def on_tick(self, actor: "ServiceActor", tick: int) -> None:
        pass

    def on_message(self, actor: "ServiceActor", msg: Message) -> None:
        pass


class ServiceActor:
    def __init__(self, emulator: "Emulator", app_id: str, service_id: str, host: str, behaviour: Behaviour):
        self.emulator = emulator
        self.app_id = app_id
        self.service_id = service_id
        self.host = host
        self.behaviour = behaviour
        self.state = IDLE
        self.inbox: deque[Message] = deque()
        self.rng = emulator.rngs.get(f"actor/{app_id}/{service_id}")
        self._answered: set[int] = set()

    @property
    def address(self) -> str:
        return f"{self.app_id}/{self.service_id}"

    @property
    def now(self) -> float:
        return self.emulator.now

    def _peer(self, service: str) -> str:
        return service if "/" in service else f"{self.app_id}/{service}"

    def send(self, dst: str, payload=None, size: int = 0) -> Message | None:
        return self.emulator._send(self, self._peer(dst), ONEWAY, payload, size)

    def request(self, dst: str, payload=None, size: int = 0,
                on_response: Callable[[Message | RequestTimeout], None] | None = None,
                timeout: float | None = None) -> Message | None:
        return self.emulator._send(self, self._peer(dst), REQUEST, payload, size,
                                   on_response=on_response, timeout=timeout)

    def respond(self, request: Message, payload=None, size: int = 0) -> Message | None:
        if request.kind != REQUEST:
            raise EmulationError("only requests can be answered")
        if request.correlation in self._answered:
            raise EmulationError(f"request {request.correlation} already answered")
        self._answered.add(request.correlation)
        return self.emulator._send(self, request.src, RESPONSE, payload, size, correlation=request.correlation)

    def schedule(self, delay_ms: float, fn: Callable[[], None]) -> None:
        self.emulator._timer(self, delay_ms, fn)

    def declare(self, metric: str, agg: str = "sum") -> None:
        self.emulator._declare(self.address, metric, agg)

    def report(self, metric: str, value: float) -> None:
        self.emulator._report(self.address, metric, value)


class Emulator:
    """Message router and virtual clock shared by all deployed actors."""

    def __init__(self, env, tick_ms: float = 1000.0, seed: int = 0, behaviours=None, timeout_factor: float = 10.0):
        self.env = env
        self.tick_ms = float(tick_ms)
        self.rngs = RngStreams(seed)
        self.behaviours = dict(behaviours or {})  # app_id -> {service: Behaviour factory}
        self.timeout_factor = timeout_factor
        self.now = 0.0
        self.actors: dict[str, ServiceActor] = {}
        self.deployed: dict[str, list[str]] = {}
        self.channels: dict[tuple, ChannelStats] = {}
        self._heap: list = []
        self._seq = itertools.count()
        self._corr = itertools.count(1)
        self._last: dict[tuple, float] = {}
        self._pending: dict[int, tuple] = {}
        self._routes: dict[tuple, tuple] = {}
        self._route_version = None
        self._declared: dict[str, dict[str, str]] = {}
        self._values: dict[str, dict[str, list]] = {}
        self.running = False

    # -- lifecycle -----------------------------------------------------------------

    def start(self) -> None:
        self.running = True

    def stop(self) -> None:
        for app_id in list(self.deployed):
            self.undeploy(app_id)
        self.running = False

    def _make_behaviour(self, app, sid) -> Behaviour:
        spec = self.behaviours.get(app.id, {}).get(sid)
        if spec is None:
            return Behaviour()
        if isinstance(spec, Behaviour):
            return spec
        if callable(spec):
            return spec()
        name, params = spec
        return make_behaviour(name, **(params or {}))

    def deploy(self, placement, app) -> None:
        if placement.app_id in self.deployed:
            raise AlreadyDeployed(placement.app_id)
        if placement.status != "fulfilled":
            raise EmulationError(f"placement of {placement.app_id!r} is not fulfilled")
        self.now = max(self.now, (self.env.tick - 1) * self.tick_ms)
        actors = []
        for sid in app.services:
            actor = ServiceActor(self, app.id, sid, placement.mapping[sid], self._make_behaviour(app, sid))
            self.actors[actor.address] = actor
            actors.append(actor.address)
        self.deployed[app.id] = actors
        for addr in actors:
            self.actors[addr].state = DEPLOYED
        for addr in actors:
            actor = self.actors[addr]
            actor.behaviour.on_deploy(actor)

    def undeploy(self, app_id: str, missing_ok: bool = False) -> None:
        if app_id not in self.deployed:
            if missing_ok:
                return
            raise NotDeployed(app_id)
        addrs = self.deployed.pop(app_id)
        for addr in addrs:
            actor = self.actors[addr]
            actor.behaviour.on_undeploy(actor)
        for addr in addrs:
            actor = self.actors.pop(addr)
            actor.state = STOPPED
            actor.inbox.clear()
        for corr in [c for c, p in self._pending.items() if p[0].app_id == app_id]:
            del self._pending[corr]

    def is_deployed(self, app_id: str) -> bool:
        return app_id in self.deployed

    # -- routing ------------------------------------------------------------------------

    def route(self, n1: str, n2: str, size: float) -> float:
        if self._route_version != self.env.infra.version:
            self._routes.clear()
            self._route_version = self.env.infra.version
        key = (n1, n2)
        hit = self._routes.get(key)
        if hit is None:
            # cache the latency/bandwidth pair; size enters per message
            path, latency = route_cost(self.env.infra, self.env.residual, n1, n2, 0)
            bucket = path_bucket(self.env.infra, path) if path.hops else {}
            hit = self._routes[key] = (latency, bucket.get("bandwidth"))
        latency, bw = hit
        if size and bw is not None and not math.isinf(bw) and bw > 0:
            return latency + float(size) / (float(bw) * 1000.0)
        return latency

    def _send(self, actor: ServiceActor, dst: str, kind: str, payload, size,
              correlation=None, on_response=None, timeout=None) -> Message | None:
        if actor.state != DEPLOYED:
            raise NotDeployed(actor.address)
        channel = (actor.address, dst)
        stats = self.channels.setdefault(channel, ChannelStats())
        stats.sent += 1
        target = self.actors.get(dst)
        if target is None or target.state != DEPLOYED:
            stats.dropped += 1
            log.debug("drop %s->%s: destination unavailable", actor.address, dst)
            return None
        try:
            delay = self.route(actor.host, target.host, size)
        except NoRoute:
            stats.dropped += 1
            log.debug("drop %s->%s: no route", actor.address, dst)
            return None
        if kind == REQUEST:
            correlation = next(self._corr)
        msg = Message(actor.address, dst, kind, int(size), correlation, payload, self.now)
        due = max(self.now + delay, self._last.get(channel, -math.inf))
        self._last[channel] = due
        msg.deliver_at = due
        heapq.heappush(self._heap, (due, next(self._seq), "msg", msg))
        if kind == REQUEST:
            limit = timeout if timeout is not None else max(self.timeout_factor * delay, 1.0)
            self._pending[correlation] = (actor, on_response)
            heapq.heappush(self._heap, (self.now + limit, next(self._seq), "timeout", correlation))
        return msg

    def _timer(self, actor: ServiceActor, delay_ms: float, fn) -> None:
        heapq.heappush(self._heap, (self.now + max(0.0, delay_ms), next(self._seq), "timer", (actor, fn)))

    # -- metrics --------------------------------------------------------------------------

    def _declare(self, subject: str, metric: str, agg: str) -> None:
        if agg not in ("sum", "mean"):
            raise ValueError(f"unknown aggregation {agg!r}")
        self._declared.setdefault(metric, {})[subject] = agg

    def _report(self, subject: str, metric: str, value: float) -> None:
        self._values.setdefault(metric, {}).setdefault(subject, []).append(float(value))

    def collect(self, metric: str, tick: int | None = None) -> list[tuple]:
        """Per-subject aggregate of the values reported since the last collect."""
        declared = self._declared.get(metric, {})
        values = self._values.pop(metric, {})
        out = []
        for subject in sorted(set(declared) | set(values)):
            agg = declared.get(subject, "sum")
            vals = values.get(subject, [])
            if agg == "sum":
                out.append((subject, sum(vals) if vals else 0))
            else:
                out.append((subject, sum(vals) / len(vals) if vals else None))
        return out

    # -- the clock ----------------------------------------------------------------------------

    def advance(self, tick: int) -> int:
        """Run this tick's behaviour hooks, then everything due before the tick ends."""
        start = (tick - 1) * self.tick_ms
        self.now = max(self.now, start)
        for addr in [a for addrs in self.deployed.values() for a in addrs]:
            actor = self.actors[addr]
            actor.behaviour.on_tick(actor, tick)
        horizon = tick * self.tick_ms
        handled = 0
        while self._heap and self._heap[0][0] <= horizon:
            due, _, kind, item = heapq.heappop(self._heap)
            self.now = max(self.now, due)
            handled += 1
            if kind == "msg":
                self._deliver(item)
            elif kind == "timer":
                actor, fn = item
                if actor.state == DEPLOYED:
                    fn()
            elif kind == "timeout":
                pending = self._pending.pop(item, None)
                if pending is not None:
                    actor, cb = pending
                    if actor.state == DEPLOYED and cb is not None:
                        cb(RequestTimeout(f"request {item} timed out"))
        self.now = max(self.now, horizon)
        return handled

    def _deliver(self, msg: Message) -> None:
        stats = self.channels[(msg.src, msg.dst)]
        target = self.actors.get(msg.dst)
        if target is None or target.state != DEPLOYED:
            stats.dropped += 1
            log.debug("drop %s->%s in flight: destination undeployed", msg.src, msg.dst)
            return
        stats.delivered += 1
        if msg.kind == RESPONSE:
            pending = self._pending.pop(msg.correlation, None)
            if pending is None:
                return  # answered after its timeout
            actor, cb = pending
            if cb is not None:
                cb(msg)
            return
        target.inbox.append(msg)
        while target.inbox and target.state == DEPLOYED:
            target.behaviour.on_message(target, target.inbox.popleft())

    def dropped(self) -> int:
        return sum(s.dropped for s in self.channels.values())


# -- built-in behaviours ------------------------------------------------------------------------


class Echo(Behaviour):
    """Answers every request with its own payload."""

    def on_message(self, actor, msg):
        if msg.kind == REQUEST:
            actor.respond(msg, msg.payload, msg.size)


class Streamer(Behaviour):
    """Closed-loop client: one outstanding request at a time, retried on timeout.

    params: target (service id), size (bits), metric (optional sent counter).
    """

    def on_deploy(self, actor):
        self.metric = self.params.get("metric", "sent")
        actor.declare(self.metric, "sum")
        self._next(actor)

    def _next(self, actor):
        if actor.state != DEPLOYED:
            return
        actor.report(self.metric, 1)
        sent = actor.request(self.params["target"], None, int(self.params.get("size", 1_000_000)),
                             on_response=lambda _resp: self._next(actor))
        if sent is None:
            # destination unavailable: retry after a pause
            actor.schedule(float(self.params.get("retry_ms", 100.0)), lambda: self._next(actor))


class Predictor(Behaviour):
    """Scores each request with model accuracy ``A(v) + N(0, sigma)``.

    ``A(v) = a_inf - (a_inf - a0) * exp(-v / tau)`` where ``v`` is the latest
    model version received. Reports ``image_count`` (sum) and ``accuracy``
    (mean) per tick.
    """

    def accuracy(self, v: float) -> float:
        a0 = float(self.params.get("a0", 0.5))
        a_inf = float(self.params.get("a_inf", 0.95))
        tau = float(self.params.get("tau", 20.0))
        return a_inf - (a_inf - a0) * math.exp(-v / tau)

    def on_deploy(self, actor):
        self.version = 0
        actor.declare("image_count", "sum")
        actor.declare("accuracy", "mean")

    def on_message(self, actor, msg):
        if isinstance(msg.payload, dict) and "version" in msg.payload:
            self.version = max(self.version, int(msg.payload["version"]))
            return
        if msg.kind != REQUEST:
            return
        sigma = float(self.params.get("sigma", 0.1))
        score = self.accuracy(self.version) + float(actor.rng.normal(0.0, sigma))
        proc = float(self.params.get("processing_ms", 50.0))

        def done():
            actor.report("image_count", 1)
            actor.report("accuracy", score)
            actor.respond(msg, {"score": score}, int(self.params.get("response_size", 8_000)))

        actor.schedule(proc, done)


class Trainer(Behaviour):
    """Publishes a new model version every ``epoch_ticks`` ticks (``size`` bits each)."""

    def on_deploy(self, actor):
        self.version = 0

    def on_tick(self, actor, tick):
        every = int(self.params.get("epoch_ticks", 10))
        if tick % every == 0:
            self.version += 1
            actor.send(self.params["target"], {"version": self.version}, int(self.params.get("size", 10_000_000)))


BEHAVIOURS: dict[str, type[Behaviour]] = {
    "echo": Echo,
    "streamer": Streamer,
    "predictor": Predictor,
    "trainer": Trainer,
    "idle": Behaviour,
}


def make_behaviour(name: str, **params) -> Behaviour:
    try:
        cls = BEHAVIOURS[name]
    except KeyError:
        raise ValueError(f"unknown behaviour {name!r}") from None
    return cls(**params)
