"""Update policies: capacity degradation, node churn, user traffic, link failure."""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .assets import AssetKind
from .graph import Infrastructure, NoRoute, find_path, path_latency, shortest_latencies
from .rng import RngStreams, stream


class PolicyError(ValueError):
    pass


def _additive_assets(infra: Infrastructure) -> list[str]:
    return [s.name for s in infra.node_assets if s.kind is AssetKind.ADDITIVE]


@dataclass
class DegradePolicy:
    """Linear decay of node capacities from 100% at tick 0 to ``floor_pct``% at ``horizon``."""

    floor_pct: float
    horizon: int | None = None
    assets: tuple | None = None
    name: str = "degrade"

    def __post_init__(self):
        if not 0.0 <= float(self.floor_pct) <= 100.0:
            raise PolicyError(f"degrade floor must be within [0, 100], got {self.floor_pct}")
        if self.horizon is not None and int(self.horizon) < 1:
            raise PolicyError("degrade horizon must be >= 1")

    def factor(self, t: int) -> float:
        if self.horizon is None:
            raise PolicyError("degrade horizon is unset")
        frac = min(max(t, 0), self.horizon) / self.horizon
        return 1.0 - (1.0 - self.floor_pct / 100.0) * frac

    def step(self, env, t: int, rngs=None) -> None:
        degrade_step(self, env.infra, t)

    def label(self) -> str:
        return f"degrade({self.floor_pct:g})"


def degrade_step(policy: DegradePolicy, infra: Infrastructure, t: int) -> None:
    f = policy.factor(t)
    names = list(policy.assets) if policy.assets else _additive_assets(infra)
    for node in infra.nodes:
        original = infra.original_capacity(node)
        for a in names:
            if a in original:
                infra.set_capacity(node, a, original[a] * f)


@dataclass
class KillPolicy:
    """Independent per-node churn: deactivate w.p. X%, reactivate w.p. X/2 %."""

    pct: float
    stream: str = "policy/kill"
    protect: tuple = ()
    tiers: tuple | None = None
    name: str = "kill"

    def __post_init__(self):
        if not 0.0 < float(self.pct) <= 100.0:
            raise PolicyError(f"kill percentage must be within (0, 100], got {self.pct}")
        self.protect = tuple(self.protect)

    @property
    def kill_prob(self) -> float:
        return self.pct / 100.0

    @property
    def revive_prob(self) -> float:
        return self.pct / 200.0

    def step(self, env, t: int, rngs: RngStreams | None = None) -> None:
        rng = rngs.get(self.stream) if rngs is not None else self._own()
        kill_step(self, env.infra, t, rng)

    def _own(self):
        if not hasattr(self, "_rng"):
            self._rng = stream(0, self.stream)
        return self._rng

    def eligible(self, infra: Infrastructure) -> list[str]:
        out = []
        for n in infra.nodes:
            if n in self.protect:
                continue
            if self.tiers is not None and infra.node_attrs(n).get("tier") not in self.tiers:
                continue
            out.append(n)
        return out

    def label(self) -> str:
        return f"kill({self.pct:g})"


def kill_step(policy: KillPolicy, infra: Infrastructure, t: int, rng: np.random.Generator) -> None:
    nodes = policy.eligible(infra)
    draws = rng.random(len(nodes))
    for node, u in zip(nodes, draws):
        if infra.is_active(node):
            if u < policy.kill_prob:
                infra.set_active(node, False)
        elif u < policy.revive_prob:
            infra.restore_capacity(node)
            infra.set_active(node, True)


# -- user traffic ---------------------------------------------------------------------


@dataclass
class Trace:
    """Sparse per-tick user counts: ``rows[tick] = {node: users}``."""

    rows: dict = field(default_factory=dict)

    def row(self, t: int) -> Mapping | None:
        return self.rows.get(t)

    def nodes(self) -> list[str]:
        seen: dict[str, None] = {}
        for row in self.rows.values():
            seen.update(dict.fromkeys(row))
        return list(seen)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tick", "node_id", "users"])
            for t in sorted(self.rows):
                for node, users in self.rows[t].items():
                    w.writerow([t, node, users])


def load_trace_csv(path) -> Trace:
    rows: dict[int, dict[str, int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"tick", "node_id", "users"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise PolicyError(f"trace {path} needs a header with columns tick,node_id,users")
        for lineno, rec in enumerate(reader, start=2):
            try:
                t, users = int(rec["tick"]), int(rec["users"])
            except (TypeError, ValueError):
                raise PolicyError(f"{path}:{lineno}: tick and users must be integers") from None
            if users < 0:
                raise PolicyError(f"{path}:{lineno}: negative user count")
            rows.setdefault(t, {})[rec["node_id"]] = users
    return Trace(dict(sorted(rows.items())))


def synthetic_trace(nodes: Iterable[str], ticks: int, total: int = 3000, period: int = 10,
                    seed: int = 0, cycle: int = 500) -> Trace:
    """Urban-mobility-like counts: skewed per-node popularity, a slow traffic wave and noise.

    Rows are emitted every ``period`` ticks starting at tick 1.
    """
    nodes = list(nodes)
    rng = stream(seed, "trace/synthetic")
    weight = rng.lognormal(0.0, 1.0, len(nodes))
    weight /= weight.sum()
    phase = rng.uniform(0, 2 * math.pi, len(nodes))
    rows = {}
    for t in range(1, ticks + 1, period):
        wave = 1.0 + 0.3 * np.sin(2 * math.pi * t / cycle + phase)
        lam = total * weight * wave
        counts = rng.poisson(lam)
        rows[t] = {n: int(c) for n, c in zip(nodes, counts)}
    return Trace(rows)


@dataclass
class UserLoadPolicy:
    trace: Trace
    modifiers: tuple = ()  # (tick, 2 | 0.5)
    hub: str | None = None
    name: str = "users"

    def __post_init__(self):
        mods = []
        for t, m in self.modifiers:
            if m not in (2, 0.5, "x2", "x0.5", "double", "halve"):
                raise PolicyError(f"user modifier must double or halve, got {m!r}")
            mods.append((int(t), 1 if m in (2, "x2", "double") else -1))
        self._mods = dict(sorted(mods))
        self.modifiers = tuple(self.modifiers)
        self.base: dict[str, int] = {}
        self.exponent = 0

    def step(self, env, t: int, rngs=None) -> None:
        user_step(self, env, t)


def _scale(count: int, k: int) -> int:
    return count << k if k >= 0 else count >> -k


def user_step(policy: UserLoadPolicy, env, t: int) -> None:
    """Apply the trace row for ``t`` then any modifier scheduled at ``t``."""
    row = policy.trace.row(t)
    changed = False
    if row is not None:
        policy.base.update(row)
        changed = True
    if t in policy._mods:
        policy.exponent += policy._mods[t]
        changed = True
    if changed:
        env.users = {n: _scale(c, policy.exponent) for n, c in policy.base.items()}
    if policy.hub is not None:
        env.hub = policy.hub


def user_delay(infra: Infrastructure, node: str, hub: str, users: int, residual=None) -> float:
    """``lat(node, hub) + users * ln(1 + users)``."""
    if node == hub:
        lat = 0.0
    else:
        path = find_path(infra, node, hub, None, residual)
        if path is None:
            raise NoRoute(f"{node!r} cannot reach hub {hub!r}")
        lat = path_latency(infra, path, residual)
    return lat + users * math.log1p(users)


def user_delays(env) -> dict[str, float]:
    """Delay of every active node that can reach the hub (one search from the hub)."""
    if env.hub is None:
        return {}
    reach = shortest_latencies(env.infra, env.hub, env.residual)
    out = {}
    for node, (cost, path) in reach.items():
        uc = env.users.get(node, 0)
        lat = path_latency(env.infra, path, env.residual) if path.hops else 0.0
        out[node] = lat + uc * math.log1p(uc)
    return out


def mean_user_delay(env) -> float | None:
    d = user_delays(env)
    if not d:
        return None
    return sum(d.values()) / len(d)


# -- link failure ------------------------------------------------------------------------


@dataclass
class LinkFailurePolicy:
    """At ``tick``, multiply one link's latency by ``factor``."""

    tick: int
    link: tuple
    factor: float = 10.0
    asset: str = "latency"
    name: str = "link_failure"

    def __post_init__(self):
        if self.factor <= 0:
            raise PolicyError("link failure factor must be positive")
        self.link = tuple(self.link)

    def step(self, env, t: int, rngs=None) -> None:
        if t == self.tick:
            a, b = self.link
            current = env.infra.link_capacity(a, b)[self.asset]
            env.infra.set_link_capacity(a, b, self.asset, current * self.factor)


_POLICY_RE = re.compile(r"^\s*(degrade|kill)\s*\(\s*([0-9.eE+-]+)\s*\)\s*$")


def parse_policy(text: str, horizon: int | None = None, **kw):
    """``'degrade(50)'`` / ``'kill(5)'`` → policy object."""
    m = _POLICY_RE.match(text)
    if not m:
        raise PolicyError(f"cannot parse policy {text!r}; expected degrade(X) or kill(X)")
    kind, x = m.group(1), float(m.group(2))
    if kind == "degrade":
        return DegradePolicy(x, horizon=horizon, **kw)
    return KillPolicy(x, **kw)
