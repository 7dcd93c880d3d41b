"""Service placement: validity, residual-resource ledger, fulfilment and strategies."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterable, Mapping

from .assets import TOL, AssetKind, InsufficientCapacity
from .graph import (
    Application,
    Infrastructure,
    Path,
    UnknownNode,
    _Guarded,
    candidate_paths,
    find_path,
    link_key,
)

log = logging.getLogger(__name__)

PENDING = "pending"
FULFILLED = "fulfilled"
RESET = "reset"

LOAD_OWNER = "__load__"

__all__ = [
    "Placement", "ResidualState", "UnknownNode", "is_valid", "fulfil",
    "first_fit", "best_fit", "min_energy", "static_strategy",
    "FirstFit", "BestFit", "MinEnergy", "StaticStrategy", "make_strategy", "STRATEGIES",
]


@dataclass
class Placement:
    app_id: str
    mapping: dict = field(default_factory=dict)
    status: str = PENDING

    def is_total(self, app: Application) -> bool:
        return all(s in self.mapping for s in app.services)

    def copy(self) -> "Placement":
        return Placement(self.app_id, dict(self.mapping), self.status)


class ResidualState(_Guarded):
    """Ledger of allocations against an infrastructure's current capacities.

    Residuals are derived, never stored: for a consumable asset the residual
    is ``capacity * (1 - background_load) - sum(allocations)``, otherwise the
    capacity itself. A capacity cut can therefore push a residual below zero
    until the next fulfilment releases the offending placements.
    """

    def __init__(self, infra: Infrastructure):
        self.infra = infra
        self._node_alloc: dict[str, dict[str, dict]] = {}
        self._link_alloc: dict[tuple, dict[str, dict]] = {}
        self._load: dict[str, float] = {}
        self.hosted: dict[str, dict[tuple, None]] = {}
        self.paths: dict[str, dict[tuple, Path]] = {}
        self._node_cache: dict[str, MappingProxyType] = {}
        self._link_cache: dict[tuple, MappingProxyType] = {}
        self._version = infra.version
        na = infra.node_assets
        la = infra.link_assets
        self._node_consumable = [s.name for s in na if s.consumable]
        self._link_consumable = [s.name for s in la if s.consumable]

    def _sync(self):
        if self._version != self.infra.version:
            self._node_cache.clear()
            self._link_cache.clear()
            self._version = self.infra.version

    # -- residual views -------------------------------------------------------------

    def node_residual(self, node: str) -> Mapping:
        self._sync()
        cached = self._node_cache.get(node)
        if cached is not None:
            return cached
        cap = self.infra._node(node).capacity
        out = dict(cap)
        load = self._load.get(node, 0.0)
        allocs = self._node_alloc.get(node)
        for name in self._node_consumable:
            if name not in cap:
                continue
            value = cap[name] * (1.0 - load) if load else cap[name]
            if allocs:
                for amount in allocs.values():
                    value -= amount.get(name, 0.0)
            out[name] = value
        view = self._node_cache[node] = MappingProxyType(out)
        return view

    def link_residual(self, a: str, b: str) -> Mapping:
        self._sync()
        key = link_key(a, b)
        cached = self._link_cache.get(key)
        if cached is not None:
            return cached
        cap = self.infra._link(a, b).capacity
        out = dict(cap)
        allocs = self._link_alloc.get(key)
        if allocs:
            for name in self._link_consumable:
                if name in out:
                    for amount in allocs.values():
                        out[name] -= amount.get(name, 0.0)
        view = self._link_cache[key] = MappingProxyType(out)
        return view

    def node_allocated(self, node: str, include_load: bool = True) -> dict:
        cap = self.infra._node(node).capacity
        out = {}
        load = self._load.get(node, 0.0) if include_load else 0.0
        for name in self._node_consumable:
            if name in cap:
                out[name] = cap[name] * load
        for amount in self._node_alloc.get(node, {}).values():
            for name, v in amount.items():
                out[name] = out.get(name, 0.0) + v
        return out

    def link_allocated(self, a: str, b: str) -> dict:
        out: dict = {}
        for amount in self._link_alloc.get(link_key(a, b), {}).values():
            for name, v in amount.items():
                out[name] = out.get(name, 0.0) + v
        return out

    def hosted_on(self, node: str) -> list[tuple]:
        return list(self.hosted.get(node, ()))

    def owners(self) -> list[str]:
        seen: dict[str, None] = {}
        for allocs in self._node_alloc.values():
            seen.update(dict.fromkeys(allocs))
        for allocs in self._link_alloc.values():
            seen.update(dict.fromkeys(allocs))
        return list(seen)

    # -- mutation ---------------------------------------------------------------------

    def set_load(self, node: str, fraction: float) -> None:
        """Background utilisation of a node's consumable assets (initial load)."""
        self._check_mutable()
        if not 0.0 <= fraction < 1.0:
            raise ValueError("background load must be in [0, 1)")
        self.infra._node(node)
        self._load[node] = float(fraction)
        self._node_cache.pop(node, None)

    def load(self, node: str) -> float:
        return self._load.get(node, 0.0)

    def allocate_node(self, owner: str, node: str, amount: Mapping, service: str | None = None) -> None:
        self._check_mutable()
        residual = self.node_residual(node)
        consumed = {}
        for name in self._node_consumable:
            v = amount.get(name)
            if v:
                if v > residual.get(name, 0.0) + TOL:
                    raise InsufficientCapacity(f"{node}.{name}: {v:g} exceeds residual {residual.get(name, 0.0):g}")
                consumed[name] = float(v)
        per_node = self._node_alloc.setdefault(node, {})
        if owner in per_node:
            prev = per_node[owner]
            for name, v in consumed.items():
                prev[name] = prev.get(name, 0.0) + v
        else:
            per_node[owner] = consumed
        if service is not None:
            self.hosted.setdefault(node, {})[(owner, service)] = None
        self._node_cache.pop(node, None)

    def allocate_path(self, owner: str, interaction: tuple, path: Path, amount: Mapping) -> None:
        self._check_mutable()
        consumed = {n: float(amount[n]) for n in self._link_consumable if amount.get(n)}
        for a, b in path.links():
            residual = self.link_residual(a, b)
            for name, v in consumed.items():
                if v > residual.get(name, 0.0) + TOL:
                    raise InsufficientCapacity(f"link {a}-{b}.{name}: {v:g} exceeds residual")
        for a, b in path.links():
            key = link_key(a, b)
            per_link = self._link_alloc.setdefault(key, {})
            prev = per_link.setdefault(owner, {})
            for name, v in consumed.items():
                prev[name] = prev.get(name, 0.0) + v
            self._link_cache.pop(key, None)
        self.paths.setdefault(owner, {})[interaction] = path

    def release(self, owner: str) -> bool:
        """Drop every node and link allocation of ``owner`` atomically."""
        self._check_mutable()
        found = False
        for node, allocs in self._node_alloc.items():
            if allocs.pop(owner, None) is not None:
                found = True
                self._node_cache.pop(node, None)
        for key, allocs in self._link_alloc.items():
            if allocs.pop(owner, None) is not None:
                found = True
                self._link_cache.pop(key, None)
        for node, hosted in self.hosted.items():
            for pair in [p for p in hosted if p[0] == owner]:
                del hosted[pair]
                found = True
        if self.paths.pop(owner, None) is not None:
            found = True
        return found

    # -- audit -------------------------------------------------------------------------

    def audit(self, tol: float = TOL) -> list[str]:
        """Conservation violations: capacity must equal residual plus allocations."""
        problems = []
        for node in self.infra.nodes:
            cap = self.infra._node(node).capacity
            res = self.node_residual(node)
            alloc = self.node_allocated(node)
            for name in self._node_consumable:
                if name in cap and abs(cap[name] - (res[name] + alloc.get(name, 0.0))) > tol * max(1.0, cap[name]):
                    problems.append(f"node {node}.{name}: {cap[name]} != {res[name]} + {alloc.get(name, 0.0)}")
        for a, b in self.infra.links:
            cap = self.infra._link(a, b).capacity
            res = self.link_residual(a, b)
            alloc = self.link_allocated(a, b)
            for name in self._link_consumable:
                if name in cap and abs(cap[name] - (res[name] + alloc.get(name, 0.0))) > tol * max(1.0, cap[name]):
                    problems.append(f"link {a}-{b}.{name}: {cap[name]} != {res[name]} + {alloc.get(name, 0.0)}")
        return problems


# -- validity ----------------------------------------------------------------------------


def _node_loads(placement: Placement, app: Application, infra: Infrastructure) -> dict[str, dict]:
    na = infra.node_assets
    loads: dict[str, dict] = {}
    for sid, req in app.services.items():
        node = placement.mapping[sid]
        loads[node] = na._aggregate(loads[node], req) if node in loads else dict(req)
    return loads


def is_valid(placement: Placement, app: Application, infra: Infrastructure, residual: ResidualState) -> bool:
    """Node constraints on aggregated requirements plus one feasible path per interaction."""
    for node in placement.mapping.values():
        if not infra.has_node(node):
            raise UnknownNode(f"placement of {placement.app_id!r} references unknown node {node!r}")
    if not placement.is_total(app):
        return False
    na = infra.node_assets
    for node, load in _node_loads(placement, app, infra).items():
        if not infra.is_active(node):
            return False
        if not na.satisfies(load, residual.node_residual(node)):
            return False
    for (a, b), req in app.interactions.items():
        na_, nb_ = placement.mapping[a], placement.mapping[b]
        if na_ == nb_:
            continue
        if find_path(infra, na_, nb_, req, residual) is None:
            return False
    return True


def _reserve(placement: Placement, app: Application, infra: Infrastructure, residual: ResidualState) -> bool:
    """Allocate nodes, then one path per interaction so that their summed
    bandwidth fits every link. Paths are tried best first with backtracking,
    so a greedy first choice cannot starve a later interaction."""
    owner = app.id
    try:
        for sid, req in app.services.items():
            residual.allocate_node(owner, placement.mapping[sid], req, service=sid)
    except InsufficientCapacity as exc:
        log.debug("reservation of %s failed: %s", owner, exc)
        residual.release(owner)
        return False
    pending = []
    for (a, b), req in app.interactions.items():
        na_, nb_ = placement.mapping[a], placement.mapping[b]
        if na_ == nb_:
            residual.paths.setdefault(owner, {})[(a, b)] = Path((na_,))
        else:
            pending.append(((a, b), na_, nb_, req))
    consumable = residual._link_consumable
    used: dict[tuple, dict] = {}
    chosen: list[Path] = []

    def fits(path, req):
        for x, y in path.links():
            free = residual.link_residual(x, y)
            taken = used.get(link_key(x, y), {})
            for name in consumable:
                v = req.get(name)
                if v and taken.get(name, 0.0) + v > free.get(name, 0.0) + TOL:
                    return False
        return True

    def charge(path, req, sign):
        for x, y in path.links():
            taken = used.setdefault(link_key(x, y), {})
            for name in consumable:
                if req.get(name):
                    taken[name] = taken.get(name, 0.0) + sign * float(req[name])

    # each interaction's candidates are computed once, lazily, and shared by all branches
    sources = [candidate_paths(infra, u, v, req, residual) for _, u, v, req in pending]
    cache: list[list[Path]] = [[] for _ in pending]

    def options(i):
        j = 0
        while True:
            if j == len(cache[i]):
                nxt = next(sources[i], None)
                if nxt is None:
                    return
                cache[i].append(nxt)
            yield cache[i][j]
            j += 1

    def assign(i):
        if i == len(pending):
            return True
        req = pending[i][3]
        for path in options(i):
            if not fits(path, req):
                continue
            charge(path, req, 1)
            chosen.append(path)
            if assign(i + 1):
                return True
            chosen.pop()
            charge(path, req, -1)
        return False

    if not assign(0):
        log.debug("reservation of %s failed: no joint path assignment", owner)
        residual.release(owner)
        return False
    for (inter, _, _, req), path in zip(pending, chosen):
        residual.allocate_path(owner, inter, path, req)
    return True


def fulfil(
    placements: Iterable[Placement],
    apps: Mapping[str, Application],
    infra: Infrastructure,
    residual: ResidualState,
) -> tuple[list[Placement], list[Placement]]:
    """Allocate resources to valid placements and reset the others, in app-id order.

    A previously fulfilled placement is released first and re-admitted only if
    it is still valid against the remaining residual resources.
    """
    fulfilled, reset = [], []
    for pl in sorted(placements, key=lambda p: p.app_id):
        app = apps[pl.app_id]
        if pl.status == FULFILLED:
            residual.release(app.id)
        try:
            ok = is_valid(pl, app, infra, residual) and _reserve(pl, app, infra, residual)
        except UnknownNode as exc:
            log.debug("resetting %s: %s", pl.app_id, exc)
            ok = False
        if ok:
            pl.status = FULFILLED
            fulfilled.append(pl)
        else:
            residual.release(app.id)
            pl.status = RESET
            reset.append(pl)
    return fulfilled, reset


# -- strategies -----------------------------------------------------------------------------

Chooser = Callable[[str, dict, list, Infrastructure, ResidualState], "str | None"]


def _greedy(app: Application, infra: Infrastructure, residual: ResidualState, choose: Chooser,
            first_only: bool = False) -> Placement | None:
    """Place services in declaration order; a node is a candidate when it fits
    the service and every interaction with an already placed service still has
    a feasible path. Returns ``None`` unless the whole mapping is valid."""
    na = infra.node_assets
    nodes = sorted(infra.active_nodes())
    tentative: dict[str, dict] = {}
    mapping: dict[str, str] = {}
    links = defaultdict(list)
    for (a, b), ireq in app.interactions.items():
        links[a].append((b, ireq))
        links[b].append((a, ireq))
    for sid, req in app.services.items():
        placed = [(mapping[o], ireq) for o, ireq in links[sid] if o in mapping]
        feasible = []
        for node in nodes:
            load = na._aggregate(tentative[node], req) if node in tentative else req
            if not na.satisfies(load, residual.node_residual(node)):
                continue
            if any(other != node and find_path(infra, node, other, ireq, residual) is None
                   for other, ireq in placed):
                continue
            feasible.append((node, load))
            if first_only:
                break
        if not feasible:
            return None
        pick = choose(sid, req, feasible, infra, residual)
        mapping[sid] = pick
        tentative[pick] = dict(next(load for n, load in feasible if n == pick))
    placement = Placement(app.id, mapping)
    return placement if is_valid(placement, app, infra, residual) else None


def _argmin(scored: Iterable[tuple[float, str]]) -> str:
    """Lowest score, ties (relative 1e-9) resolved by ascending node id."""
    best_node, best = None, None
    for score, node in sorted(scored, key=lambda x: x[1]):
        if best is None or score < best - 1e-9 * max(1.0, abs(best)):
            best_node, best = node, score
    return best_node


def _additive_consumables(infra: Infrastructure) -> list[str]:
    return [s.name for s in infra.node_assets if s.consumable and s.kind is AssetKind.ADDITIVE]


def first_fit(app: Application, infra: Infrastructure, residual: ResidualState) -> Placement | None:
    """Each service on the lowest-id active node that still fits it."""
    return _greedy(app, infra, residual, lambda sid, req, feas, i, r: feas[0][0], first_only=True)


def best_fit(app: Application, infra: Infrastructure, residual: ResidualState) -> Placement | None:
    """Each service on the node left with the least normalized free capacity."""
    assets = _additive_consumables(infra)

    def choose(sid, req, feasible, infra, residual):
        scored = []
        for node, load in feasible:
            cap = infra._node(node).capacity
            res = residual.node_residual(node)
            ratios = [
                (res[a] - load.get(a, 0.0)) / cap[a]
                for a in assets if cap.get(a, 0.0) > 0
            ]
            scored.append((sum(ratios) / len(ratios) if ratios else 0.0, node))
        return _argmin(scored)

    return _greedy(app, infra, residual, choose)


DEFAULT_ENERGY_WEIGHTS = {"cpu": 1.0, "gpu": 1.0, "ram": 1.0, "storage": 1.0}


def min_energy(app: Application, infra: Infrastructure, residual: ResidualState,
               weights: Mapping[str, float] | None = None, mode: str = "total") -> Placement | None:
    """Each service on the node whose energy consumption is lowest.

    A node's energy is a weighted sum, over cpu/gpu/ram/storage, of the
    amount allocated to it divided by its capacity. ``mode="total"`` ranks
    nodes by their energy after hosting the service (background load, other
    placements and this app's earlier services included); ``mode="delta"``
    ranks by the increase alone. On idle nodes the two coincide.
    """
    if mode not in ("total", "delta"):
        raise ValueError(f"unknown min_energy mode {mode!r}")
    weights = dict(DEFAULT_ENERGY_WEIGHTS if weights is None else weights)
    weights = {k: float(v) for k, v in weights.items() if k in infra.node_assets}

    def choose(sid, req, feasible, infra, residual):
        scored = []
        for node, load in feasible:
            cap = infra._node(node).capacity
            used = residual.node_allocated(node) if mode == "total" else None
            energy = 0.0
            for r, w in weights.items():
                c = cap.get(r, 0.0)
                if c <= 0:
                    continue
                if mode == "total":
                    # ``load`` already includes this service and the app's earlier ones here
                    energy += w * (used.get(r, 0.0) + load.get(r, 0.0)) / c
                else:
                    energy += w * req.get(r, 0.0) / c
            scored.append((energy, node))
        return _argmin(scored)

    return _greedy(app, infra, residual, choose)


class PlacementStrategy:
    name = "strategy"

    def place(self, app: Application, infra: Infrastructure, residual: ResidualState) -> Placement | None:
        raise NotImplementedError

    def __call__(self, app, infra, residual):
        return self.place(app, infra, residual)

    def to_dict(self) -> dict:
        return {"name": self.name}

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class FirstFit(PlacementStrategy):
    name = "first_fit"

    def place(self, app, infra, residual):
        return first_fit(app, infra, residual)


class BestFit(PlacementStrategy):
    name = "best_fit"

    def place(self, app, infra, residual):
        return best_fit(app, infra, residual)


class MinEnergy(PlacementStrategy):
    name = "min_energy"

    def __init__(self, weights: Mapping[str, float] | None = None, mode: str = "total"):
        if mode not in ("total", "delta"):
            raise ValueError(f"unknown min_energy mode {mode!r}")
        self.weights = dict(weights) if weights is not None else None
        self.mode = mode

    def place(self, app, infra, residual):
        return min_energy(app, infra, residual, self.weights, self.mode)

    def to_dict(self):
        out = {"name": self.name, "mode": self.mode}
        if self.weights is not None:
            out["weights"] = dict(self.weights)
        return out


class StaticStrategy(PlacementStrategy):
    """Returns the configured mapping verbatim; fulfilment still validates it."""

    name = "static"

    def __init__(self, mapping: Mapping[str, str]):
        self.mapping = dict(mapping)

    def place(self, app, infra, residual):
        return Placement(app.id, dict(self.mapping))

    def to_dict(self):
        return {"name": self.name, "mapping": dict(self.mapping)}


def static_strategy(mapping: Mapping[str, str]) -> StaticStrategy:
    return StaticStrategy(mapping)


STRATEGIES: dict[str, Callable[..., PlacementStrategy]] = {
    "first_fit": FirstFit,
    "best_fit": BestFit,
    "min_energy": MinEnergy,
    "static": StaticStrategy,
}


def make_strategy(name: str, **params) -> PlacementStrategy:
    try:
        factory = STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown placement strategy {name!r}") from None
    return factory(**params)
