"""Infrastructure and application graphs, path aggregation and path search."""
from __future__ import annotations

import heapq
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING, Any, Iterable, Mapping

import networkx as nx

from .assets import (
    AssetKind,
    AssetSet,
    SpecMismatch,
    default_link_assets,
    default_node_assets,
    default_path_assets,
)

if TYPE_CHECKING:
    from .placement import ResidualState


class GraphError(Exception):
    pass


class DuplicateId(GraphError, ValueError):
    pass


class UnknownEndpoint(GraphError, ValueError):
    pass


class BrokenPath(GraphError):
    pass


class NoRoute(GraphError):
    pass


class UnknownNode(GraphError, LookupError):
    pass


class ReadOnlyError(GraphError, RuntimeError):
    """Raised when a read-only view (e.g. inside a callback) attempts a mutation."""


def link_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


class _Guarded:
    """Mixin providing a reentrant read-only switch."""

    _frozen = 0

    @contextmanager
    def read_only(self):
        self._frozen += 1
        try:
            yield self
        finally:
            self._frozen -= 1

    def _check_mutable(self):
        if self._frozen:
            raise ReadOnlyError(f"{type(self).__name__} is read-only in this context")


@dataclass
class NodeRecord:
    capacity: dict
    original: dict
    active: bool = True
    attrs: dict = field(default_factory=dict)


@dataclass
class LinkRecord:
    capacity: dict
    original: dict
    attrs: dict = field(default_factory=dict)


class Infrastructure(_Guarded):
    """Undirected attributed graph of nodes and links.

    ``path_assets`` gives the kind used when folding link values along a
    path; by default bandwidth is additive on a link but convex on a path.
    """

    def __init__(
        self,
        id: str = "infrastructure",
        node_assets: AssetSet | None = None,
        link_assets: AssetSet | None = None,
        path_assets: AssetSet | None = None,
        latency_asset: str = "latency",
    ):
        self.id = id
        self.node_assets = node_assets if node_assets is not None else default_node_assets()
        self.link_assets = link_assets if link_assets is not None else default_link_assets()
        self.path_assets = path_assets if path_assets is not None else default_path_assets(self.link_assets)
        missing = [n for n in self.link_assets.names if n not in self.path_assets]
        if missing:
            raise SpecMismatch(f"path assets must extend link assets; missing {missing}")
        self.latency_asset = latency_asset if latency_asset in self.path_assets else None
        self._nodes: dict[str, NodeRecord] = {}
        self._adj: dict[str, dict[str, LinkRecord]] = {}
        self._links: dict[tuple[str, str], LinkRecord] = {}
        self.version = 0

    def __repr__(self) -> str:
        return f"Infrastructure({self.id!r}, nodes={len(self._nodes)}, links={len(self._links)})"

    # -- construction ---------------------------------------------------------

    def add_node(self, node_id: str, bucket: Mapping | None = None, **attrs) -> None:
        self._check_mutable()
        node_id = str(node_id)
        if node_id in self._nodes:
            raise DuplicateId(f"node {node_id!r} already exists")
        capacity = self.node_assets.validate(bucket)
        self._nodes[node_id] = NodeRecord(capacity, dict(capacity), True, dict(attrs))
        self._adj[node_id] = {}
        self.version += 1

    def add_link(self, src: str, dst: str, bucket: Mapping | None = None, **attrs) -> None:
        self._check_mutable()
        src, dst = str(src), str(dst)
        for end in (src, dst):
            if end not in self._nodes:
                raise UnknownEndpoint(f"link endpoint {end!r} is not a node")
        if src == dst:
            raise UnknownEndpoint(f"self-loop on {src!r} is not allowed")
        key = link_key(src, dst)
        if key in self._links:
            raise DuplicateId(f"link {key} already exists")
        capacity = self.link_assets.validate(bucket)
        record = LinkRecord(capacity, dict(capacity), dict(attrs))
        self._links[key] = record
        self._adj[src][dst] = record
        self._adj[dst][src] = record
        self.version += 1

    # -- queries ----------------------------------------------------------------

    @property
    def nodes(self) -> list[str]:
        return list(self._nodes)

    @property
    def links(self) -> list[tuple[str, str]]:
        return list(self._links)

    def has_node(self, node_id: str) -> bool:
        return node_id in self._nodes

    def has_link(self, a: str, b: str) -> bool:
        return link_key(a, b) in self._links

    def _node(self, node_id: str) -> NodeRecord:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(f"unknown node {node_id!r}") from None

    def _link(self, a: str, b: str) -> LinkRecord:
        try:
            return self._links[link_key(a, b)]
        except KeyError:
            raise BrokenPath(f"no link between {a!r} and {b!r}") from None

    def capacity(self, node_id: str) -> Mapping:
        return MappingProxyType(self._node(node_id).capacity)

    def original_capacity(self, node_id: str) -> Mapping:
        return MappingProxyType(self._node(node_id).original)

    def node_attrs(self, node_id: str) -> Mapping:
        return MappingProxyType(self._node(node_id).attrs)

    def link_capacity(self, a: str, b: str) -> Mapping:
        return MappingProxyType(self._link(a, b).capacity)

    def link_attrs(self, a: str, b: str) -> Mapping:
        return MappingProxyType(self._link(a, b).attrs)

    def is_active(self, node_id: str) -> bool:
        return self._node(node_id).active

    def active_nodes(self) -> list[str]:
        return [n for n, rec in self._nodes.items() if rec.active]

    def neighbors(self, node_id: str) -> list[str]:
        return list(self._adj[node_id])

    def degree(self, node_id: str) -> int:
        return len(self._adj[node_id])

    # -- mutation (dynamics) ----------------------------------------------------

    def set_active(self, node_id: str, active: bool) -> None:
        self._check_mutable()
        rec = self._node(node_id)
        if rec.active != active:
            rec.active = active
            self.version += 1

    def set_capacity(self, node_id: str, asset: str, value) -> None:
        self._check_mutable()
        rec = self._node(node_id)
        rec.capacity[asset] = self.node_assets[asset].validate(value)
        self.version += 1

    def restore_capacity(self, node_id: str) -> None:
        self._check_mutable()
        rec = self._node(node_id)
        rec.capacity = dict(rec.original)
        self.version += 1

    def set_link_capacity(self, a: str, b: str, asset: str, value) -> None:
        self._check_mutable()
        self._link(a, b).capacity[asset] = self.link_assets[asset].validate(value)
        self.version += 1

    # -- conversion ---------------------------------------------------------------

    def to_networkx(self, residual: "ResidualState | None" = None) -> nx.Graph:
        g = nx.Graph(id=self.id)
        for nid, rec in self._nodes.items():
            attrs = {k: v for k, v in rec.attrs.items()}
            attrs["active"] = int(rec.active)
            attrs.update(_flat(self.node_assets, rec.capacity))
            if residual is not None:
                attrs.update(_flat(self.node_assets, residual.node_residual(nid), prefix="residual_"))
            g.add_node(nid, **attrs)
        for (a, b), rec in self._links.items():
            attrs = dict(rec.attrs)
            attrs.update(_flat(self.link_assets, rec.capacity))
            if residual is not None:
                attrs.update(_flat(self.link_assets, residual.link_residual(a, b), prefix="residual_"))
            g.add_edge(a, b, **attrs)
        return g


@dataclass(frozen=True)
class Path:
    nodes: tuple

    @property
    def src(self) -> str:
        return self.nodes[0]

    @property
    def dst(self) -> str:
        return self.nodes[-1]

    @property
    def hops(self) -> int:
        return len(self.nodes) - 1

    def links(self) -> list[tuple[str, str]]:
        return list(zip(self.nodes, self.nodes[1:]))

    def reversed(self) -> "Path":
        return Path(tuple(reversed(self.nodes)))

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self):
        return len(self.nodes)


class Application(_Guarded):
    """Services with requirement buckets, directed interactions and flows."""

    def __init__(
        self,
        id: str,
        service_assets: AssetSet | None = None,
        interaction_assets: AssetSet | None = None,
    ):
        self.id = id
        self.service_assets = service_assets if service_assets is not None else default_node_assets()
        self.interaction_assets = (
            interaction_assets if interaction_assets is not None else default_path_assets()
        )
        self.services: dict[str, dict] = {}
        self.interactions: dict[tuple[str, str], dict] = {}
        self.flows: list[tuple[str, ...]] = []
        self.attrs: dict[str, Any] = {}

    def __repr__(self) -> str:
        return f"Application({self.id!r}, services={list(self.services)})"

    def add_service(self, service_id: str, bucket: Mapping | None = None) -> None:
        self._check_mutable()
        service_id = str(service_id)
        if service_id in self.services:
            raise DuplicateId(f"service {service_id!r} already exists in {self.id!r}")
        self.services[service_id] = self.service_assets.validate(bucket)

    def add_interaction(self, src: str, dst: str, bucket: Mapping | None = None) -> None:
        self._check_mutable()
        for end in (src, dst):
            if end not in self.services:
                raise UnknownEndpoint(f"interaction endpoint {end!r} is not a service of {self.id!r}")
        if src == dst:
            raise UnknownEndpoint(f"self-interaction on {src!r}")
        if (src, dst) in self.interactions:
            raise DuplicateId(f"interaction {(src, dst)} already exists")
        self.interactions[(src, dst)] = self.interaction_assets.validate(bucket)

    def add_flow(self, services: Iterable[str]) -> None:
        self._check_mutable()
        flow = tuple(services)
        if not flow:
            raise ValueError("flows need at least one service")
        for s in flow:
            if s not in self.services:
                raise UnknownEndpoint(f"flow service {s!r} is not a service of {self.id!r}")
        for a, b in zip(flow, flow[1:]):
            if (a, b) not in self.interactions:
                raise UnknownEndpoint(f"flow step {a}->{b} is not a declared interaction")
        self.flows.append(flow)

    def check_compatible(self, infra: Infrastructure) -> None:
        """Requirement domains must correspond to the infrastructure's capabilities."""
        if self.service_assets != infra.node_assets:
            raise SpecMismatch(f"{self.id}: service assets do not match the node assets")
        if self.interaction_assets != infra.path_assets:
            raise SpecMismatch(f"{self.id}: interaction assets do not match the path assets")

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph(id=self.id, flows=json.dumps([list(f) for f in self.flows]))
        for sid, req in self.services.items():
            g.add_node(sid, **_flat(self.service_assets, req))
        for (a, b), req in self.interactions.items():
            g.add_edge(a, b, **_flat(self.interaction_assets, req))
        return g


# -- path aggregation ----------------------------------------------------------------


def _link_values(infra: Infrastructure, residual, a: str, b: str) -> Mapping:
    if residual is not None:
        return residual.link_residual(a, b)
    return infra._link(a, b).capacity


def _fold(path_assets: AssetSet, acc: dict | None, values: Mapping) -> dict:
    if acc is None:
        return {n: v for n, v in values.items() if n in path_assets}
    out = dict(acc)
    for name, v in values.items():
        spec = path_assets._specs.get(name)
        if spec is None:
            continue
        out[name] = spec._agg(out[name], v) if name in out else v
    return out


def path_bucket(infra: Infrastructure, path: Path | Iterable[str], residual=None) -> dict:
    """Fold link values along ``path`` using the path-level asset kinds."""
    nodes = path.nodes if isinstance(path, Path) else tuple(path)
    for n in nodes:
        if not infra.has_node(n) or not infra.is_active(n):
            raise BrokenPath(f"node {n!r} on path is missing or inactive")
    if len(set(nodes)) != len(nodes):
        raise BrokenPath("path repeats a node")
    acc = None
    for a, b in zip(nodes, nodes[1:]):
        if not infra.has_link(a, b):
            raise BrokenPath(f"no link between {a!r} and {b!r}")
        acc = _fold(infra.path_assets, acc, _link_values(infra, residual, a, b))
    return acc or {}


_DECOMPOSABLE = (AssetKind.CONCAVE, AssetKind.CONVEX, AssetKind.SYMBOLIC, AssetKind.MULTIPLICATIVE)


class _Search:
    """Latency-ordered path search over the active subgraph.

    Links that fail a requirement whose path-level kind folds with max, min,
    intersection or product are pruned up front: for max/min/intersection a
    path satisfies the requirement exactly when every link does, and for a
    product of probabilities every link is a necessary witness.
    """

    def __init__(self, infra: Infrastructure, req: Mapping | None, residual):
        self.infra = infra
        self.residual = residual
        self.req = dict(req or {})
        pa = infra.path_assets
        for name in self.req:
            pa[name]  # raises SpecMismatch on unknown assets
        self.prune = {n: pa[n] for n in self.req if pa[n].kind in _DECOMPOSABLE}
        self.lat = infra.latency_asset
        self.lat_spec = pa[self.lat] if self.lat else None
        self._ok: dict[tuple[str, str], bool] = {}

    def values(self, a, b):
        return _link_values(self.infra, self.residual, a, b)

    def link_ok(self, a: str, b: str) -> bool:
        key = link_key(a, b)
        ok = self._ok.get(key)
        if ok is None:
            vals = self.values(a, b)
            ok = all(spec.satisfies(self.req[n], vals.get(n, spec.lower)) for n, spec in self.prune.items())
            self._ok[key] = ok
        return ok

    def step(self, cost, a, b):
        if self.lat_spec is None:
            return cost + 1
        v = self.values(a, b).get(self.lat)
        return cost if v is None else self.lat_spec._agg(cost, v)

    def start_cost(self):
        return 0 if self.lat_spec is None else self.lat_spec.identity

    def dijkstra(self, src, dst=None, banned_nodes=frozenset(), banned_links=frozenset(), start=None):
        """Best labels from ``src``; stops early when ``dst`` is settled."""
        infra = self.infra
        adj = infra._adj
        nodes = infra._nodes
        start_cost = self.start_cost() if start is None else start
        # labels order by (latency, hops, node sequence): with max-folded
        # latency many paths tie, and hop count keeps the witness short
        heap = [(start_cost, 0, (src,))]
        settled: dict[str, tuple] = {}
        while heap:
            cost, _, path = heapq.heappop(heap)
            u = path[-1]
            if u in settled:
                continue
            settled[u] = (cost, path)
            if u == dst:
                break
            for w in adj[u]:
                if w in settled or w in banned_nodes or not nodes[w].active:
                    continue
                if (u, w) in banned_links or not self.link_ok(u, w):
                    continue
                heapq.heappush(heap, (self.step(cost, u, w), len(path), path + (w,)))
        return settled

    def satisfies(self, path: tuple) -> bool:
        if not self.req:
            return True
        bucket = path_bucket(self.infra, path, self.residual)
        return self.infra.path_assets.satisfies(self.req, bucket)

    def path_cost(self, path: tuple):
        cost = self.start_cost()
        for a, b in zip(path, path[1:]):
            cost = self.step(cost, a, b)
        return cost

    def k_shortest(self, src, dst, k):
        """Yen's algorithm in (cost, hops, node sequence) order."""
        first = self.dijkstra(src, dst).get(dst)
        if first is None:
            return
        found = [first[1]]
        yield first[1]
        candidates: list[tuple] = []
        seen = {first[1]}
        while len(found) < k:
            last = found[-1]
            for i in range(len(last) - 1):
                spur, root = last[i], last[: i + 1]
                banned_links = set()
                for p in found:
                    if p[: i + 1] == root and len(p) > i + 1:
                        banned_links.add((p[i], p[i + 1]))
                        banned_links.add((p[i + 1], p[i]))
                banned_nodes = frozenset(root[:-1])
                res = self.dijkstra(
                    spur, dst, banned_nodes, frozenset(banned_links), start=self.path_cost(root)
                ).get(dst)
                if res is None:
                    continue
                full = root[:-1] + res[1]
                if full not in seen:
                    seen.add(full)
                    heapq.heappush(candidates, (res[0], len(full), full))
            if not candidates:
                return
            _, _, nxt = heapq.heappop(candidates)
            found.append(nxt)
            yield nxt


def find_path(
    infra: Infrastructure,
    src: str,
    dst: str,
    req: Mapping | None = None,
    residual=None,
    k: int = 8,
) -> Path | None:
    """Latency-greedy simple path from ``src`` to ``dst`` meeting ``req``.

    Runs a latency-ordered Dijkstra (ties broken by node sequence) on the
    active subgraph, re-checks the full requirement on the result and, if it
    fails, examines up to ``k`` shortest simple paths. ``None`` when no
    examined path qualifies.
    """
    if not infra.has_node(src) or not infra.has_node(dst):
        return None
    if not infra.is_active(src) or not infra.is_active(dst):
        return None
    search = _Search(infra, req, residual)
    if src == dst:
        return Path((src,))
    best = search.dijkstra(src, dst).get(dst)
    if best is None:
        return None
    if search.satisfies(best[1]):
        return Path(best[1])
    for candidate in search.k_shortest(src, dst, k):
        if search.satisfies(candidate):
            return Path(candidate)
    return None


def candidate_paths(
    infra: Infrastructure,
    src: str,
    dst: str,
    req: Mapping | None = None,
    residual=None,
    k: int = 16,
):
    """Up to ``k`` qualifying simple paths, best first (lazily computed)."""
    if not (infra.has_node(src) and infra.has_node(dst)):
        return
    if not (infra.is_active(src) and infra.is_active(dst)):
        return
    if src == dst:
        yield Path((src,))
        return
    search = _Search(infra, req, residual)
    for candidate in search.k_shortest(src, dst, k):
        if search.satisfies(candidate):
            yield Path(candidate)


def shortest_latencies(infra: Infrastructure, source: str, residual=None) -> dict[str, tuple]:
    """``{node: (latency, Path)}`` for every active node reachable from ``source``."""
    if not infra.has_node(source) or not infra.is_active(source):
        return {}
    search = _Search(infra, None, residual)
    settled = search.dijkstra(source)
    return {n: (cost, Path(p)) for n, (cost, p) in settled.items()}


def path_latency(infra: Infrastructure, path: Path, residual=None) -> float:
    if path.hops == 0:
        return 0.0
    lat = infra.latency_asset
    if lat is None:
        return float(path.hops)
    return float(path_bucket(infra, path, residual).get(lat, 0.0))


def all_simple_paths(infra: Infrastructure, src: str, dst: str):
    """Every simple path between active ``src`` and ``dst`` (exponential; small graphs only)."""
    if not (infra.has_node(src) and infra.has_node(dst)):
        return
    if not (infra.is_active(src) and infra.is_active(dst)):
        return
    if src == dst:
        yield Path((src,))
        return
    stack = [(src, (src,))]
    while stack:
        u, path = stack.pop()
        for w in sorted(infra._adj[u]):
            if w in path or not infra.is_active(w):
                continue
            if w == dst:
                yield Path(path + (w,))
            else:
                stack.append((w, path + (w,)))


# -- GML ---------------------------------------------------------------------------


def _flat(assets: AssetSet, bucket: Mapping, prefix: str = "") -> dict:
    out = {}
    for name, value in bucket.items():
        spec = assets._specs.get(name)
        if spec is not None and spec.kind is AssetKind.SYMBOLIC:
            value = ",".join(sorted(value))
        elif isinstance(value, float):
            value = _gml_float(value)
        out[prefix + name] = value
    return out


def _gml_float(x: float):
    if x == float("inf"):
        return "inf"
    return float(format(x, ".9g"))


def _unflat(assets: AssetSet, attrs: Mapping, prefix: str = "") -> dict:
    out = {}
    for spec in assets:
        key = prefix + spec.name
        if key not in attrs:
            continue
        value = attrs[key]
        if spec.kind is AssetKind.SYMBOLIC:
            value = [s for s in str(value).split(",") if s]
        out[spec.name] = spec.normalize(value)
    return out


_RESERVED = {"active", "label", "id"}


def to_gml_string(graph: nx.Graph) -> str:
    return "\n".join(nx.generate_gml(graph)) + "\n"


def write_infrastructure_gml(infra: Infrastructure, path, residual=None) -> None:
    g = infra.to_networkx(residual)
    g.graph["node_assets"] = json.dumps(infra.node_assets.to_list(), sort_keys=True)
    g.graph["link_assets"] = json.dumps(infra.link_assets.to_list(), sort_keys=True)
    g.graph["path_assets"] = json.dumps(infra.path_assets.to_list(), sort_keys=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_gml_string(g))


def read_infrastructure_gml(path, node_assets=None, link_assets=None, path_assets=None) -> Infrastructure:
    """Load an infrastructure; residual_* attributes (snapshots) are ignored."""
    g = nx.read_gml(path, label="label")
    if node_assets is None and "node_assets" in g.graph:
        node_assets = AssetSet.from_list(json.loads(g.graph["node_assets"]))
    if link_assets is None and "link_assets" in g.graph:
        link_assets = AssetSet.from_list(json.loads(g.graph["link_assets"]))
    if path_assets is None and "path_assets" in g.graph:
        path_assets = AssetSet.from_list(json.loads(g.graph["path_assets"]))
    infra = Infrastructure(str(g.graph.get("id", "infrastructure")), node_assets, link_assets, path_assets)
    for nid, attrs in g.nodes(data=True):
        extra = {
            k: v for k, v in attrs.items()
            if k not in _RESERVED and not k.startswith("residual_") and k not in infra.node_assets
        }
        infra.add_node(str(nid), _unflat(infra.node_assets, attrs), **extra)
        if not int(attrs.get("active", 1)):
            infra.set_active(str(nid), False)
    for a, b, attrs in g.edges(data=True):
        extra = {
            k: v for k, v in attrs.items()
            if k not in _RESERVED and not k.startswith("residual_") and k not in infra.link_assets
        }
        infra.add_link(str(a), str(b), _unflat(infra.link_assets, attrs), **extra)
    return infra


def write_application_gml(app: Application, path) -> None:
    g = app.to_networkx()
    g.graph["service_assets"] = json.dumps(app.service_assets.to_list(), sort_keys=True)
    g.graph["interaction_assets"] = json.dumps(app.interaction_assets.to_list(), sort_keys=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_gml_string(g))


def read_application_gml(path) -> Application:
    g = nx.read_gml(path, label="label")
    sa = AssetSet.from_list(json.loads(g.graph["service_assets"])) if "service_assets" in g.graph else None
    ia = AssetSet.from_list(json.loads(g.graph["interaction_assets"])) if "interaction_assets" in g.graph else None
    app = Application(str(g.graph.get("id", "application")), sa, ia)
    for sid, attrs in g.nodes(data=True):
        app.add_service(str(sid), _unflat(app.service_assets, attrs))
    for a, b, attrs in g.edges(data=True):
        app.add_interaction(str(a), str(b), _unflat(app.interaction_assets, attrs))
    for flow in json.loads(g.graph.get("flows", "[]")):
        app.add_flow(flow)
    return app
