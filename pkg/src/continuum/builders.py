"""Seeded infrastructure generators: hierarchical, star and random topologies.

Nodes belong to tiers (``edge`` at level 0, upward to ``cloud``). Resources
are drawn from per-tier ranges that grow geometrically with the level, and
links take latency and bandwidth ranges from the tiers they join.
"""
from __future__ import annotations

import math
from typing import Any, Mapping

import numpy as np

from .assets import AssetSet
from .graph import Infrastructure
from .rng import stream


class InvalidParams(ValueError):
    pass


# edge-tier (level 0) ranges; higher tiers multiply additive resources by scale**level
BASE_RESOURCES = {
    "cpu": (1, 4),
    "ram": (1024, 4096),
    "storage": (16, 64),
    "gpu": (0, 1),
}
AVAILABILITY = (0.95, 0.999)
PROCESSING_TIME = (4.0, 12.0)  # ms at the edge, halved per level up
LATENCY = (2.0, 8.0)  # ms, multiplied by (1 + highest level of the endpoints)
BANDWIDTH = (100, 500)  # Mb/s, multiplied by scale**(lowest level of the endpoints)

COMMON_DEFAULTS: dict[str, Any] = {"scale": 8.0, "tier_weights": None}
KIND_DEFAULTS: dict[str, dict[str, Any]] = {
    "hierarchical": {"tiers": 3, "fanout": 3, "redundancy": 2},
    "star": {"hub_mult": 4.0, "tiers": 3, "fanout": 3},
    "random": {"p": 0.1, "tiers": 3, "fanout": 3},
}


def tier_names(tiers: int) -> list[str]:
    """Top-down tier labels, e.g. ``['cloud', 'fog', 'edge']``."""
    if tiers == 2:
        return ["cloud", "edge"]
    if tiers == 3:
        return ["cloud", "fog", "edge"]
    return ["cloud"] + [f"fog{i}" for i in range(1, tiers - 1)] + ["edge"]


def _tier_sizes(n: int, tiers: int, fanout: float, weights=None) -> list[int]:
    raw = list(weights) if weights else [float(fanout) ** k for k in range(tiers)]
    total = sum(raw)
    sizes = [max(1, int(math.floor(n * w / total))) for w in raw]
    # largest tier absorbs the rounding remainder
    sizes[-1] += n - sum(sizes)
    if sizes[-1] < 1:
        raise InvalidParams(f"n={n} too small for {tiers} tiers")
    return sizes


def _levels(count: int, tiers: int, fanout: float, weights=None) -> list[int]:
    """Tier level per node, top tier first (level ``tiers - 1`` is cloud)."""
    if count <= 0:
        return []
    if count < tiers:
        return [tiers - 1] + [0] * (count - 1)
    sizes = _tier_sizes(count, tiers, fanout, weights)
    return [tiers - 1 - t for t, size in enumerate(sizes) for _ in range(size)]


def _check(kind: str, n: int, params: Mapping | None) -> dict:
    if kind not in KIND_DEFAULTS:
        raise InvalidParams(f"unknown topology kind {kind!r}")
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise InvalidParams(f"n must be an integer >= 2, got {n!r}")
    merged = dict(COMMON_DEFAULTS)
    merged.update(KIND_DEFAULTS[kind])
    for key, value in (params or {}).items():
        if key not in merged:
            raise InvalidParams(f"unknown parameter {key!r} for {kind} topology")
        merged[key] = value
    if merged["scale"] <= 0:
        raise InvalidParams("scale must be positive")
    if int(merged["tiers"]) < 2:
        raise InvalidParams("tiers must be >= 2")
    if merged["fanout"] <= 0:
        raise InvalidParams("fanout must be positive")
    if kind == "random" and not 0.0 < float(merged["p"]) <= 1.0:
        raise InvalidParams(f"edge probability p must be in (0, 1], got {merged['p']!r}")
    if kind == "star" and float(merged["hub_mult"]) <= 0:
        raise InvalidParams("hub_mult must be positive")
    if kind == "hierarchical" and int(merged["redundancy"]) < 1:
        raise InvalidParams("redundancy must be >= 1")
    if merged["tier_weights"] is not None and len(merged["tier_weights"]) != int(merged["tiers"]):
        raise InvalidParams("tier_weights needs one weight per tier")
    return merged


def _node_bucket(rng: np.random.Generator, level: int, scale: float, mult: float, assets: AssetSet) -> dict:
    out = {}
    for name, (lo, hi) in BASE_RESOURCES.items():
        if name in assets:
            factor = scale ** level * mult
            out[name] = float(int(rng.integers(lo, hi + 1)) * factor)
    if "availability" in assets:
        out["availability"] = round(float(rng.uniform(*AVAILABILITY)) ** (1.0 / (level + 1)), 6)
    if "processing_time" in assets:
        out["processing_time"] = round(float(rng.uniform(*PROCESSING_TIME)) / 2 ** level, 3)
    return out


def _link_bucket(rng: np.random.Generator, la: int, lb: int, scale: float, assets: AssetSet) -> dict:
    out = {}
    if "latency" in assets:
        out["latency"] = round(float(rng.uniform(*LATENCY)) * (1 + max(la, lb)), 3)
    if "bandwidth" in assets:
        out["bandwidth"] = float(int(rng.integers(BANDWIDTH[0], BANDWIDTH[1] + 1)) * scale ** min(la, lb))
    return out


def build_topology(
    kind: str,
    n: int,
    params: Mapping | None = None,
    seed: int = 0,
    node_assets: AssetSet | None = None,
    link_assets: AssetSet | None = None,
    path_assets: AssetSet | None = None,
    id: str | None = None,
) -> Infrastructure:
    """Generate a connected infrastructure; a pure function of its arguments."""
    p = _check(kind, n, params)
    rng = stream(seed, f"topology/{kind}")
    infra = Infrastructure(id or f"{kind}-{n}", node_assets, link_assets, path_assets)
    tiers = int(p["tiers"])
    names = tier_names(tiers)
    width = max(2, len(str(n - 1)))
    ids = [f"n{i:0{width}d}" for i in range(n)]
    scale = float(p["scale"])

    # ids are tier-major in every builder: cloud first, edge last
    if kind == "star":
        # the hub is node 0; leaves follow the tier mix of the remaining nodes
        levels = [tiers - 1] + _levels(n - 1, tiers, p["fanout"], p["tier_weights"])
    else:
        levels = _levels(n, tiers, p["fanout"], p["tier_weights"])

    for i, nid in enumerate(ids):
        mult = float(p["hub_mult"]) if kind == "star" and i == 0 else 1.0
        infra.add_node(nid, _node_bucket(rng, levels[i], scale, mult, infra.node_assets),
                       tier=names[tiers - 1 - levels[i]])

    def link(a: int, b: int):
        infra.add_link(ids[a], ids[b], _link_bucket(rng, levels[a], levels[b], scale, infra.link_assets))

    if kind == "hierarchical":
        bounds = []
        for level in range(tiers - 1, -1, -1):
            members = [i for i, lv in enumerate(levels) if lv == level]
            if members:
                bounds.append((members[0], members[-1] + 1))
        for (p0, p1), (c0, c1) in zip(bounds, bounds[1:]):
            parents = p1 - p0
            red = min(int(p["redundancy"]), parents)
            for j, child in enumerate(range(c0, c1)):
                for r in range(red):
                    link(p0 + (j + r) % parents, child)
    elif kind == "star":
        for leaf in range(1, n):
            link(0, leaf)
    else:
        prob = float(p["p"])
        for a in range(n):
            draws = rng.random(n - a - 1)
            for off, u in enumerate(draws):
                if u < prob:
                    link(a, a + 1 + off)
        _connect_components(infra, ids, rng, link)
    return infra


def _connect_components(infra: Infrastructure, ids: list[str], rng, link) -> None:
    index = {nid: i for i, nid in enumerate(ids)}
    seen: set[str] = set()
    components: list[list[int]] = []
    for nid in ids:
        if nid in seen:
            continue
        comp, stack = [], [nid]
        seen.add(nid)
        while stack:
            u = stack.pop()
            comp.append(index[u])
            for w in infra.neighbors(u):
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        components.append(sorted(comp))
    connected = list(components[0])
    for comp in components[1:]:
        anchor = connected[int(rng.integers(0, len(connected)))]
        link(anchor, comp[0])
        connected.extend(comp)
