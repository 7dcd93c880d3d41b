"""Typed resource algebra.

Every resource dimension (CPU cores, latency, availability, labels...) is an
:class:`AssetSpec`: a domain bounded by a bottom and a top value, an
aggregation operator and a comparison relation. The five kinds differ only in
those three ingredients:

==============  ===========================  ==============  ===========
kind            domain                       compare         aggregate
==============  ===========================  ==============  ===========
additive        lower <= a <= upper          a1 <= a2        a1 + a2
concave         lower <= a <= upper          a1 <= a2        max
convex          lower >= a >= upper          a1 >= a2        min
multiplicative  a in [0, 1], bounded         a1 <= a2        a1 * a2
symbolic        lower <= a <= upper (sets)   a1 subset a2    a1 & a2
==============  ===========================  ==============  ===========

Buckets are plain ``dict`` objects mapping asset names to values; an
:class:`AssetSet` interprets them element-wise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Iterator, Mapping

TOL = 1e-9
MAX_SYMBOLS = 64

Bucket = dict


class AssetError(Exception):
    """Base class of asset algebra errors."""


class DomainError(AssetError, ValueError):
    pass


class SpecMismatch(AssetError, ValueError):
    pass


class InsufficientCapacity(AssetError):
    pass


class OverRelease(AssetError):
    pass


class AssetKind(str, Enum):
    ADDITIVE = "additive"
    CONCAVE = "concave"
    CONVEX = "convex"
    MULTIPLICATIVE = "multiplicative"
    SYMBOLIC = "symbolic"


_DEFAULT_CONSUMABLE = {
    AssetKind.ADDITIVE: True,
    AssetKind.CONVEX: True,
    AssetKind.CONCAVE: False,
    AssetKind.MULTIPLICATIVE: False,
    AssetKind.SYMBOLIC: False,
}


def _to_float(value: Any) -> float:
    if value is None:
        return math.inf
    if isinstance(value, str) and value.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    return float(value)


@dataclass(frozen=True)
class AssetSpec:
    """One asset dimension.

    ``lower`` is the bottom of the comparison order (``compare(lower, v) == 1``
    for every ``v``) and ``upper`` the top. For convex assets this means
    ``lower`` is the *largest* number. Omitted bounds default per kind.
    """

    name: str
    kind: AssetKind
    lower: Any = None
    upper: Any = None
    unit: str = ""
    consumable: bool | None = None
    universe: tuple = field(default=())

    def __post_init__(self):
        kind = AssetKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is AssetKind.SYMBOLIC:
            universe = tuple(sorted(set(map(str, self.universe or self.upper or ()))))
            if len(universe) > MAX_SYMBOLS:
                raise ValueError(f"{self.name}: symbolic universe exceeds {MAX_SYMBOLS} symbols")
            lower = frozenset(map(str, self.lower or ()))
            upper = frozenset(map(str, self.upper)) if self.upper is not None else frozenset(universe)
            if not (lower <= upper <= frozenset(universe)):
                raise ValueError(f"{self.name}: symbolic bounds must satisfy lower <= upper <= universe")
            object.__setattr__(self, "universe", universe)
        else:
            if self.universe:
                raise ValueError(f"{self.name}: only symbolic assets carry a universe")
            if kind is AssetKind.CONVEX:
                lower = _to_float(self.lower) if self.lower is not None else math.inf
                upper = float(self.upper) if self.upper is not None else 0.0
                if lower < upper or upper < 0:
                    raise ValueError(f"{self.name}: convex domain needs lower >= upper >= 0")
            elif kind is AssetKind.MULTIPLICATIVE:
                lower = float(self.lower) if self.lower is not None else 0.0
                upper = float(self.upper) if self.upper is not None else 1.0
                if not 0.0 <= lower <= upper <= 1.0:
                    raise ValueError(f"{self.name}: multiplicative domain needs 0 <= lower <= upper <= 1")
            else:
                lower = float(self.lower) if self.lower is not None else 0.0
                upper = _to_float(self.upper)
                if lower < 0 or lower > upper:
                    raise ValueError(f"{self.name}: domain needs 0 <= lower <= upper")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

        consumable = self.consumable
        if consumable is None:
            consumable = _DEFAULT_CONSUMABLE[kind]
        elif consumable and kind not in (AssetKind.ADDITIVE, AssetKind.CONVEX):
            raise ValueError(f"{self.name}: only additive and convex assets can be consumable")
        object.__setattr__(self, "consumable", bool(consumable))

    # -- domain ---------------------------------------------------------------

    @property
    def numeric(self) -> bool:
        return self.kind is not AssetKind.SYMBOLIC

    @property
    def identity(self):
        """Neutral element of :meth:`aggregate`."""
        if self.kind is AssetKind.ADDITIVE:
            return 0.0
        if self.kind is AssetKind.MULTIPLICATIVE:
            return 1.0
        if self.kind is AssetKind.SYMBOLIC:
            return frozenset(self.universe)
        return self.lower

    def normalize(self, value):
        if self.kind is AssetKind.SYMBOLIC:
            if isinstance(value, str):
                value = [value]
            return frozenset(map(str, value))
        if isinstance(value, bool) or value is None:
            raise DomainError(f"{self.name}: {value!r} is not a number")
        try:
            return _to_float(value)
        except (TypeError, ValueError):
            raise DomainError(f"{self.name}: {value!r} is not a number") from None

    def contains(self, value) -> bool:
        if self.kind is AssetKind.SYMBOLIC:
            return isinstance(value, frozenset) and self.lower <= value <= self.upper
        if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
            return False
        if self.kind is AssetKind.CONVEX:
            return self.upper - TOL <= value <= self.lower + TOL
        return self.lower - TOL <= value <= self.upper + TOL

    def validate(self, value):
        """Normalize ``value`` and raise :class:`DomainError` if it is outside the domain."""
        value = self.normalize(value)
        if not self.contains(value):
            raise DomainError(f"{self.name}: {_fmt(value)} outside domain [{_fmt(self.lower)}, {_fmt(self.upper)}]")
        return value

    # -- algebra --------------------------------------------------------------

    def aggregate(self, a1, a2):
        a1, a2 = self.validate(a1), self.validate(a2)
        return self._agg(a1, a2)

    def _agg(self, a1, a2):
        kind = self.kind
        if kind is AssetKind.ADDITIVE:
            return min(a1 + a2, self.upper)
        if kind is AssetKind.CONCAVE:
            return max(a1, a2)
        if kind is AssetKind.CONVEX:
            return min(a1, a2)
        if kind is AssetKind.MULTIPLICATIVE:
            return a1 * a2
        return a1 & a2

    def compare(self, a1, a2) -> int:
        """1 if ``a1`` precedes ``a2`` in this asset's order, else 0."""
        a1, a2 = self.validate(a1), self.validate(a2)
        return int(self._le(a1, a2))

    def _le(self, a1, a2) -> bool:
        if self.kind is AssetKind.SYMBOLIC:
            return a1 <= a2
        if self.kind is AssetKind.CONVEX:
            return a1 + TOL >= a2
        return a1 <= a2 + TOL

    def satisfies(self, requirement, capability) -> bool:
        """Whether ``capability`` meets ``requirement``.

        Additive, multiplicative and symbolic requirements are met by any
        capability ranked at or above them (``compare(req, cap)``). Concave and
        convex assets are bounds on a bottleneck value (maximum latency,
        minimum bandwidth), so the capability must rank at or below the
        requirement (``compare(cap, req)``). No domain validation: residual
        values are allowed to dip below the domain after a capacity cut.
        """
        if self.kind is AssetKind.CONCAVE or self.kind is AssetKind.CONVEX:
            return self._le(capability, requirement)
        return self._le(requirement, capability)

    def consume(self, capacity, amount):
        """Residual left after drawing ``amount`` from ``capacity``."""
        capacity, amount = self.validate(capacity), self.validate(amount)
        if not self.consumable:
            return capacity
        # both consumable kinds draw down numerically: amount must not exceed capacity
        if amount > capacity + TOL:
            raise InsufficientCapacity(f"{self.name}: {_fmt(amount)} exceeds {_fmt(capacity)}")
        left = capacity - amount
        return 0.0 if -TOL < left < 0.0 else left

    def release(self, residual, amount, capacity=None):
        """Inverse of :meth:`consume`: ``release(consume(c, a), a) == c``."""
        residual, amount = self.validate(residual), self.validate(amount)
        if not self.consumable:
            return residual
        restored = residual + amount
        ceiling = self.upper if self.kind is AssetKind.ADDITIVE else self.lower
        if capacity is not None:
            ceiling = min(ceiling, self.normalize(capacity))
        if restored > ceiling + TOL:
            raise OverRelease(f"{self.name}: releasing {_fmt(amount)} would exceed {_fmt(ceiling)}")
        return restored

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind.value}
        if self.kind is AssetKind.SYMBOLIC:
            out["lower"] = sorted(self.lower)
            out["upper"] = sorted(self.upper)
            out["universe"] = list(self.universe)
        else:
            out["lower"] = _num_out(self.lower)
            out["upper"] = _num_out(self.upper)
        out["unit"] = self.unit
        out["consumable"] = self.consumable
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "AssetSpec":
        return cls(
            name=data["name"],
            kind=AssetKind(data["kind"]),
            lower=data.get("lower"),
            upper=data.get("upper"),
            unit=data.get("unit", ""),
            consumable=data.get("consumable"),
            universe=tuple(data.get("universe", ())),
        )

    def with_kind(self, kind: AssetKind, **changes) -> "AssetSpec":
        """Same asset name and unit under another kind (path-level override)."""
        return AssetSpec(name=self.name, kind=kind, unit=self.unit, **changes)


def _num_out(x: float):
    if math.isinf(x):
        return "inf"
    return int(x) if float(x).is_integer() else x


def _fmt(v) -> str:
    if isinstance(v, frozenset):
        return "{" + ",".join(sorted(v)) + "}"
    return format(v, ".9g")


class AssetSet:
    """An ordered collection of asset specs governing buckets element-wise."""

    def __init__(self, specs: Iterable[AssetSpec] = ()):
        self._specs: dict[str, AssetSpec] = {}
        for spec in specs:
            if spec.name in self._specs:
                raise ValueError(f"duplicate asset {spec.name!r}")
            self._specs[spec.name] = spec

    def __getitem__(self, name: str) -> AssetSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise SpecMismatch(f"unknown asset {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._specs

    def __iter__(self) -> Iterator[AssetSpec]:
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)

    def __eq__(self, other) -> bool:
        return isinstance(other, AssetSet) and list(self) == list(other)

    def __repr__(self) -> str:
        return f"AssetSet({', '.join(f'{s.name}:{s.kind.value}' for s in self)})"

    @property
    def names(self) -> list[str]:
        return list(self._specs)

    def replace(self, *specs: AssetSpec) -> "AssetSet":
        """Copy with some specs swapped out by name (new names are appended)."""
        merged = dict(self._specs)
        for spec in specs:
            merged[spec.name] = spec
        return AssetSet(merged.values())

    def validate(self, bucket: Mapping | None) -> dict:
        """Normalized copy of ``bucket``; unknown names raise :class:`SpecMismatch`."""
        if not bucket:
            return {}
        out = {}
        for name, value in bucket.items():
            out[name] = self[name].validate(value)
        return {n: out[n] for n in self._specs if n in out}

    def bottom(self) -> dict:
        return {s.name: s.lower for s in self}

    def aggregate(self, b1: Mapping, b2: Mapping) -> dict:
        b1, b2 = self.validate(b1), self.validate(b2)
        return self._aggregate(b1, b2)

    def _aggregate(self, b1: Mapping, b2: Mapping) -> dict:
        out = {}
        for name, spec in self._specs.items():
            if name in b1 or name in b2:
                out[name] = spec._agg(b1.get(name, spec.identity), b2.get(name, spec.identity))
        return out

    def compare(self, b1: Mapping, b2: Mapping) -> int:
        b1, b2 = self.validate(b1), self.validate(b2)
        for name, spec in self._specs.items():
            if name in b1 or name in b2:
                if not spec._le(b1.get(name, spec.lower), b2.get(name, spec.lower)):
                    return 0
        return 1

    def satisfies(self, requirement: Mapping, capability: Mapping) -> bool:
        """Conjunction of :meth:`AssetSpec.satisfies` over the requirement's entries.

        Absent requirement entries impose nothing; absent capabilities count
        as the asset's bottom.
        """
        for name, req in requirement.items():
            spec = self._specs.get(name)
            if spec is None:
                raise SpecMismatch(f"unknown asset {name!r}")
            if not spec.satisfies(req, capability.get(name, spec.lower)):
                return False
        return True

    def consume(self, capacity: Mapping, amount: Mapping) -> dict:
        out = dict(self.validate(capacity))
        for name, value in self.validate(amount).items():
            spec = self._specs[name]
            out[name] = spec.consume(out.get(name, spec.lower), value)
        return out

    def release(self, residual: Mapping, amount: Mapping, capacity: Mapping | None = None) -> dict:
        out = dict(self.validate(residual))
        for name, value in self.validate(amount).items():
            spec = self._specs[name]
            cap = None if capacity is None else capacity.get(name)
            out[name] = spec.release(out.get(name, spec.lower), value, cap)
        return out

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self]

    @classmethod
    def from_list(cls, items: Iterable[Mapping]) -> "AssetSet":
        return cls(AssetSpec.from_dict(d) for d in items)


def encode_value(value):
    """JSON/GML friendly form of an asset value (symbolic sets become sorted lists)."""
    if isinstance(value, frozenset):
        return sorted(value)
    return value


# -- default assets ------------------------------------------------------------

def default_node_assets() -> AssetSet:
    return AssetSet([
        AssetSpec("cpu", AssetKind.ADDITIVE, unit="cores"),
        AssetSpec("ram", AssetKind.ADDITIVE, unit="MB"),
        AssetSpec("storage", AssetKind.ADDITIVE, unit="GB"),
        AssetSpec("gpu", AssetKind.ADDITIVE, unit="units"),
        AssetSpec("availability", AssetKind.MULTIPLICATIVE, unit="probability"),
        AssetSpec("processing_time", AssetKind.CONCAVE, unit="ms"),
    ])


def default_link_assets() -> AssetSet:
    return AssetSet([
        AssetSpec("latency", AssetKind.CONCAVE, unit="ms"),
        AssetSpec("bandwidth", AssetKind.ADDITIVE, unit="Mb/s"),
    ])


def default_path_assets(link_assets: AssetSet | None = None) -> AssetSet:
    """Path-level kinds: like the link set, but bandwidth is the bottleneck (convex)."""
    link_assets = link_assets if link_assets is not None else default_link_assets()
    if "bandwidth" not in link_assets:
        return link_assets
    bw = link_assets["bandwidth"]
    return link_assets.replace(bw.with_kind(AssetKind.CONVEX, consumable=False))
