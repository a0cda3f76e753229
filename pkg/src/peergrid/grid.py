"""Radial distribution network model: electrical distances and service charges.

The network is a tree of buses connected by lines with lengths in km.  For a
bilateral trade on a radial feeder the absolute power transfer distribution
factor of a line is 1 if the line lies on the unique path between the two
buses and 0 otherwise, so the electrical distance between two buses reduces
to the length of the tree path between them.  The grid service charge for a
trade is the per-km rate times that distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class TopologyError(ValueError):
    """Base class for malformed topology documents."""


class CycleDetected(TopologyError):
    pass


class Disconnected(TopologyError):
    pass


class DanglingReference(TopologyError):
    pass


class DuplicateLine(TopologyError):
    pass


class UnknownBus(KeyError):
    pass


class UnknownLine(KeyError):
    pass


class NegativeRate(ValueError):
    pass


@dataclass(frozen=True)
class Line:
    line_id: str
    from_bus: int
    to_bus: int
    length_km: float


@dataclass(frozen=True)
class ServiceCharge:
    """Per-kWh fee for a bilateral trade: ``charge = rate * distance``."""

    rate: float      # cents per kWh per km
    charge: float    # cents per kWh


@dataclass(frozen=True)
class NetworkTopology:
    """Validated radial bus/line graph.

    Immutable after construction; all queries are pure functions, so a
    topology can be shared freely across threads.
    """

    buses: tuple[int, ...]
    lines: tuple[Line, ...]
    slack_bus: int
    # parent[b] = (parent bus, connecting line), rooted at slack; slack maps to None
    _parents: dict[int, tuple[int, Line] | None] = field(repr=False, compare=False, default_factory=dict)
    _depth: dict[int, int] = field(repr=False, compare=False, default_factory=dict)

    def line(self, line_id: str) -> Line:
        for ln in self.lines:
            if ln.line_id == line_id:
                return ln
        raise UnknownLine(line_id)

    def require_bus(self, bus: int) -> None:
        if bus not in self._depth:
            raise UnknownBus(bus)

    def path_lines(self, bus_a: int, bus_b: int) -> list[Line]:
        """Lines on the unique tree path between two buses."""
        self.require_bus(bus_a)
        self.require_bus(bus_b)
        a, b = bus_a, bus_b
        left: list[Line] = []
        right: list[Line] = []
        while self._depth[a] > self._depth[b]:
            parent, ln = self._parents[a]  # type: ignore[misc]
            left.append(ln)
            a = parent
        while self._depth[b] > self._depth[a]:
            parent, ln = self._parents[b]  # type: ignore[misc]
            right.append(ln)
            b = parent
        while a != b:
            pa, la = self._parents[a]  # type: ignore[misc]
            pb, lb = self._parents[b]  # type: ignore[misc]
            left.append(la)
            right.append(lb)
            a, b = pa, pb
        return left + right[::-1]


def load_topology(spec: dict | str | Path) -> NetworkTopology:
    """Build and validate a topology from a document (dict, JSON text, or path).

    The document lists ``buses``, ``lines`` (each with ``id``, ``from``,
    ``to`` and optional ``length_km``, default 1.0) and a ``slack`` bus.
    Rejects graphs that are not radial trees.
    """
    doc = _read_document(spec)
    try:
        buses = [int(b) for b in doc["buses"]]
        slack = int(doc["slack"])
        raw_lines = doc["lines"]
    except KeyError as exc:
        raise TopologyError(f"missing required key: {exc}") from exc

    if len(set(buses)) != len(buses):
        raise TopologyError("duplicate bus identifiers")
    bus_set = set(buses)
    if slack not in bus_set:
        raise DanglingReference(f"slack bus {slack} not declared")

    lines = []
    seen_ids = set()
    for raw in raw_lines:
        ln = Line(
            line_id=str(raw["id"]),
            from_bus=int(raw["from"]),
            to_bus=int(raw["to"]),
            length_km=float(raw.get("length_km", 1.0)),
        )
        if ln.line_id in seen_ids:
            raise DuplicateLine(ln.line_id)
        seen_ids.add(ln.line_id)
        if ln.from_bus not in bus_set or ln.to_bus not in bus_set:
            raise DanglingReference(f"line {ln.line_id} references undeclared bus")
        if ln.length_km <= 0:
            raise TopologyError(f"line {ln.line_id} has non-positive length")
        lines.append(ln)

    # Union-find: an edge joining two already-connected buses closes a cycle.
    root = {b: b for b in buses}

    def find(x: int) -> int:
        while root[x] != x:
            root[x] = root[root[x]]
            x = root[x]
        return x

    for ln in lines:
        ra, rb = find(ln.from_bus), find(ln.to_bus)
        if ra == rb:
            raise CycleDetected(f"line {ln.line_id} closes a cycle")
        root[ra] = rb
    if len({find(b) for b in buses}) > 1:
        raise Disconnected("graph has more than one component")
    # Connected and acyclic implies |lines| == |buses| - 1.

    parents: dict[int, tuple[int, Line] | None] = {slack: None}
    depth = {slack: 0}
    adjacency: dict[int, list[tuple[int, Line]]] = {b: [] for b in buses}
    for ln in lines:
        adjacency[ln.from_bus].append((ln.to_bus, ln))
        adjacency[ln.to_bus].append((ln.from_bus, ln))
    frontier = [slack]
    while frontier:
        bus = frontier.pop()
        for neighbor, ln in adjacency[bus]:
            if neighbor not in depth:
                depth[neighbor] = depth[bus] + 1
                parents[neighbor] = (bus, ln)
                frontier.append(neighbor)

    return NetworkTopology(
        buses=tuple(buses),
        lines=tuple(lines),
        slack_bus=slack,
        _parents=parents,
        _depth=depth,
    )


def line_ptdf(topo: NetworkTopology, line_id: str, inject: int, withdraw: int) -> float:
    """Absolute PTDF of a line for a bilateral trade between two buses.

    On a radial network the full traded power flows over every line on the
    tree path between injection and withdrawal, and nothing elsewhere, so
    the value is exactly 1.0 on path lines and 0.0 off them.
    """
    ln = topo.line(line_id)
    if inject == withdraw:
        topo.require_bus(inject)
        return 0.0
    return 1.0 if ln in topo.path_lines(inject, withdraw) else 0.0


def electrical_distance(topo: NetworkTopology, bus_i: int, bus_j: int) -> float:
    """Sum over lines of |PTDF| times length: the km length of the tree path."""
    if bus_i == bus_j:
        topo.require_bus(bus_i)
        return 0.0
    return sum(ln.length_km for ln in topo.path_lines(bus_i, bus_j))


def grid_service_charge(rate: float, distance_km: float) -> ServiceCharge:
    """Per-kWh charge for a trade spanning ``distance_km`` at ``rate`` ¢/kWh/km."""
    if rate < 0:
        raise NegativeRate(rate)
    if distance_km < 0:
        raise ValueError("distance must be non-negative")
    return ServiceCharge(rate=rate, charge=rate * distance_km)


def _read_document(spec: dict | str | Path) -> dict:
    if isinstance(spec, dict):
        return spec
    if isinstance(spec, Path):
        return json.loads(spec.read_text())
    text = str(spec)
    if text.lstrip().startswith("{"):
        return json.loads(text)
    return json.loads(Path(text).read_text())


def bundled_case33() -> NetworkTopology:
    """The bundled 33-bus radial test feeder."""
    return load_topology(Path(__file__).parent / "data" / "case33_topology.json")
