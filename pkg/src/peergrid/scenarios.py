"""Scenario documents: agent rosters, tariffs and run configuration.

A scenario JSON names a topology (bundled name, file path or inline
document), the tariff, the service-charge rate, solver settings and the
agents.  Agents are either listed with explicit parameters or described by
buses plus sampling ranges; sampled parameters are drawn deterministically
from the scenario seed, so a scenario file pins an exact market instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .grid import NetworkTopology, load_topology
from .market import ConsumerParams, GridTariff, ProducerParams, SolverConfig

_DATA_DIR = Path(__file__).parent / "data"
BUNDLED_SCENARIOS = ("case33", "tiny1x1", "tiny2x2")


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario document."""


@dataclass(frozen=True)
class MisbehaviorScript:
    """Scripted producer faults: short delivery and late injection reports."""

    deliver_fraction: float = 1.0
    ei_delay: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.deliver_fraction <= 1.0:
            raise ScenarioError("deliver_fraction must lie in [0, 1]")
        if self.ei_delay < 0:
            raise ScenarioError("ei_delay must be non-negative")


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: NetworkTopology
    producers: dict[str, ProducerParams]
    consumers: dict[str, ConsumerParams]
    tariff: GridTariff
    omega: float
    groups: int
    intervals: int
    seed: int
    ad_mode: bool
    solver: SolverConfig
    sigma_segment: int = 1
    merkle_leaves: int = 8
    lp_expiry_ticks: int = 10
    consumer_balance_cents: int = 1_000_000
    misbehavior: dict[str, MisbehaviorScript] = field(default_factory=dict)

    def with_overrides(
        self,
        omega: float | None = None,
        groups: int | None = None,
        seed: int | None = None,
        epsilon: float | None = None,
        ad_mode: bool | None = None,
        intervals: int | None = None,
    ) -> Scenario:
        """Copy with command-line style overrides applied."""
        out = self
        if omega is not None:
            if omega < 0:
                raise ScenarioError("omega must be non-negative")
            out = replace(out, omega=float(omega))
        if groups is not None:
            if groups < 1:
                raise ScenarioError("group count must be at least 1")
            out = replace(out, groups=int(groups))
        if seed is not None:
            out = replace(out, seed=int(seed))
        if epsilon is not None:
            if epsilon <= 0:
                raise ScenarioError("epsilon must be positive")
            out = replace(out, solver=replace(out.solver, epsilon=float(epsilon)))
        if ad_mode is not None:
            out = replace(out, ad_mode=bool(ad_mode))
        if intervals is not None:
            if intervals < 1:
                raise ScenarioError("intervals must be at least 1")
            out = replace(out, intervals=int(intervals))
        return out


def bundled_scenario_path(name: str) -> Path:
    return _DATA_DIR / f"{name}_scenario.json"


def load_scenario(source: str | Path | dict) -> Scenario:
    """Load a scenario from a bundled name, file path, JSON text or dict."""
    doc = _read_document(source)
    try:
        return _build(doc)
    except KeyError as exc:
        raise ScenarioError(f"missing required key: {exc}") from exc


def _read_document(source: str | Path | dict) -> dict:
    if isinstance(source, dict):
        return source
    if isinstance(source, Path):
        return json.loads(source.read_text())
    text = str(source)
    if text in BUNDLED_SCENARIOS:
        return json.loads(bundled_scenario_path(text).read_text())
    if text.lstrip().startswith("{"):
        return json.loads(text)
    path = Path(text)
    if not path.exists():
        raise ScenarioError(f"no such scenario: {text}")
    return json.loads(path.read_text())


def _build(doc: dict) -> Scenario:
    topology_ref = doc["topology"]
    if isinstance(topology_ref, str) and topology_ref == "case33":
        topology = load_topology(_DATA_DIR / "case33_topology.json")
    else:
        topology = load_topology(topology_ref)

    tariff_doc = doc["tariff"]
    tariff = GridTariff(
        feed_in=float(tariff_doc["feed_in"]), retail=float(tariff_doc["retail"])
    )
    solver_doc = doc.get("solver", {})
    solver = SolverConfig(
        epsilon=float(solver_doc.get("epsilon", 1e-3)),
        rho_price=float(solver_doc.get("rho_price", 0.01)),
        rho_dual=float(solver_doc.get("rho_dual", 0.001)),
        zeta_decay=float(solver_doc.get("zeta_decay", 5000.0)),
        max_iterations=int(solver_doc.get("max_iterations", 500_000)),
        min_trade=float(solver_doc.get("min_trade", 0.01)),
    )

    seed = int(doc.get("seed", 0))
    producers: dict[str, ProducerParams] = {}
    consumers: dict[str, ConsumerParams] = {}
    if "agents" in doc:
        for raw in doc["agents"]:
            _add_explicit_agent(raw, producers, consumers)
    elif "agent_sampling" in doc:
        _sample_agents(doc["agent_sampling"], seed, producers, consumers)
    else:
        raise ScenarioError("scenario lists neither agents nor agent_sampling")

    bus_set = set(topology.buses)
    for agent_id, params in {**producers, **consumers}.items():
        if params.bus not in bus_set:
            raise ScenarioError(f"agent {agent_id} references undeclared bus {params.bus}")

    misbehavior = {
        agent: MisbehaviorScript(
            deliver_fraction=float(spec.get("deliver_fraction", 1.0)),
            ei_delay=int(spec.get("ei_delay", 1)),
        )
        for agent, spec in doc.get("misbehavior", {}).items()
    }
    for agent in misbehavior:
        if agent not in producers:
            raise ScenarioError(f"misbehavior script names unknown producer {agent}")

    return Scenario(
        name=str(doc.get("name", "scenario")),
        topology=topology,
        producers=producers,
        consumers=consumers,
        tariff=tariff,
        omega=float(doc.get("omega", 0.0)),
        groups=int(doc.get("groups", 1)),
        intervals=int(doc.get("intervals", 1)),
        seed=seed,
        ad_mode=bool(doc.get("ad_mode", True)),
        solver=solver,
        sigma_segment=int(doc.get("sigma_segment", 1)),
        merkle_leaves=int(doc.get("merkle_leaves", 8)),
        lp_expiry_ticks=int(doc.get("lp_expiry_ticks", 10)),
        consumer_balance_cents=int(doc.get("consumer_balance_cents", 1_000_000)),
        misbehavior=misbehavior,
    )


def _add_explicit_agent(raw: dict, producers: dict, consumers: dict) -> None:
    role = raw["role"]
    agent_id = str(raw.get("id") or f"{'P' if role == 'producer' else 'C'}{raw['bus']}")
    if agent_id in producers or agent_id in consumers:
        raise ScenarioError(f"duplicate agent id {agent_id}")
    common = dict(
        a=float(raw["a"]),
        b=float(raw["b"]),
        e_min=float(raw.get("e_min", 0.0)),
        e_max=float(raw["e_max"]),
        bus=int(raw["bus"]),
        reputation=float(raw.get("reputation", 1.0)),
        alpha=float(raw.get("alpha", 0.5)),
        beta=float(raw.get("beta", 0.5)),
    )
    if role == "producer":
        producers[agent_id] = ProducerParams(c=float(raw.get("c", 0.0)), **common)
    elif role == "consumer":
        consumers[agent_id] = ConsumerParams(**common)
    else:
        raise ScenarioError(f"unknown role {role!r}")


def _sample_agents(spec: dict, seed: int, producers: dict, consumers: dict) -> None:
    """Draw agent parameters from the configured ranges, fixed draw order."""
    rng = np.random.default_rng(seed)

    def draw(bounds) -> float:
        lo, hi = float(bounds[0]), float(bounds[1])
        return float(rng.uniform(lo, hi))

    p_ranges = spec["producer_ranges"]
    for bus in spec["producer_buses"]:
        alpha = draw(p_ranges.get("alpha", [0.0, 1.0]))
        e_min = draw(p_ranges["e_min"])
        e_max = draw(p_ranges["e_max"])
        producers[f"P{bus}"] = ProducerParams(
            a=draw(p_ranges["a"]),
            b=draw(p_ranges["b"]),
            c=float(p_ranges.get("c", [0.0, 0.0])[0]),
            e_min=min(e_min, e_max),
            e_max=e_max,
            bus=int(bus),
            reputation=draw(p_ranges.get("reputation", [0.0, 1.0])),
            alpha=alpha,
            beta=1.0 - alpha,
        )
    c_ranges = spec["consumer_ranges"]
    for bus in spec["consumer_buses"]:
        alpha = draw(c_ranges.get("alpha", [0.0, 1.0]))
        e_min = draw(c_ranges["e_min"])
        e_max = draw(c_ranges["e_max"])
        consumers[f"C{bus}"] = ConsumerParams(
            a=draw(c_ranges["a"]),
            b=draw(c_ranges["b"]),
            e_min=min(e_min, e_max),
            e_max=e_max,
            bus=int(bus),
            reputation=draw(c_ranges.get("reputation", [0.0, 1.0])),
            alpha=alpha,
            beta=1.0 - alpha,
        )
