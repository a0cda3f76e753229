"""Deterministic orchestration of full market intervals.

One interval walks the whole pipeline: agents advertise with location
proofs, read the advertisement database and prioritize partners, query the
grid operator for service charges, negotiate group by group, finalize the
agreed trades on the ledger, exchange the atomic payment/injection pair
(honoring any scripted under-delivery, which routes through dispute
resolution), and seal blocks.  Time advances in discrete ticks: one tick
per negotiation iteration, plus a few bookkeeping ticks per phase.

Everything is driven by the scenario seed; two runs of the same scenario
produce byte-identical exports.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import apol, grid, ledger as ledger_mod, market
from .scenarios import Scenario


@dataclass
class AgentRuntime:
    """Per-agent world state: meter, key commitment and certificate."""

    agent_id: str
    role: str                       # "producer" | "consumer"
    meter: apol.MeterIdentity
    commitment: apol.MerkleCommitment
    col_response: apol.CoLResponse
    trading_key: object             # leaf-0 private key, reused across intervals
    trading_pk: bytes
    next_leaf: int = 0

    @property
    def address(self) -> str:
        return self.trading_pk.hex()

    def fresh_leaf(self) -> int:
        index = self.next_leaf % self.commitment.leaf_count
        self.next_leaf += 1
        return index


@dataclass
class MarketResult:
    """Metrics of one simulated interval; totals recompute from the trades."""

    scenario_name: str
    interval: int
    omega: float
    groups: int
    trades: list[market.Trade]
    n_transactions: int             # EI transactions sealed this interval
    welfare: dict[str, float]
    producer_welfare_total: float
    consumer_welfare_total: float
    grid_import_total: float
    grid_export_total: float
    service_charge_total: float     # sum of energy * charge over trades
    iterations: int
    work_units: int                 # pair updates summed over iterations
    messages: int                   # negotiation messages (2 per pair update)
    messages_per_iteration: float
    negotiation_ticks: int
    gamma_queries: int
    converged: bool
    decision_variables: dict[str, float]
    disputes: int
    expired: int
    ledger_blocks: int
    ledger_bytes: int

    def summary_dict(self) -> dict:
        out = {
            "scenario": self.scenario_name,
            "interval": self.interval,
            "omega": self.omega,
            "groups": self.groups,
            "n_transactions": self.n_transactions,
            "total_traded_kwh": round(sum(t.energy for t in self.trades), 9),
            "producer_welfare_total": round(self.producer_welfare_total, 9),
            "consumer_welfare_total": round(self.consumer_welfare_total, 9),
            "grid_import_total": round(self.grid_import_total, 9),
            "grid_export_total": round(self.grid_export_total, 9),
            "service_charge_total": round(self.service_charge_total, 9),
            "iterations": self.iterations,
            "work_units": self.work_units,
            "messages": self.messages,
            "messages_per_iteration": round(self.messages_per_iteration, 9),
            "negotiation_ticks": self.negotiation_ticks,
            "gamma_queries": self.gamma_queries,
            "converged": self.converged,
            "decision_variables": self.decision_variables,
            "disputes": self.disputes,
            "expired": self.expired,
            "ledger_blocks": self.ledger_blocks,
            "ledger_bytes": self.ledger_bytes,
        }
        return out

    def trade_rows(self) -> list[dict]:
        rows = []
        for t in self.trades:
            rows.append(
                {
                    "interval": self.interval,
                    "producer": t.producer,
                    "consumer": t.consumer,
                    "energy_kwh": round(t.energy, 9),
                    "price_c_per_kwh": round(t.price, 9),
                    "charge_c_per_kwh": round(t.charge, 9),
                    "payment_cents": ledger_mod.price_cents(t.price, t.energy),
                }
            )
        return rows


def trades_csv(results: list[MarketResult]) -> str:
    """CSV export: one row per cleared trade."""
    buf = io.StringIO()
    fields = [
        "interval",
        "producer",
        "consumer",
        "energy_kwh",
        "price_c_per_kwh",
        "charge_c_per_kwh",
        "payment_cents",
    ]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for result in results:
        for row in result.trade_rows():
            writer.writerow(row)
    return buf.getvalue()


class Simulation:
    """World state for one scenario: CA, meters, certificates and the ledger."""

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.seed)
        self.clock = 0
        self.ca = apol.CaRegistry()
        self.ledger = ledger_mod.Ledger(
            ca=self.ca,
            ad_mode=scenario.ad_mode,
            lp_expiry_ticks=scenario.lp_expiry_ticks,
        )
        self.agents: dict[str, AgentRuntime] = {}
        self._install_agents()
        self._interval_counter = 0
        self._en_counter = 0

    def _install_agents(self) -> None:
        scenario = self.scenario
        roster = [("producer", aid, p.bus) for aid, p in scenario.producers.items()]
        roster += [("consumer", aid, c.bus) for aid, c in scenario.consumers.items()]

        meters = {}
        for role, agent_id, bus in roster:
            meters[agent_id] = apol.install_meter(
                self.ca, bus, sigma_segment=scenario.sigma_segment, rng=self.rng
            )
        meter_by_pk = {m.public_key: m for m in meters.values()}

        for role, agent_id, bus in roster:
            meter = meters[agent_id]
            commitment = apol.build_commitment(scenario.merkle_leaves, rng=self.rng)
            verifier_pk = self.ca.choose_verifier(self.rng, exclude=meter.public_key)
            response = apol.issue_col(
                meter_by_pk[verifier_pk], apol.request_col(meter, commitment), self.ca
            )
            runtime = AgentRuntime(
                agent_id=agent_id,
                role=role,
                meter=meter,
                commitment=commitment,
                col_response=response,
                trading_key=commitment.leaf_private_keys[0],
                trading_pk=commitment.leaf_public_keys[0],
            )
            self.agents[agent_id] = runtime
            self.ledger.register_agent(runtime.address, _reputation_of(scenario, agent_id))
            if role == "consumer":
                self.ledger.fund(runtime.address, scenario.consumer_balance_cents)

    # -- pipeline phases -----------------------------------------------------

    def _advertise(self) -> None:
        """Each agent publishes a location-proved offer or ask via the operator."""
        scenario = self.scenario
        for agent_id, params in scenario.producers.items():
            runtime = self.agents[agent_id]
            asking_price = params.b + params.a * params.e_max
            content = ledger_mod.AdvertisementTx.content_bytes(
                "offer", asking_price, params.reputation
            )
            proof = apol.attach_proof(
                runtime.commitment,
                runtime.col_response,
                runtime.meter.sigma,
                runtime.fresh_leaf(),
                content,
            )
            at = ledger_mod.AdvertisementTx.create(
                "offer", asking_price, params.reputation, proof
            )
            self.ledger.submit_advertisement(at, submitted_by=ledger_mod.GRID_OPERATOR)
        for agent_id, params in scenario.consumers.items():
            runtime = self.agents[agent_id]
            content = ledger_mod.AdvertisementTx.content_bytes(
                "ask", params.e_max, params.reputation
            )
            proof = apol.attach_proof(
                runtime.commitment,
                runtime.col_response,
                runtime.meter.sigma,
                runtime.fresh_leaf(),
                content,
            )
            at = ledger_mod.AdvertisementTx.create("ask", params.e_max, params.reputation, proof)
            self.ledger.submit_advertisement(at, submitted_by=ledger_mod.GRID_OPERATOR)
        self.clock += 1

    def _partner_distance(self, bus_a: int, bus_b: int, sigma_a: int, sigma_b: int) -> float:
        # At bus resolution the noisy locations are buses, so the electrical
        # distance applies; coarser locations fall back to segment offsets.
        if self.scenario.sigma_segment <= 1:
            return grid.electrical_distance(self.scenario.topology, bus_a, bus_b)
        return float(abs(sigma_a - sigma_b))

    def _prioritize(self) -> dict[str, market.PriorityPartition]:
        """Priority groups per agent from reputation and proximity of ads."""
        scenario = self.scenario
        partitions: dict[str, market.PriorityPartition] = {}
        sides = [
            (scenario.producers, scenario.consumers),
            (scenario.consumers, scenario.producers),
        ]
        for own_side, other_side in sides:
            for agent_id, params in own_side.items():
                runtime = self.agents[agent_id]
                distances = {}
                for partner_id, partner in other_side.items():
                    partner_rt = self.agents[partner_id]
                    distances[partner_id] = self._partner_distance(
                        params.bus, partner.bus, runtime.meter.sigma, partner_rt.meter.sigma
                    )
                if not distances:
                    continue
                normalizer = max(distances.values())
                indices = {
                    partner_id: market.priority_index(
                        params.alpha,
                        params.beta,
                        other_side[partner_id].reputation,
                        d,
                        normalizer,
                    )
                    for partner_id, d in distances.items()
                }
                partitions[agent_id] = market.partition_partners(
                    indices, scenario.groups, normalizer
                )
        return partitions

    def _first_round_pairs(self, partitions) -> dict[tuple[str, str], int]:
        pairs = {}
        for pid in self.scenario.producers:
            part_p = partitions.get(pid)
            if part_p is None:
                continue
            for cid in self.scenario.consumers:
                part_c = partitions.get(cid)
                if part_c is None:
                    continue
                try:
                    pairs[(pid, cid)] = max(part_p.group_of(cid), part_c.group_of(pid))
                except market.UnknownPartner:
                    continue
        return pairs

    def run_interval(self) -> MarketResult:
        """Execute the next market interval end to end and collect metrics."""
        scenario = self.scenario
        interval = self._interval_counter
        self._interval_counter += 1
        blocks_before = len(self.ledger.blocks)

        self._advertise()
        partitions = self._prioritize()
        pair_rounds = self._first_round_pairs(partitions)
        gamma_queries = len(pair_rounds)
        self.clock += 1

        settlement = market.negotiate(
            scenario.producers,
            scenario.consumers,
            partitions,
            topology=scenario.topology,
            tariff=scenario.tariff,
            config=scenario.solver,
            omega=scenario.omega,
        )
        self.clock += settlement.iterations

        disputes, expired = self._trade(settlement, interval)
        self.ledger.seal_all()

        interval_blocks = self.ledger.blocks[blocks_before:]
        sealed_ei = sum(
            1
            for block in interval_blocks
            for tx in block.transactions
            if isinstance(tx, ledger_mod.EnergyInjectionTx)
        )

        welfare = market.settlement_welfare(
            scenario.producers, scenario.consumers, settlement, scenario.tariff
        )
        footprint = self.ledger.measure_footprint()
        round1 = {pair for pair, rnd in pair_rounds.items() if rnd == 1}
        producer_partners = {
            pid: sum(1 for (p, _c) in round1 if p == pid) for pid in scenario.producers
        }
        consumer_partners = {
            cid: sum(1 for (_p, c) in round1 if c == cid) for cid in scenario.consumers
        }
        decision_variables = {
            "producer": _mean([2 * n + 2 for n in producer_partners.values()]),
            "consumer": _mean([n + 2 for n in consumer_partners.values()]),
        }

        return MarketResult(
            scenario_name=scenario.name,
            interval=interval,
            omega=scenario.omega,
            groups=scenario.groups,
            trades=settlement.trades,
            n_transactions=sealed_ei,
            welfare=welfare,
            producer_welfare_total=sum(welfare[p] for p in scenario.producers),
            consumer_welfare_total=sum(welfare[c] for c in scenario.consumers),
            grid_import_total=sum(settlement.grid_import.values()),
            grid_export_total=sum(settlement.grid_export.values()),
            service_charge_total=sum(t.energy * t.charge for t in settlement.trades),
            iterations=settlement.iterations,
            work_units=settlement.pair_updates,
            messages=settlement.messages,
            messages_per_iteration=(
                settlement.messages / settlement.iterations if settlement.iterations else 0.0
            ),
            negotiation_ticks=settlement.iterations,
            gamma_queries=gamma_queries,
            converged=settlement.converged,
            decision_variables=decision_variables,
            disputes=disputes,
            expired=expired,
            ledger_blocks=footprint.block_count,
            ledger_bytes=footprint.total_bytes,
        )

    def _trade(self, settlement: market.Settlement, interval: int) -> tuple[int, int]:
        """Finalize each cleared trade on the ledger: EN, then the LP/EI pair."""
        scenario = self.scenario
        disputes = 0
        expired = 0
        start = self.clock
        max_delay = 1
        for index, trade in enumerate(settlement.trades):
            producer = self.agents[trade.producer]
            consumer = self.agents[trade.consumer]
            script = scenario.misbehavior.get(trade.producer)
            delay = script.ei_delay if script else 1
            fraction = script.deliver_fraction if script else 1.0
            max_delay = max(max_delay, delay)

            self._en_counter += 1
            en = ledger_mod.EnergyNegotiationTx.create(
                amount=trade.energy,
                price=trade.price,
                producer_key=producer.trading_key,
                producer_pk=producer.trading_pk,
                consumer_key=consumer.trading_key,
                consumer_pk=consumer.trading_pk,
                nonce=self._en_counter,
            )
            self.ledger.finalize_negotiation(en)

            lp = ledger_mod.LatePaymentTx.create(
                price=ledger_mod.price_cents(trade.price, trade.energy),
                input_account=consumer.address,
                output_account=producer.address,
                en_ref=en.t_id,
                expiry_tick=start + scenario.lp_expiry_ticks,
                signer_key=consumer.trading_key,
            )
            self.ledger.submit_lp(lp, now=start)

            delivered = trade.energy * fraction
            ei = ledger_mod.EnergyInjectionTx.create(
                amount=delivered,
                lp_id=lp.t_id,
                producer_key=producer.trading_key,
                producer_pk=producer.trading_pk,
                consumer_key=consumer.trading_key,
                consumer_pk=consumer.trading_pk,
            )
            try:
                outcome = self.ledger.submit_ei(ei, now=start + delay)
            except ledger_mod.Expired:
                expired += 1
                continue
            if outcome.status == "dispute":
                disputes += 1
                replacement = ledger_mod.LatePaymentTx.create(
                    price=outcome.price_update.new_price,
                    input_account=consumer.address,
                    output_account=producer.address,
                    en_ref=en.t_id,
                    expiry_tick=start + delay + 1 + scenario.lp_expiry_ticks,
                    signer_key=consumer.trading_key,
                )
                self.ledger.submit_lp(replacement, now=start + delay + 1)
        self.clock = start + max_delay + 2
        return disputes, expired


def _reputation_of(scenario: Scenario, agent_id: str) -> float:
    if agent_id in scenario.producers:
        return scenario.producers[agent_id].reputation
    return scenario.consumers[agent_id].reputation


def _mean(values) -> float:
    values = list(values)
    return float(sum(values) / len(values)) if values else 0.0


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------


def run_interval(scenario: Scenario, interval_index: int = 0) -> MarketResult:
    """Run intervals 0..interval_index of a fresh world; return the last result."""
    if not 0 <= interval_index < scenario.intervals:
        raise ValueError("interval index outside the scenario horizon")
    sim = Simulation(scenario)
    result = sim.run_interval()
    for _ in range(interval_index):
        result = sim.run_interval()
    return result


def run_scenario(scenario: Scenario) -> tuple[list[MarketResult], Simulation]:
    """Run every interval of a fresh world; returns results plus the world."""
    sim = Simulation(scenario)
    results = [sim.run_interval() for _ in range(scenario.intervals)]
    return results, sim


def run_sweep(scenario: Scenario, omega_values: list[float]) -> list[MarketResult]:
    """One fresh, identically seeded run per service-charge rate.

    ``omega_values`` must be sorted ascending; the transaction count is
    expected to fall (weakly) as the rate climbs.
    """
    if list(omega_values) != sorted(omega_values):
        raise ValueError("omega values must be sorted ascending")
    results = []
    for omega in omega_values:
        sweep_scenario = scenario.with_overrides(omega=float(omega))
        results.append(run_interval(sweep_scenario, 0))
    return results


def compare_p2p_vs_grid(scenario: Scenario) -> dict:
    """Bilateral market on vs. tariff-only trading, same seeded world."""
    p2p = run_interval(scenario, 0)

    grid_only = market.grid_only_settlement(
        scenario.producers, scenario.consumers, scenario.tariff
    )
    welfare_off = market.settlement_welfare(
        scenario.producers, scenario.consumers, grid_only, scenario.tariff
    )
    return {
        "p2p": {
            "grid_import_kwh": p2p.grid_import_total,
            "grid_export_kwh": p2p.grid_export_total,
            "consumer_welfare": p2p.consumer_welfare_total,
            "producer_welfare": p2p.producer_welfare_total,
            "service_charge": p2p.service_charge_total,
            "n_transactions": p2p.n_transactions,
            "welfare": p2p.welfare,
        },
        "grid_only": {
            "grid_import_kwh": sum(grid_only.grid_import.values()),
            "grid_export_kwh": sum(grid_only.grid_export.values()),
            "consumer_welfare": sum(welfare_off[c] for c in scenario.consumers),
            "producer_welfare": sum(welfare_off[p] for p in scenario.producers),
            "service_charge": 0.0,
            "n_transactions": 0,
            "welfare": welfare_off,
        },
    }


def prioritization_ablation(scenario: Scenario) -> dict:
    """Same scenario with the configured group count vs. a single group."""
    if scenario.groups < 2:
        raise ValueError("ablation needs a scenario configured with 2 or more groups")
    with_result = run_interval(scenario, 0)
    without_result = run_interval(scenario.with_overrides(groups=1), 0)

    def metrics(result: MarketResult) -> dict:
        return {
            "groups": result.groups,
            "messages_per_iteration": result.messages_per_iteration,
            "iterations": result.iterations,
            "work_units": result.work_units,
            "negotiation_ticks": result.negotiation_ticks,
            "decision_variables": result.decision_variables,
            "n_transactions": result.n_transactions,
        }

    return {"with": metrics(with_result), "without": metrics(without_result)}
