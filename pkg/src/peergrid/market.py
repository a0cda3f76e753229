"""Agent economics and iterative market settlement.

Producers carry a quadratic generation cost, consumers a saturating quadratic
utility.  Bilateral trades are settled by a decentralized iterative scheme:
each producer adjusts its per-partner price against the supply/demand
mismatch and each consumer adjusts its per-partner quantity against the
received price, with dual variables steering both toward their flexibility
bounds.  Partners are negotiated group by group in priority order, and
whatever capacity or demand is left after the final group is exchanged with
the grid at the posted tariff.

A centralized solver for the same social-welfare program is included as a
reference; the decentralized iteration targets the same optimality
conditions and is expected to land on the same settlement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None


class NegativeEnergy(ValueError):
    pass


class UnknownPartner(KeyError):
    pass


class EmptyCandidateSet(ValueError):
    pass


class Infeasible(ValueError):
    """Flexibility bounds admit no balanced allocation."""


@dataclass(frozen=True)
class ProducerParams:
    """Cost coefficients, flexibility bounds and preferences of a producer."""

    a: float                 # ¢/kWh², quadratic cost coefficient, > 0
    b: float                 # ¢/kWh, linear cost coefficient
    c: float = 0.0           # ¢, fixed cost
    e_min: float = 0.0       # kWh, minimum (must-run) energy
    e_max: float = 10.0      # kWh, capacity
    bus: int = 1
    reputation: float = 1.0
    alpha: float = 0.5       # weight on partner reputation
    beta: float = 0.5        # weight on partner proximity

    def __post_init__(self) -> None:
        if self.a <= 0:
            raise ValueError("quadratic cost coefficient must be positive")
        if self.b < 0 or self.c < 0:
            raise ValueError("cost coefficients must be non-negative")
        if not 0.0 <= self.e_min <= self.e_max:
            raise ValueError("need 0 <= e_min <= e_max")
        if not 0.0 <= self.reputation <= 1.0:
            raise ValueError("reputation must lie in [0, 1]")
        if not math.isclose(self.alpha + self.beta, 1.0, abs_tol=1e-9):
            raise ValueError("preference weights must sum to 1")


@dataclass(frozen=True)
class ConsumerParams:
    """Utility coefficients, flexibility bounds and preferences of a consumer."""

    a: float                 # ¢/kWh², utility curvature, > 0
    b: float                 # ¢/kWh, marginal utility at zero consumption, > 0
    e_min: float = 0.0       # kWh, minimum demand
    e_max: float = 10.0      # kWh, maximum demand
    bus: int = 1
    reputation: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self) -> None:
        if self.a <= 0 or self.b <= 0:
            raise ValueError("utility coefficients must be positive")
        if not 0.0 <= self.e_min <= self.e_max:
            raise ValueError("need 0 <= e_min <= e_max")
        if not 0.0 <= self.reputation <= 1.0:
            raise ValueError("reputation must lie in [0, 1]")
        if not math.isclose(self.alpha + self.beta, 1.0, abs_tol=1e-9):
            raise ValueError("preference weights must sum to 1")


@dataclass(frozen=True)
class GridTariff:
    """Grid prices bracketing every bilateral price: feed-in <= trade <= retail."""

    feed_in: float   # ¢/kWh paid for exports to the grid
    retail: float    # ¢/kWh charged for imports from the grid

    def __post_init__(self) -> None:
        if self.feed_in > self.retail:
            raise ValueError("feed-in tariff cannot exceed the retail price")


def producer_cost(params: ProducerParams, energy: float) -> float:
    """Generation cost a*e^2 + b*e + c in cents."""
    if energy < 0:
        raise NegativeEnergy(energy)
    return params.a * energy * energy + params.b * energy + params.c


def consumer_utility(params: ConsumerParams, energy: float) -> float:
    """Consumption value -a*e^2 + b*e in cents, saturating at b^2/4a."""
    if energy < 0:
        raise NegativeEnergy(energy)
    peak = params.b / (2.0 * params.a)
    if energy >= peak:
        return params.b * params.b / (4.0 * params.a)
    return -params.a * energy * energy + params.b * energy


def marginal_utility(params: ConsumerParams, energy: float) -> float:
    return max(0.0, params.b - 2.0 * params.a * energy)


def marginal_cost(params: ProducerParams, energy: float) -> float:
    return 2.0 * params.a * energy + params.b


@dataclass(frozen=True)
class Trade:
    """One cleared bilateral transaction."""

    producer: str
    consumer: str
    energy: float    # kWh
    price: float     # ¢/kWh
    charge: float    # ¢/kWh grid service charge for this pair


@dataclass
class Settlement:
    """Outcome of one market interval: cleared trades plus grid residuals."""

    trades: list[Trade]
    grid_export: dict[str, float]    # producer id -> kWh sold to the grid
    grid_import: dict[str, float]    # consumer id -> kWh bought from the grid
    iterations: int = 0
    converged: bool = True
    pair_updates: int = 0            # active pairs summed over all iterations
    messages: int = 0                # price + quantity messages exchanged
    round_iterations: list[int] = field(default_factory=list)
    round_pair_counts: list[int] = field(default_factory=list)

    @property
    def n_trades(self) -> int:
        return len(self.trades)


def producer_welfare(
    params: ProducerParams,
    trades: list[Trade],
    tariff: GridTariff,
    grid_energy: float = 0.0,
) -> float:
    """Producer welfare: grid revenue + net trade revenue - generation cost."""
    sold = sum(t.energy for t in trades)
    revenue = sum(t.energy * (t.price - t.charge) for t in trades)
    total = sold + grid_energy
    return tariff.feed_in * grid_energy + revenue - producer_cost(params, total)


def consumer_welfare(
    params: ConsumerParams,
    trades: list[Trade],
    tariff: GridTariff,
    grid_energy: float = 0.0,
) -> float:
    """Consumer welfare: consumption utility - grid cost - trade payments."""
    bought = sum(t.energy for t in trades)
    payments = sum(t.energy * (t.price + t.charge) for t in trades)
    total = bought + grid_energy
    return consumer_utility(params, total) - tariff.retail * grid_energy - payments


def settlement_welfare(
    producers: dict[str, ProducerParams],
    consumers: dict[str, ConsumerParams],
    settlement: Settlement,
    tariff: GridTariff,
) -> dict[str, float]:
    """Per-agent welfare of a settlement, including residual grid trades."""
    welfare: dict[str, float] = {}
    for pid, params in producers.items():
        mine = [t for t in settlement.trades if t.producer == pid]
        welfare[pid] = producer_welfare(
            params, mine, tariff, settlement.grid_export.get(pid, 0.0)
        )
    for cid, params in consumers.items():
        mine = [t for t in settlement.trades if t.consumer == cid]
        welfare[cid] = consumer_welfare(
            params, mine, tariff, settlement.grid_import.get(cid, 0.0)
        )
    return welfare


def social_welfare(
    producers: dict[str, ProducerParams],
    consumers: dict[str, ConsumerParams],
    settlement: Settlement,
    tariff: GridTariff,
) -> float:
    """Total welfare across all agents (bilateral prices cancel in the sum)."""
    return sum(settlement_welfare(producers, consumers, settlement, tariff).values())


# ---------------------------------------------------------------------------
# Partner prioritization
# ---------------------------------------------------------------------------


def priority_index(
    alpha: float,
    beta: float,
    partner_reputation: float,
    distance_km: float,
    max_distance_km: float,
) -> float:
    """Blend of partner reputation and proximity, in [0, 1].

    ``max_distance_km`` is the distance to the agent's farthest candidate,
    so the proximity term is 1 for a co-located partner and 0 for the
    farthest one.  When every candidate is co-located the proximity term is
    defined as 1.
    """
    if not math.isclose(alpha + beta, 1.0, abs_tol=1e-9):
        raise ValueError("weights must sum to 1")
    if not 0.0 <= partner_reputation <= 1.0:
        raise ValueError("reputation must lie in [0, 1]")
    if distance_km < 0 or max_distance_km < 0:
        raise ValueError("distances must be non-negative")
    if max_distance_km == 0.0:
        proximity = 1.0
    else:
        if distance_km > max_distance_km + 1e-9:
            raise ValueError("distance exceeds the normalizer")
        proximity = 1.0 - distance_km / max_distance_km
    return alpha * partner_reputation + beta * proximity


@dataclass(frozen=True)
class PriorityPartition:
    """Candidate partners split into priority groups (index 0 = highest)."""

    indices: dict[str, float]
    groups: tuple[tuple[str, ...], ...]
    normalizer_km: float = 0.0

    def group_of(self, partner: str) -> int:
        """1-based group number of a partner."""
        for n, members in enumerate(self.groups, start=1):
            if partner in members:
                return n
        raise UnknownPartner(partner)


def partition_partners(
    indices: dict[str, float],
    group_count: int,
    normalizer_km: float = 0.0,
) -> PriorityPartition:
    """Assign each partner to the group covering its priority index.

    Group n spans [(N-n)/N, (N-n+1)/N]; a value landing exactly on a group
    boundary joins the higher-priority group.
    """
    if not indices:
        raise EmptyCandidateSet("no candidate partners")
    if group_count < 1:
        raise ValueError("need at least one group")
    n_groups = int(group_count)
    members: list[list[str]] = [[] for _ in range(n_groups)]
    for partner in sorted(indices, key=lambda p: (-indices[p], p)):
        value = indices[partner]
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"priority index of {partner} outside [0, 1]")
        group = max(1, n_groups - math.floor(value * n_groups))
        group = min(group, n_groups)
        members[group - 1].append(partner)
    return PriorityPartition(
        indices=dict(indices),
        groups=tuple(tuple(g) for g in members),
        normalizer_km=normalizer_km,
    )


# ---------------------------------------------------------------------------
# Per-agent negotiation steps (reference semantics)
# ---------------------------------------------------------------------------


@dataclass
class NegotiationState:
    """Pairwise iterate of the settlement scheme.

    Keys of the pair maps are ``(producer_id, consumer_id)``.  Energies and
    duals are kept non-negative by projection; prices are clamped to the
    grid tariff band after every update.
    """

    price: dict[tuple[str, str], float]
    energy_offered: dict[tuple[str, str], float] = field(default_factory=dict)
    energy_requested: dict[tuple[str, str], float] = field(default_factory=dict)
    setpoint_offered: dict[tuple[str, str], float] = field(default_factory=dict)
    setpoint_requested: dict[tuple[str, str], float] = field(default_factory=dict)
    dual_min: dict[str, float] = field(default_factory=dict)
    dual_max: dict[str, float] = field(default_factory=dict)
    iteration: int = 0
    rho_price: float = 0.01
    rho_dual: float = 0.001
    zeta_decay: float = 200.0
    price_floor: float = 0.0
    price_cap: float = math.inf

    def __post_init__(self) -> None:
        for pair in self.price:
            self.energy_offered.setdefault(pair, 0.0)
            self.energy_requested.setdefault(pair, 0.0)

    def current_zeta(self, partner_count: int = 1) -> float:
        """Diminishing step factor, scaled down by the number of active partners.

        Each partner's quantity update corrects against the agent's total,
        so the aggregate step must shrink with the partner count to stay
        contractive.
        """
        return 1.0 / (max(1, partner_count) * (1.0 + self.iteration / self.zeta_decay))

    def advance(self) -> None:
        self.iteration += 1


def producer_step(
    state: NegotiationState,
    producer: str,
    params: ProducerParams,
    received: dict[str, float],
    charges: dict[str, float],
) -> dict[str, float]:
    """One producer update: price vs mismatch, duals vs bounds, then energy.

    ``received`` maps each active consumer to its latest requested energy.
    Returns the prices to broadcast; the state is updated in place.
    """
    pairs = {}
    for consumer in received:
        pair = (producer, consumer)
        if pair not in state.price:
            raise UnknownPartner(consumer)
        pairs[consumer] = pair

    total = sum(state.energy_offered[p] for p in pairs.values())
    zeta = state.current_zeta(len(pairs))

    outgoing: dict[str, float] = {}
    new_prices = {}
    for consumer, pair in pairs.items():
        mismatch = state.energy_offered[pair] - received[consumer]
        raw = state.price[pair] - state.rho_price * mismatch
        new_prices[pair] = min(state.price_cap, max(state.price_floor, max(0.0, raw)))

    mu_lo = max(0.0, state.dual_min.get(producer, 0.0) + state.rho_dual * (params.e_min - total))
    mu_hi = max(0.0, state.dual_max.get(producer, 0.0) + state.rho_dual * (total - params.e_max))
    state.dual_min[producer] = mu_lo
    state.dual_max[producer] = mu_hi

    for consumer, pair in pairs.items():
        price = new_prices[pair]
        setpoint = (price - charges[consumer] - mu_hi + mu_lo - params.b) / (2.0 * params.a)
        energy = max(0.0, state.energy_offered[pair] + zeta * (setpoint - total))
        state.price[pair] = price
        state.setpoint_offered[pair] = setpoint
        state.energy_offered[pair] = energy
        state.energy_requested[pair] = received[consumer]
        outgoing[consumer] = price
    return outgoing


def consumer_step(
    state: NegotiationState,
    consumer: str,
    params: ConsumerParams,
    received: dict[str, float],
    charges: dict[str, float],
) -> dict[str, float]:
    """One consumer update mirroring :func:`producer_step`.

    ``received`` maps each active producer to its latest broadcast price.
    Returns the energies to broadcast; the state is updated in place.
    """
    pairs = {}
    for producer in received:
        pair = (producer, consumer)
        if pair not in state.price:
            raise UnknownPartner(producer)
        pairs[producer] = pair

    total = sum(state.energy_requested[p] for p in pairs.values())
    zeta = state.current_zeta(len(pairs))

    mu_lo = max(0.0, state.dual_min.get(consumer, 0.0) + state.rho_dual * (params.e_min - total))
    mu_hi = max(0.0, state.dual_max.get(consumer, 0.0) + state.rho_dual * (total - params.e_max))
    state.dual_min[consumer] = mu_lo
    state.dual_max[consumer] = mu_hi

    outgoing: dict[str, float] = {}
    for producer, pair in pairs.items():
        price = received[producer]
        setpoint = (params.b - price - charges[producer] - mu_hi + mu_lo) / (2.0 * params.a)
        energy = max(0.0, state.energy_requested[pair] + zeta * (setpoint - total))
        state.setpoint_requested[pair] = setpoint
        state.energy_requested[pair] = energy
        outgoing[producer] = energy
    return outgoing


# ---------------------------------------------------------------------------
# Market settlement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float = 1e-3          # convergence threshold on price and energy deltas
    rho_price: float = 0.01        # price step size
    rho_dual: float = 0.001        # dual step size
    zeta_decay: float = 5000.0     # zeta_k = 1 / (partners * (1 + k / zeta_decay))
    max_iterations: int = 500000   # per priority-group round
    min_trade: float = 0.01        # kWh floor below which a trade is dropped

    def __post_init__(self) -> None:
        if min(self.epsilon, self.rho_price, self.rho_dual, self.zeta_decay) <= 0:
            raise ValueError("solver parameters must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")


def optimal_grid_export(params: ProducerParams, already_sold: float, feed_in: float) -> float:
    """Residual energy a producer sends to the grid after its bilateral sales.

    Covers any unmet must-run minimum, plus voluntary export while the
    feed-in price still beats marginal cost.
    """
    headroom = params.e_max - already_sold
    if headroom <= 0:
        return 0.0
    desired = (feed_in - params.b) / (2.0 * params.a) - already_sold
    return min(headroom, max(0.0, params.e_min - already_sold, desired))


def optimal_grid_import(params: ConsumerParams, already_bought: float, retail: float) -> float:
    """Residual energy a consumer buys from the grid after its bilateral buys."""
    headroom = params.e_max - already_bought
    if headroom <= 0:
        return 0.0
    desired = (params.b - retail) / (2.0 * params.a) - already_bought
    return min(headroom, max(0.0, params.e_min - already_bought, desired))


def grid_only_settlement(
    producers: dict[str, ProducerParams],
    consumers: dict[str, ConsumerParams],
    tariff: GridTariff,
) -> Settlement:
    """Settlement with the bilateral market switched off: tariff trades only."""
    return Settlement(
        trades=[],
        grid_export={
            pid: optimal_grid_export(p, 0.0, tariff.feed_in) for pid, p in producers.items()
        },
        grid_import={
            cid: optimal_grid_import(c, 0.0, tariff.retail) for cid, c in consumers.items()
        },
    )


def negotiate(
    producers: dict[str, ProducerParams],
    consumers: dict[str, ConsumerParams],
    partitions: dict[str, PriorityPartition],
    topology=None,
    tariff: GridTariff = GridTariff(5.0, 25.0),
    config: SolverConfig | None = None,
    omega: float = 0.0,
    charges: dict[tuple[str, str], float] | None = None,
) -> Settlement:
    """Run the group-wise iterative settlement and return cleared trades.

    ``partitions`` gives each agent's priority groups over its candidate
    partners.  A pair starts negotiating in the first round both sides have
    reached each other's group, provided both still have residual capacity
    or demand.  After the last round, residuals are exchanged with the grid
    at the tariff.

    Service charges come from ``charges`` keyed by (producer, consumer), or
    are computed as ``omega`` times the electrical distance on ``topology``.
    If the iteration budget runs out the partial settlement is returned
    with ``converged=False``.
    """
    from . import grid as grid_model

    cfg = config or SolverConfig()
    pids = list(producers)
    cids = list(consumers)
    p_index = {pid: k for k, pid in enumerate(pids)}
    c_index = {cid: k for k, cid in enumerate(cids)}
    n_p, n_c = len(pids), len(cids)

    gamma = np.zeros((n_p, n_c))
    for pid in pids:
        for cid in cids:
            if charges is not None:
                value = charges.get((pid, cid), 0.0)
            elif topology is not None and omega > 0.0:
                d = grid_model.electrical_distance(
                    topology, producers[pid].bus, consumers[cid].bus
                )
                value = grid_model.grid_service_charge(omega, d).charge
            else:
                value = 0.0
            gamma[p_index[pid], c_index[cid]] = value

    # First round in which a pair may negotiate: both sides must have
    # reached each other's priority group.
    first_round = np.zeros((n_p, n_c), dtype=int)  # 0 = never
    n_rounds = 1
    for pid in pids:
        part_p = partitions.get(pid)
        if part_p is None:
            continue
        n_rounds = max(n_rounds, len(part_p.groups))
        for cid in cids:
            part_c = partitions.get(cid)
            if part_c is None:
                continue
            n_rounds = max(n_rounds, len(part_c.groups))
            try:
                gp = part_p.group_of(cid)
                gc = part_c.group_of(pid)
            except UnknownPartner:
                continue
            first_round[p_index[pid], c_index[cid]] = max(gp, gc)

    a_p = np.array([producers[p].a for p in pids])
    b_p = np.array([producers[p].b for p in pids])
    emin_p = np.array([producers[p].e_min for p in pids])
    emax_p = np.array([producers[p].e_max for p in pids])
    a_c = np.array([consumers[c].a for c in cids])
    b_c = np.array([consumers[c].b for c in cids])
    emin_c = np.array([consumers[c].e_min for c in cids])
    emax_c = np.array([consumers[c].e_max for c in cids])

    committed_p = np.zeros(n_p)
    committed_c = np.zeros(n_c)
    trades: list[Trade] = []
    converged = True
    total_iters = 0
    pair_updates = 0
    round_iters: list[int] = []
    round_pairs: list[int] = []

    for round_no in range(1, n_rounds + 1):
        residual_p = (emax_p - committed_p) > cfg.epsilon
        residual_c = (emax_c - committed_c) > cfg.epsilon
        mask = (
            (first_round == round_no)
            & residual_p[:, None]
            & residual_c[None, :]
        )
        if not mask.any():
            continue

        lam, e_p, e_c, iters, ok = _solve_round(
            mask,
            gamma,
            tariff,
            cfg,
            a_p,
            b_p,
            np.where(mask.any(axis=1), np.maximum(0.0, emin_p - committed_p), 0.0),
            np.where(mask.any(axis=1), emax_p - committed_p, 0.0),
            a_c,
            b_c,
            np.where(mask.any(axis=0), np.maximum(0.0, emin_c - committed_c), 0.0),
            np.where(mask.any(axis=0), emax_c - committed_c, 0.0),
        )
        converged = converged and ok
        total_iters += iters
        pair_updates += iters * int(mask.sum())
        round_iters.append(iters)
        round_pairs.append(int(mask.sum()))

        for i, j in np.argwhere(mask):
            energy = min(e_p[i, j], e_c[i, j])
            price = lam[i, j]
            charge = gamma[i, j]
            if energy < cfg.min_trade:
                continue
            # A trade must beat the grid backstop for both sides; the tariff
            # band guarantees that whenever the net prices stay inside it.
            if price - charge < tariff.feed_in - 1e-9:
                continue
            if price + charge > tariff.retail + 1e-9:
                continue
            trades.append(
                Trade(
                    producer=pids[i],
                    consumer=cids[j],
                    energy=float(energy),
                    price=float(price),
                    charge=float(charge),
                )
            )
            committed_p[i] += energy
            committed_c[j] += energy

    settlement = Settlement(
        trades=trades,
        grid_export={
            pid: float(
                optimal_grid_export(producers[pid], committed_p[p_index[pid]], tariff.feed_in)
            )
            for pid in pids
        },
        grid_import={
            cid: float(
                optimal_grid_import(consumers[cid], committed_c[c_index[cid]], tariff.retail)
            )
            for cid in cids
        },
        iterations=total_iters,
        converged=converged,
        pair_updates=pair_updates,
        messages=2 * pair_updates,
        round_iterations=round_iters,
        round_pair_counts=round_pairs,
    )
    return settlement


def _round_kernel(
    mask, gamma, lo, hi, eps, rho_price, rho_dual, zeta_decay, max_iter,
    a_p, b_p, emin_p, emax_p, a_c, b_c, emin_c, emax_c,
):
    """One priority-group round of producer/consumer sweeps.

    Plain scalar loops so the whole round can be JIT-compiled; the update
    order matches :func:`producer_step` / :func:`consumer_step` exactly.
    Converged means: price and quantity deltas below ``eps``, every pair
    balanced within ``eps`` unless its price is pinned at a tariff bound,
    and no agent past its capacity.
    """
    n_p, n_c = mask.shape
    lam = np.full((n_p, n_c), 0.5 * (lo + hi))
    e_p = np.zeros((n_p, n_c))
    e_c = np.zeros((n_p, n_c))
    mu_lo_p = np.zeros(n_p)
    mu_hi_p = np.zeros(n_p)
    mu_lo_c = np.zeros(n_c)
    mu_hi_c = np.zeros(n_c)
    pinned = np.zeros((n_p, n_c), np.uint8)

    partners_p = np.zeros(n_p)
    partners_c = np.zeros(n_c)
    for i in range(n_p):
        for j in range(n_c):
            if mask[i, j]:
                partners_p[i] += 1.0
                partners_c[j] += 1.0
    for i in range(n_p):
        if partners_p[i] == 0.0:
            partners_p[i] = 1.0
    for j in range(n_c):
        if partners_c[j] == 0.0:
            partners_c[j] = 1.0

    for k in range(max_iter):
        decay = 1.0 + k / zeta_decay
        d_price = 0.0
        d_energy = 0.0

        tot_p = np.zeros(n_p)
        tot_c = np.zeros(n_c)
        for i in range(n_p):
            for j in range(n_c):
                if mask[i, j]:
                    tot_p[i] += e_p[i, j]
                    tot_c[j] += e_c[i, j]
        for i in range(n_p):
            mu_lo_p[i] = max(0.0, mu_lo_p[i] + rho_dual * (emin_p[i] - tot_p[i]))
            mu_hi_p[i] = max(0.0, mu_hi_p[i] + rho_dual * (tot_p[i] - emax_p[i]))
        for j in range(n_c):
            mu_lo_c[j] = max(0.0, mu_lo_c[j] + rho_dual * (emin_c[j] - tot_c[j]))
            mu_hi_c[j] = max(0.0, mu_hi_c[j] + rho_dual * (tot_c[j] - emax_c[j]))

        # Producer sweep: price against mismatch, then quantity toward the
        # per-price optimum of the agent's total.
        for i in range(n_p):
            zeta = 1.0 / (partners_p[i] * decay)
            for j in range(n_c):
                if not mask[i, j]:
                    continue
                raw = lam[i, j] - rho_price * (e_p[i, j] - e_c[i, j])
                clamped = min(hi, max(lo, raw))
                pinned[i, j] = 1 if clamped != raw else 0
                delta = abs(clamped - lam[i, j])
                if delta > d_price:
                    d_price = delta
                lam[i, j] = clamped
                setpoint = (
                    clamped - gamma[i, j] - mu_hi_p[i] + mu_lo_p[i] - b_p[i]
                ) / (2.0 * a_p[i])
                e_p[i, j] = max(0.0, e_p[i, j] + zeta * (setpoint - tot_p[i]))

        # Consumer sweep against the freshly broadcast prices.
        for j in range(n_c):
            zeta = 1.0 / (partners_c[j] * decay)
            for i in range(n_p):
                if not mask[i, j]:
                    continue
                setpoint = (
                    b_c[j] - lam[i, j] - gamma[i, j] - mu_hi_c[j] + mu_lo_c[j]
                ) / (2.0 * a_c[j])
                updated = max(0.0, e_c[i, j] + zeta * (setpoint - tot_c[j]))
                delta = abs(updated - e_c[i, j])
                if delta > d_energy:
                    d_energy = delta
                e_c[i, j] = updated

        if d_price < eps and d_energy < eps:
            ok = True
            for i in range(n_p):
                total = 0.0
                for j in range(n_c):
                    if mask[i, j]:
                        total += e_p[i, j]
                        if not pinned[i, j] and abs(e_p[i, j] - e_c[i, j]) >= eps:
                            ok = False
                if total > emax_p[i] + eps:
                    ok = False
            for j in range(n_c):
                total = 0.0
                for i in range(n_p):
                    if mask[i, j]:
                        total += e_c[i, j]
                if total > emax_c[j] + eps:
                    ok = False
            if ok:
                return lam, e_p, e_c, k + 1, True

    return lam, e_p, e_c, max_iter, False


if njit is not None:
    _round_kernel = njit(cache=True)(_round_kernel)


def _solve_round(mask, gamma, tariff, cfg, a_p, b_p, emin_p, emax_p, a_c, b_c, emin_c, emax_c):
    return _round_kernel(
        np.ascontiguousarray(mask),
        np.ascontiguousarray(gamma),
        float(tariff.feed_in),
        float(tariff.retail),
        cfg.epsilon,
        cfg.rho_price,
        cfg.rho_dual,
        cfg.zeta_decay,
        cfg.max_iterations,
        np.ascontiguousarray(a_p),
        np.ascontiguousarray(b_p),
        np.ascontiguousarray(emin_p),
        np.ascontiguousarray(emax_p),
        np.ascontiguousarray(a_c),
        np.ascontiguousarray(b_c),
        np.ascontiguousarray(emin_c),
        np.ascontiguousarray(emax_c),
    )


# ---------------------------------------------------------------------------
# Centralized reference solver
# ---------------------------------------------------------------------------


def centralized_oracle(
    producers: dict[str, ProducerParams],
    consumers: dict[str, ConsumerParams],
    charges: dict[tuple[str, str], float] | None = None,
    tariff: GridTariff = GridTariff(5.0, 25.0),
) -> Settlement:
    """Social-welfare-maximizing balanced allocation (no grid exchange).

    Solves the concave program over the trade matrix directly with a
    constrained quadratic solver; used as the reference the decentralized
    negotiation is checked against.
    """
    pids = list(producers)
    cids = list(consumers)
    n_p, n_c = len(pids), len(cids)
    gamma = np.zeros((n_p, n_c))
    if charges:
        for (pid, cid), value in charges.items():
            gamma[pids.index(pid), cids.index(cid)] = value

    sum_min_p = sum(p.e_min for p in producers.values())
    sum_min_c = sum(c.e_min for c in consumers.values())
    if sum_min_p > sum(c.e_max for c in consumers.values()) + 1e-12:
        raise Infeasible("producer minimums exceed total consumer capacity")
    if sum_min_c > sum(p.e_max for p in producers.values()) + 1e-12:
        raise Infeasible("consumer minimums exceed total producer capacity")

    a_p = np.array([producers[p].a for p in pids])
    b_p = np.array([producers[p].b for p in pids])
    c_p = np.array([producers[p].c for p in pids])
    a_c = np.array([consumers[c].a for c in cids])
    b_c = np.array([consumers[c].b for c in cids])

    def unpack(x):
        return x.reshape(n_p, n_c)

    def objective(x):
        e = unpack(x)
        ei = e.sum(axis=1)
        ej = e.sum(axis=0)
        peak = b_c / (2.0 * a_c)
        clipped = np.minimum(ej, peak)
        utility = (-a_c * clipped * clipped + b_c * clipped).sum()
        cost = (a_p * ei * ei + b_p * ei + c_p).sum()
        return -(utility - cost - 2.0 * (gamma * e).sum())

    def gradient(x):
        e = unpack(x)
        ei = e.sum(axis=1)
        ej = e.sum(axis=0)
        du = np.maximum(0.0, b_c - 2.0 * a_c * ej)
        dc = 2.0 * a_p * ei + b_p
        g = -(du[None, :] - dc[:, None] - 2.0 * gamma)
        return g.ravel()

    constraints = []
    for i, pid in enumerate(pids):
        row = np.zeros(n_p * n_c)
        row[i * n_c : (i + 1) * n_c] = 1.0
        constraints.append(
            optimize.LinearConstraint(row, producers[pid].e_min, producers[pid].e_max)
        )
    for j, cid in enumerate(cids):
        col = np.zeros(n_p * n_c)
        col[j::n_c] = 1.0
        constraints.append(
            optimize.LinearConstraint(col, consumers[cid].e_min, consumers[cid].e_max)
        )
    upper = np.minimum.outer(
        np.array([producers[p].e_max for p in pids]),
        np.array([consumers[c].e_max for c in cids]),
    ).ravel()
    bounds = optimize.Bounds(np.zeros(n_p * n_c), upper)

    x0 = np.zeros(n_p * n_c)
    result = optimize.minimize(
        objective,
        x0,
        jac=gradient,
        bounds=bounds,
        constraints=constraints,
        method="SLSQP",
        options={"maxiter": 500, "ftol": 1e-12},
    )
    if not result.success and sum_min_p == 0 and sum_min_c == 0:
        raise RuntimeError(f"reference solver failed: {result.message}")

    allocation = unpack(result.x)
    ei = allocation.sum(axis=1)
    ej = allocation.sum(axis=0)
    trades = []
    for i in range(n_p):
        for j in range(n_c):
            energy = float(allocation[i, j])
            if energy < 1e-6:
                continue
            mc = 2.0 * a_p[i] * ei[i] + b_p[i]
            mu = max(0.0, b_c[j] - 2.0 * a_c[j] * ej[j])
            price = float(np.clip(0.5 * (mc + mu), tariff.feed_in, tariff.retail))
            trades.append(
                Trade(
                    producer=pids[i],
                    consumer=cids[j],
                    energy=energy,
                    price=price,
                    charge=float(gamma[i, j]),
                )
            )
    return Settlement(
        trades=trades,
        grid_export={pid: 0.0 for pid in pids},
        grid_import={cid: 0.0 for cid in cids},
        iterations=int(result.nit),
        converged=bool(result.success),
    )
