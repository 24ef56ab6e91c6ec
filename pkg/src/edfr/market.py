"""Linearly parameterized supply-function bids, profits and competitive-equilibrium checks.

A generator with true quadratic cost ``c`` bids a scale ``alpha`` on the base
function ``s(pi) = c'^{-1}(pi) / gamma`` and offers ``[alpha s(pi)]`` at price
``pi``. The operator reads the bid as the cost curve whose marginal is
``c'((gamma / alpha) q)``, normalized to zero at the lower capacity bound.
Bidding ``alpha = gamma`` reveals the true marginal cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .decomposition import (
    SystemSolution,
    optimal_delta,
    solve_ed,
    solve_fr,
)
from .errors import InvalidParameters, MissingDuals, OutOfBounds
from .grid import GeneratorFleet, GeneratorSet, Network, QuadraticCost
from .scenario import ScenarioTree

log = logging.getLogger(__name__)

BAND_TOL = 1e-7


@dataclass(frozen=True)
class SupplyBid:
    """One generator's bid: scale ``alpha`` on the base function of its true cost."""

    alpha: float
    gamma: float
    a: float
    b: float
    c: float
    lower: float
    upper: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.gamma > 0):
            raise InvalidParameters("alpha and gamma must be positive")
        if self.c <= 0:
            raise InvalidParameters("true cost must be strictly convex")

    def base(self, price):
        """``s(pi) = c'^{-1}(pi) / gamma``."""
        return (np.asarray(price, dtype=float) - self.b) / (self.c * self.gamma)

    def supply(self, price):
        return np.clip(self.alpha * self.base(price), self.lower, self.upper)

    def true_cost(self, q):
        q = np.asarray(q, dtype=float)
        return self.a + self.b * q + 0.5 * self.c * q * q

    def bid_marginal(self, q):
        return self.b + self.c * (self.gamma / self.alpha) * np.asarray(q, dtype=float)


def bid_cost(bid: SupplyBid, q, tol: float = 1e-9):
    """``integral from q_lo to q of s^{-1}(w / alpha) dw``, in closed form for quadratic truth."""
    q = np.asarray(q, dtype=float)
    span = max(1.0, abs(bid.upper - bid.lower))
    if np.any(q < bid.lower - tol * span) or np.any(q > bid.upper + tol * span):
        raise OutOfBounds(f"quantity outside [{bid.lower}, {bid.upper}]")
    k = bid.gamma / bid.alpha
    return (bid.true_cost(k * q) - bid.true_cost(k * bid.lower)) / k


@dataclass(frozen=True)
class Bids:
    """Bid scales and truth-scale constants per node for both generator kinds."""

    alpha_b: np.ndarray
    alpha_p: np.ndarray
    gamma_b: np.ndarray
    gamma_p: np.ndarray

    @classmethod
    def truthful(cls, n: int, gamma_b=1.0, gamma_p=1.0) -> "Bids":
        gb = np.broadcast_to(np.asarray(gamma_b, dtype=float), (n,)).copy()
        gp = np.broadcast_to(np.asarray(gamma_p, dtype=float), (n,)).copy()
        return cls(gb.copy(), gp.copy(), gb, gp)

    def with_alpha(self, kind: str, node: int, value: float) -> "Bids":
        ab, ap = self.alpha_b.copy(), self.alpha_p.copy()
        (ab if kind == "dispatch" else ap)[node] = value
        return Bids(ab, ap, self.gamma_b, self.gamma_p)

    def bid(self, fleet: GeneratorFleet, kind: str, n: int) -> SupplyBid:
        gens = fleet.dispatch if kind == "dispatch" else fleet.regulation
        alpha = self.alpha_b if kind == "dispatch" else self.alpha_p
        gamma = self.gamma_b if kind == "dispatch" else self.gamma_p
        return SupplyBid(float(alpha[n]), float(gamma[n]), float(gens.cost.a[n]), float(gens.cost.b[n]),
                         float(gens.cost.c[n]), float(gens.lower[n]), float(gens.upper[n]))


def _bid_set(gens: GeneratorSet, alpha, gamma) -> GeneratorSet:
    k = np.asarray(gamma, dtype=float) / np.asarray(alpha, dtype=float)
    k = np.where(gens.present, k, 1.0)
    c_hat = gens.cost.c * k
    b_hat = gens.cost.b
    lo = gens.lower
    a_hat = -(b_hat * lo + 0.5 * c_hat * lo * lo)
    return gens.with_cost(QuadraticCost(np.where(gens.present, a_hat, 0.0), b_hat, c_hat))


def bid_fleet(fleet: GeneratorFleet, bids: Bids) -> GeneratorFleet:
    """The fleet as the operator sees it: true costs replaced by bid costs."""
    return GeneratorFleet(_bid_set(fleet.dispatch, bids.alpha_b, bids.gamma_b),
                          _bid_set(fleet.regulation, bids.alpha_p, bids.gamma_p))


# -- profits ------------------------------------------------------------------

def profit_dispatch(q_b, price, cost_fn, K: float):
    """``K (pi q - c(q))``."""
    return K * (np.asarray(price) * np.asarray(q_b) - cost_fn(q_b))


def profit_regulation(outputs, prices, cost_fn, p) -> float:
    """``sum_s p_s (pi_s x_s - c(x_s))`` for total outputs ``x_s``."""
    x = np.asarray(outputs, dtype=float)
    return float(np.sum(np.asarray(p) * (np.asarray(prices) * x - cost_fn(x))))


def profit(bid_schedule, prices, truth_cost, p_s=None, K: float | None = None) -> float:
    """Expected profit of one generator.

    With ``K`` given the schedule is a dispatch output paid ``prices`` in each
    of ``K`` periods; otherwise it is a vector of regulation outputs with
    outcome weights ``p_s``.
    """
    if K is not None:
        return float(profit_dispatch(bid_schedule, prices, truth_cost, K))
    return profit_regulation(bid_schedule, prices, truth_cost, p_s)


# -- best responses -------------------------------------------------------------

@dataclass(frozen=True)
class BestResponse:
    verdict: bool
    witness: tuple | None = None  # (band, outcome index, offered, required)


def best_response_check(bid: SupplyBid, prices, tol: float = BAND_TOL) -> BestResponse:
    """Whether ``bid.alpha`` maximizes expected profit at the given prices.

    Each outcome's profit peaks at ``[c'^{-1}(pi_s)]``; the bid is optimal iff
    its offer reaches that peak in every outcome: at or below the lower bound
    where the peak is clamped low, exactly on it where interior, and at or
    above the upper bound where clamped high. Ties at the bounds count as clamped.
    """
    prices = np.atleast_1d(np.asarray(prices, dtype=float))
    ideal = (prices - bid.b) / bid.c
    offer = bid.alpha * bid.base(prices)
    scale = max(1.0, abs(bid.lower), abs(bid.upper))
    for s, (x, o) in enumerate(zip(ideal, offer)):
        if x <= bid.lower + tol * scale:
            if o > bid.lower + tol * scale:
                return BestResponse(False, ("clamp-low", s, float(o), bid.lower))
        elif x >= bid.upper - tol * scale:
            if o < bid.upper - tol * scale:
                return BestResponse(False, ("clamp-high", s, float(o), bid.upper))
        elif abs(o - x) > tol * scale:
            return BestResponse(False, ("interior", s, float(o), float(x)))
    return BestResponse(True)


# -- equilibrium ---------------------------------------------------------------

@dataclass(frozen=True)
class MarketPrices:
    pi_b: np.ndarray
    pi_p: np.ndarray  # one row per outcome, root first


@dataclass(frozen=True)
class EquilibriumCertificate:
    verdicts: dict
    witnesses: dict
    mapping_residual: float
    prices: MarketPrices
    q_b: np.ndarray
    q_p: np.ndarray
    r: np.ndarray
    tol: float
    supplied_price_gap: float | None = None
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values()) and self.mapping_residual <= self.tol


def verify_equilibrium(bids: Bids, network: Network, fleet: GeneratorFleet, tree: ScenarioTree, delta,
                       tol: float = 1e-6, prices: MarketPrices | None = None) -> EquilibriumCertificate:
    """Clear the market on the bids and check every generator's bid is a best response.

    The operator solves ED and per-outcome FR on bid costs; dispatch prices
    are ``(pi_ED + delta) / K``, period-1 regulation prices ``pi_ED / K`` and
    later regulation prices the FR nodal prices. The quantities each bid
    offers at those prices must reproduce the cleared schedule.
    """
    tree = tree.rooted()
    delta = np.asarray(getattr(delta, "values", delta), dtype=float)
    K = float(tree.probabilities.sum())
    hat = bid_fleet(fleet, bids)
    d1 = tree.root.demand
    ed = solve_ed(network, hat, d1, delta, K)
    pi_ed = ed.prices(network)
    pi_b = (pi_ed + delta) / K
    S, N = tree.n_outcomes, network.n_nodes
    pi_p = np.empty((S, N))
    pi_p[0] = pi_ed / K
    X = np.empty((S, N))
    X[0] = ed.q_p
    for s in range(1, S):
        fr = solve_fr(network, hat, ed.q_b, ed.q_p, tree.outcomes[s].demand)
        pi_p[s] = fr.prices(network)
        X[s] = ed.q_p + fr.r

    disp, reg = fleet.dispatch, fleet.regulation
    verdicts, witnesses = {}, {}
    mapping = 0.0
    for n in range(N):
        if disp.present[n]:
            bid = bids.bid(fleet, "dispatch", n)
            res = best_response_check(bid, pi_b[n])
            verdicts[("dispatch", n)] = res.verdict
            if res.witness:
                witnesses[("dispatch", n)] = res.witness
            mapping = max(mapping, float(abs(bid.supply(pi_b[n]) - ed.q_b[n])))
        if reg.present[n]:
            bid = bids.bid(fleet, "regulation", n)
            res = best_response_check(bid, pi_p[:, n])
            verdicts[("regulation", n)] = res.verdict
            if res.witness:
                witnesses[("regulation", n)] = res.witness
            mapping = max(mapping, float(np.max(np.abs(bid.supply(pi_p[:, n]) - X[:, n]))))
    gap = None
    if prices is not None:
        gap = float(max(np.max(np.abs(prices.pi_b - pi_b)), np.max(np.abs(prices.pi_p - pi_p))))
    cert = EquilibriumCertificate(verdicts, witnesses, mapping, MarketPrices(pi_b, pi_p),
                                  ed.q_b, ed.q_p, X - ed.q_p, tol, gap)
    log.info("equilibrium check: %s (mapping residual %.2e)", "pass" if cert.passed else "fail", mapping)
    return cert


def construct_equilibrium(system: SystemSolution, fleet: GeneratorFleet, network: Network,
                          gamma_b=1.0, gamma_p=1.0) -> tuple[Bids, MarketPrices, np.ndarray]:
    """Truthful bids with prices read off SYSTEM multipliers.

    Returns ``(bids, prices, delta)`` with ``pi_b = pi_1 + delta / K`` and
    ``pi_p[s] = pi_s`` where ``pi_s`` are SYSTEM nodal prices.
    """
    if system.lam is None or system.mu_lo is None:
        raise MissingDuals("SYSTEM solution carries no multipliers")
    pi = system.prices(network)
    delta = optimal_delta(system, network).values
    bids = Bids.truthful(network.n_nodes, gamma_b, gamma_p)
    return bids, MarketPrices(pi[0] + delta / system.K, pi.copy()), delta
