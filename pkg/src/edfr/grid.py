"""DC network operators, generator fleets and the per-outcome feasible set."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DisconnectedGraph,
    InvalidParameters,
    NonpositiveSusceptance,
    UnbalancedInjection,
)

EIG_RTOL = 1e-9
CONNECTIVITY_TOL = 1e-9
MIN_CURVATURE = 1e-6


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Network:
    """Connected transmission network under the DC power-flow model.

    ``incidence`` has +1 at the tail and -1 at the head of every line, so the
    flow on line ``l`` is ``B_l * (theta[tail] - theta[head])``.
    """

    node_ids: tuple
    tails: np.ndarray
    heads: np.ndarray
    susceptance: np.ndarray
    capacity: np.ndarray
    incidence: np.ndarray
    laplacian: np.ndarray
    laplacian_pinv: np.ndarray
    shift_factors: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_lines(self) -> int:
        return len(self.susceptance)

    def index(self, node_id) -> int:
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            # ids read from text files arrive as strings
            for i, nid in enumerate(self.node_ids):
                if str(nid) == str(node_id):
                    return i
            raise KeyError(node_id) from None

    def branch_matrix(self) -> np.ndarray:
        """``B C^T``: maps nodal phase angles to line flows."""
        return self.susceptance[:, None] * self.incidence.T

    def lines(self) -> list[tuple]:
        return [
            (self.node_ids[i], self.node_ids[j], float(b), float(f))
            for i, j, b, f in zip(self.tails, self.heads, self.susceptance, self.capacity)
        ]


def build_network(nodes: Sequence, lines: Iterable) -> Network:
    """Build the network operators C, L, L^+ and H from node ids and line records.

    Each line is ``(tail, head, susceptance, capacity_mw)`` or a mapping with
    those keys (``capacity_mw`` may also be spelled ``capacity``).
    """
    node_ids = tuple(nodes)
    if not node_ids:
        raise InvalidParameters("network needs at least one node")
    if len(set(node_ids)) != len(node_ids):
        raise InvalidParameters("duplicate node ids")
    pos = {nid: k for k, nid in enumerate(node_ids)}
    pos.update({str(nid): k for k, nid in enumerate(node_ids)})

    tails, heads, sus, cap = [], [], [], []
    for rec in lines:
        if isinstance(rec, Mapping):
            t, h = rec["tail"], rec["head"]
            b = rec["susceptance"]
            f = rec.get("capacity_mw", rec.get("capacity"))
        else:
            t, h, b, f = rec
        if t not in pos or h not in pos:
            raise InvalidParameters(f"line endpoint not in node set: {t!r}->{h!r}")
        if pos[t] == pos[h]:
            raise InvalidParameters(f"self loop at node {t!r}")
        b = float(b)
        f = float(np.inf if f is None else f)
        if not b > 0:
            raise NonpositiveSusceptance(f"line {t!r}->{h!r} has susceptance {b}")
        if f < 0:
            raise InvalidParameters(f"line {t!r}->{h!r} has negative capacity {f}")
        tails.append(pos[t])
        heads.append(pos[h])
        sus.append(b)
        cap.append(f)

    n, m = len(node_ids), len(sus)
    C = np.zeros((n, m))
    C[tails, np.arange(m)] = 1.0
    C[heads, np.arange(m)] = -1.0
    B = np.asarray(sus, dtype=float)
    L = (C * B) @ C.T

    w, V = np.linalg.eigh(L)
    if n > 1 and w[1] < CONNECTIVITY_TOL:
        raise DisconnectedGraph(f"second-smallest Laplacian eigenvalue {w[1]:.3e}")
    lam_max = w[-1] if n else 0.0
    keep = w > EIG_RTOL * lam_max if lam_max > 0 else np.zeros(n, dtype=bool)
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    L_pinv = (V * inv) @ V.T
    H = (B[:, None] * C.T) @ L_pinv

    return Network(
        node_ids=node_ids,
        tails=np.asarray(tails, dtype=int),
        heads=np.asarray(heads, dtype=int),
        susceptance=_frozen(B),
        capacity=_frozen(cap),
        incidence=_frozen(C),
        laplacian=_frozen(L),
        laplacian_pinv=_frozen(L_pinv),
        shift_factors=_frozen(H),
        eigenvalues=_frozen(np.where(keep, w, 0.0)),
    )


def line_flows(network: Network, injection) -> np.ndarray:
    """Line flows ``H p`` for a balanced injection vector ``p`` (MW)."""
    p = np.asarray(injection, dtype=float)
    if p.shape != (network.n_nodes,):
        raise DimensionMismatch(f"injection has shape {p.shape}, expected ({network.n_nodes},)")
    scale = np.max(np.abs(p)) if p.size else 0.0
    if abs(p.sum()) > 1e-6 * scale + 1e-9:
        raise UnbalancedInjection(f"injections sum to {p.sum():.6g}")
    return network.shift_factors @ p


@dataclass(frozen=True)
class QuadraticCost:
    """Separable costs ``a + b q + (c/2) q^2`` evaluated elementwise."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __call__(self, q):
        q = np.asarray(q, dtype=float)
        return self.a + self.b * q + 0.5 * self.c * q * q

    def marginal(self, q):
        return self.b + self.c * np.asarray(q, dtype=float)

    def inverse_marginal(self, price):
        return (np.asarray(price, dtype=float) - self.b) / self.c

    def scaled_curvature(self, factor) -> "QuadraticCost":
        return QuadraticCost(self.a, self.b, self.c * np.asarray(factor, dtype=float))


@dataclass(frozen=True)
class GeneratorSet:
    """One generator kind (dispatch or regulation) at every node.

    Nodes without a unit of this kind carry ``present = False`` and are pinned
    at zero output with a placeholder unit-curvature cost.
    """

    lower: np.ndarray
    upper: np.ndarray
    cost: QuadraticCost
    present: np.ndarray

    def __post_init__(self):
        n = len(self.lower)
        for name in ("upper", "present"):
            if len(getattr(self, name)) != n:
                raise DimensionMismatch(f"{name} has length {len(getattr(self, name))}, expected {n}")
        for name in ("a", "b", "c"):
            if len(getattr(self.cost, name)) != n:
                raise DimensionMismatch(f"cost.{name} has wrong length")
        if np.any(self.lower > self.upper):
            raise InvalidParameters("lower bound above upper bound")
        if np.any(self.cost.c[self.present] < MIN_CURVATURE):
            raise InvalidParameters(f"quadratic cost coefficient below {MIN_CURVATURE}")

    @classmethod
    def absent(cls, n: int) -> "GeneratorSet":
        z = np.zeros(n)
        return cls(z, z.copy(), QuadraticCost(z.copy(), z.copy(), np.ones(n)), np.zeros(n, dtype=bool))

    @property
    def fixed(self) -> np.ndarray:
        return self.lower == self.upper

    def with_cost(self, cost: QuadraticCost) -> "GeneratorSet":
        return GeneratorSet(self.lower, self.upper, cost, self.present)


@dataclass(frozen=True)
class GeneratorFleet:
    dispatch: GeneratorSet
    regulation: GeneratorSet

    def __post_init__(self):
        if len(self.dispatch.lower) != len(self.regulation.lower):
            raise DimensionMismatch("dispatch and regulation sets cover different node counts")

    @property
    def n_nodes(self) -> int:
        return len(self.dispatch.lower)

    def cost(self, q_b, q_p_total) -> float:
        """Per-period cost of dispatch output ``q_b`` and regulation output ``q_p_total``."""
        cb = np.where(self.dispatch.present, self.dispatch.cost(q_b), 0.0)
        cp = np.where(self.regulation.present, self.regulation.cost(q_p_total), 0.0)
        return float(cb.sum() + cp.sum())


def generator_set(n: int, units: Mapping[int, tuple]) -> GeneratorSet:
    """Build a GeneratorSet from ``{node_index: (lower, upper, a, b, c)}``."""
    lo, hi = np.zeros(n), np.zeros(n)
    a, b, c = np.zeros(n), np.zeros(n), np.ones(n)
    present = np.zeros(n, dtype=bool)
    for k, (l, u, ca, cb, cc) in units.items():
        lo[k], hi[k], a[k], b[k], c[k] = l, u, ca, cb, cc
        present[k] = True
    return GeneratorSet(lo, hi, QuadraticCost(a, b, c), present)


def merit_order_marginal(total, lower, upper, b, c) -> np.ndarray:
    """Aggregate marginal cost at total output ``total`` of units dispatched in merit order.

    Returns the smallest price at which the units' combined supply reaches
    each requested total.
    """
    lower, upper, b, c = (np.asarray(x, dtype=float) for x in (lower, upper, b, c))
    bps = np.unique(np.concatenate([b + c * lower, b + c * upper]))
    supply = np.clip((bps[:, None] - b) / c, lower, upper).sum(axis=1)
    total = np.atleast_1d(np.asarray(total, dtype=float))
    idx = np.searchsorted(supply, total, side="left")
    out = np.empty_like(total)
    for k, (t, i) in enumerate(zip(total, idx)):
        if i == 0:
            out[k] = bps[0]
        elif i >= len(bps):
            out[k] = bps[-1]
        else:
            s0, s1 = supply[i - 1], supply[i]
            out[k] = bps[i - 1] + (t - s0) / (s1 - s0) * (bps[i] - bps[i - 1])
    return out


def aggregate_units(lower, upper, a, b, c, n_grid: int = 401) -> tuple[float, float, float, float, float]:
    """Collapse several units into one equivalent quadratic generator.

    Bounds are summed; the linear marginal curve is a least-squares fit to the
    merit-order aggregate marginal curve. Identical units aggregate exactly.
    """
    lower, upper, a, b, c = (np.atleast_1d(np.asarray(x, dtype=float)) for x in (lower, upper, a, b, c))
    lo, hi = float(lower.sum()), float(upper.sum())
    if len(lower) == 1:
        return lo, hi, float(a[0]), float(b[0]), max(float(c[0]), MIN_CURVATURE)
    if hi - lo <= 0:
        slope = MIN_CURVATURE
        icpt = float(merit_order_marginal(lo, lower, upper, b, c)[0]) - slope * lo
    else:
        q = np.linspace(lo, hi, n_grid)
        lam = merit_order_marginal(q, lower, upper, b, c)
        slope, icpt = np.polyfit(q, lam, 1)
        if slope < MIN_CURVATURE:
            slope = MIN_CURVATURE
            icpt = float(np.mean(lam - slope * q))
    # constant chosen so the aggregate matches the units' cost at minimum output
    cost_at_min = float(np.sum(a + b * lower + 0.5 * c * lower**2))
    const = cost_at_min - (icpt * lo + 0.5 * slope * lo**2)
    return lo, hi, const, float(icpt), float(slope)


@dataclass(frozen=True)
class Violation:
    kind: str  # dispatch-cap | regulation-cap | balance | line
    index: int
    magnitude: float


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    violations: tuple = field(default_factory=tuple)


def check_feasible(network: Network, fleet: GeneratorFleet, q_b, q_p, r_s, d_s, tol: float = 1e-6) -> FeasibilityReport:
    """Report every violated generation, balance and line constraint for one outcome."""
    n = network.n_nodes
    vecs = [np.asarray(v, dtype=float) for v in (q_b, q_p, r_s, d_s)]
    for v in vecs:
        if v.shape != (n,):
            raise DimensionMismatch(f"vector of shape {v.shape}, expected ({n},)")
    if fleet.n_nodes != n:
        raise DimensionMismatch("fleet and network sizes differ")
    q_b, q_p, r_s, d_s = vecs
    out: list[Violation] = []

    def caps(kind, gens: GeneratorSet, q):
        over = np.maximum(gens.lower - q, q - gens.upper)
        for k in np.flatnonzero(over > tol):
            out.append(Violation(kind, int(k), float(over[k])))

    caps("dispatch-cap", fleet.dispatch, q_b)
    caps("regulation-cap", fleet.regulation, q_p + r_s)
    inj = q_b + q_p + r_s - d_s
    imb = abs(float(inj.sum()))
    if imb > tol:
        out.append(Violation("balance", 0, imb))
    if network.n_lines:
        excess = np.abs(network.shift_factors @ inj) - network.capacity
        for k in np.flatnonzero(excess > tol):
            out.append(Violation("line", int(k), float(excess[k])))
    return FeasibilityReport(feasible=not out, violations=tuple(out))
