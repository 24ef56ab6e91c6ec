"""Joint dispatch/regulation problem, its ED and FR sub-problems and the price offset delta.

All three problems share one layout: the dispatch outputs ``q_b`` followed by
one block of total regulation outputs per demand outcome. SYSTEM has a block
per tree outcome, ED a single block for period-1 demand (plus zero-cost
recourse blocks in the robust variant), and FR a single block with ``q_b``
pinned. Balance and line rows of outcome ``s`` are scaled by the outcome's
weight so that their multipliers come out as unweighted per-outcome prices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import qp
from .errors import DimensionMismatch, Infeasible, MissingDuals
from .grid import GeneratorFleet, Network
from .scenario import ScenarioTree

log = logging.getLogger(__name__)

LAZY_ROW_THRESHOLD = 400
ROBUST_TOL = 1e-3


@dataclass(frozen=True)
class Instance:
    network: Network
    fleet: GeneratorFleet
    tree: ScenarioTree

    def __post_init__(self):
        if self.fleet.n_nodes != self.network.n_nodes or self.tree.n_nodes != self.network.n_nodes:
            raise DimensionMismatch("network, fleet and tree disagree on the number of nodes")


@dataclass(frozen=True)
class _Layout:
    n: int
    m: int
    finite_lines: np.ndarray

    def q_b(self, x):
        return x[: self.n]

    def blocks(self, x):
        return x[self.n:].reshape(self.m, self.n)


def _block_program(network: Network, fleet: GeneratorFleet, demands, w_b, w_p, row_w,
                   b_lo=None, b_hi=None, lin_b=None) -> tuple[qp.QuadProgram, _Layout]:
    """Assemble the shared program layout described in the module docstring."""
    N = network.n_nodes
    demands = np.atleast_2d(np.asarray(demands, dtype=float))
    m = demands.shape[0]
    w_p = np.asarray(w_p, dtype=float)
    row_w = np.asarray(row_w, dtype=float)
    disp, reg = fleet.dispatch, fleet.regulation
    b_lo = disp.lower if b_lo is None else np.asarray(b_lo, dtype=float)
    b_hi = disp.upper if b_hi is None else np.asarray(b_hi, dtype=float)
    lin_b = np.zeros(N) if lin_b is None else np.asarray(lin_b, dtype=float)

    h = np.concatenate([w_b * disp.cost.c] + [wp * reg.cost.c for wp in w_p])
    g = np.concatenate([w_b * disp.cost.b + lin_b] + [wp * reg.cost.b for wp in w_p])
    const = w_b * disp.cost.a[disp.present].sum() + w_p.sum() * reg.cost.a[reg.present].sum()
    lo = np.concatenate([b_lo] + [reg.lower] * m)
    hi = np.concatenate([b_hi] + [reg.upper] * m)

    pb = np.flatnonzero(disp.present | (b_lo != 0) | (b_hi != 0))
    pp = np.flatnonzero(reg.present)
    ncols = N * (m + 1)

    # balance rows
    rows = np.concatenate([np.repeat(np.arange(m), len(pb)), np.repeat(np.arange(m), len(pp))])
    cols = np.concatenate([np.tile(pb, m), (N + N * np.arange(m)[:, None] + pp[None, :]).ravel()])
    data = np.concatenate([np.repeat(row_w, len(pb)), np.repeat(row_w, len(pp))])
    A_eq = sp.csr_matrix((data, (rows, cols)), shape=(m, ncols))
    b_eq = row_w * demands.sum(axis=1)

    fin = np.flatnonzero(np.isfinite(network.capacity))
    Lf = len(fin)
    if Lf and network.n_nodes > 1:
        Hf = network.shift_factors[fin]
        r_idx = np.arange(m * Lf)
        vb = (row_w[:, None, None] * Hf[None, :, pb]).ravel()
        vp = (row_w[:, None, None] * Hf[None, :, pp]).ravel()
        rows = np.concatenate([np.repeat(r_idx, len(pb)), np.repeat(r_idx, len(pp))])
        cb = np.tile(pb, m * Lf)
        cp = (N + N * np.repeat(np.arange(m), Lf)[:, None] + pp[None, :]).ravel()
        G = sp.csr_matrix((np.concatenate([vb, vp]), (rows, np.concatenate([cb, cp]))), shape=(m * Lf, ncols))
        flow_d = demands @ Hf.T
        cap = network.capacity[fin]
        g_lo = (row_w[:, None] * (flow_d - cap)).ravel()
        g_hi = (row_w[:, None] * (flow_d + cap)).ravel()
    else:
        fin = np.zeros(0, dtype=int)
        G = sp.csr_matrix((0, ncols))
        g_lo = g_hi = np.zeros(0)
    program = qp.make_program(h, g, lo, hi, A_eq, b_eq, G, g_lo, g_hi, const)
    return program, _Layout(N, m, fin)


def _line_duals(sol: qp.QPSolution, layout: _Layout, L: int):
    m, fin = layout.m, layout.finite_lines
    mu_lo = np.zeros((m, L))
    mu_hi = np.zeros((m, L))
    if len(fin):
        mu_lo[:, fin] = sol.z_lo.reshape(m, len(fin))
        mu_hi[:, fin] = sol.z_hi.reshape(m, len(fin))
    return mu_lo, mu_hi


def _solve_program(program: qp.QuadProgram, tol: float) -> qp.QPSolution:
    lazy = program.G.shape[0] > LAZY_ROW_THRESHOLD
    return qp.solve(program, tol=tol, lazy_rows=lazy)


# -- SYSTEM ---------------------------------------------------------------

@dataclass(frozen=True)
class SystemSolution:
    """Optimal SYSTEM schedule with per-outcome (unweighted) multipliers.

    Row ``s`` of the per-outcome arrays refers to ``outcome_ids[s]``; row 0
    is the root outcome.
    """

    q_b: np.ndarray
    q_p: np.ndarray
    r: np.ndarray
    lam: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    xi_lo: np.ndarray
    xi_hi: np.ndarray
    nu_lo: np.ndarray
    nu_hi: np.ndarray
    expected_cost: float
    outcome_ids: tuple
    probabilities: np.ndarray
    kkt: dict = field(default_factory=dict)

    @property
    def K(self) -> float:
        return float(self.probabilities.sum())

    def prices(self, network: Network) -> np.ndarray:
        return qp.nodal_prices(self.lam, self.mu_lo, self.mu_hi, network).pi


def expected_cost(fleet: GeneratorFleet, tree: ScenarioTree, q_b, q_p, r) -> float:
    """``sum_s p_s sum_n (c_b(q_b) + c_p(q_p + r_s))`` with rows of ``r`` in tree order."""
    p = tree.probabilities
    return float(sum(ps * fleet.cost(q_b, q_p + rs) for ps, rs in zip(p, np.asarray(r))))


def solve_system(network: Network, fleet: GeneratorFleet, tree: ScenarioTree, tol: float = qp.DEFAULT_TOL) -> SystemSolution:
    tree = tree.rooted()
    p = tree.probabilities
    K = float(p.sum())
    D = tree.demands
    program, layout = _block_program(network, fleet, D, K, p, p)
    try:
        sol = _solve_program(program, tol)
    except Infeasible:
        oid = _first_infeasible_outcome(network, fleet, tree)
        raise Infeasible(f"SYSTEM is infeasible; first offending outcome {oid}", outcome_id=oid) from None
    q_b = layout.q_b(sol.x).copy()
    X = layout.blocks(sol.x)
    q_p = X[0].copy()
    r = X - q_p
    r[0] = 0.0
    mu_lo, mu_hi = _line_duals(sol, layout, network.n_lines)
    W = sol.w_lo[network.n_nodes:].reshape(layout.m, -1)
    V = sol.w_hi[network.n_nodes:].reshape(layout.m, -1)
    cost = expected_cost(fleet, tree, q_b, q_p, r)
    log.info("SYSTEM solved: %d outcomes, expected cost %.6g, KKT %.2e", layout.m, cost, sol.kkt_residual)
    return SystemSolution(
        q_b=q_b, q_p=q_p, r=r, lam=sol.y.copy(), mu_lo=mu_lo, mu_hi=mu_hi,
        xi_lo=sol.w_lo[: network.n_nodes].copy(), xi_hi=sol.w_hi[: network.n_nodes].copy(),
        nu_lo=W / p[:, None], nu_hi=V / p[:, None], expected_cost=cost,
        outcome_ids=tuple(tree.ids), probabilities=p.copy(), kkt=sol.residuals,
    )


def _first_infeasible_outcome(network, fleet, tree: ScenarioTree):
    """Smallest prefix of outcomes (tree order) whose joint problem is infeasible; returns its last id."""
    D = tree.demands

    def feasible(k):
        sub = D[: k + 1]
        w = np.ones(len(sub))
        prog, _ = _block_program(network, fleet, sub, 1.0, w, w)
        try:
            _solve_program(prog, 1.0)
            return True
        except Infeasible:
            return False

    lo, hi = 0, len(D) - 1
    if not feasible(0):
        return tree.outcomes[0].id
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(mid):
            lo = mid + 1
        else:
            hi = mid
    return tree.outcomes[lo].id


# -- delta ------------------------------------------------------------------

@dataclass(frozen=True)
class DeltaVector:
    """Per-node price offset for the ED objective, with where it came from."""

    values: np.ndarray
    provenance: str = "user-supplied"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("delta entries must be finite")

    def perturbed(self, mu_eps: float, sigma_eps: float, seed: int, scale: float = 1.0) -> "DeltaVector":
        """``delta + scale * eps`` with ``eps ~ N(mu_eps, sigma_eps^2 I)`` from a seeded stream."""
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        eps = rng.normal(mu_eps, sigma_eps, size=len(self.values))
        return DeltaVector(self.values + scale * eps, "perturbed",
                           {"mu_eps": mu_eps, "sigma_eps": sigma_eps, "seed": seed, "base": self.provenance})


def optimal_delta(system: SystemSolution, network: Network, tree: ScenarioTree | None = None) -> DeltaVector:
    """``delta_n = sum_s p_s (pi_n(s) - pi_n(root))`` from SYSTEM multipliers."""
    if system.lam is None or system.mu_lo is None or system.mu_hi is None:
        raise MissingDuals("SYSTEM solution carries no multipliers")
    if tree is not None and tuple(tree.rooted().ids) != system.outcome_ids:
        raise DimensionMismatch("tree does not match the SYSTEM solution")
    pi = system.prices(network)
    delta = system.probabilities @ (pi - pi[0])
    return DeltaVector(delta, "from-system-duals")


# -- ED ---------------------------------------------------------------------

@dataclass(frozen=True)
class EDSolution:
    q_b: np.ndarray
    q_p: np.ndarray
    lam: float
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    xi_lo: np.ndarray
    xi_hi: np.ndarray
    nu_lo: np.ndarray
    nu_hi: np.ndarray
    K: float
    delta: np.ndarray
    robust_outcomes: tuple = ()
    kkt: dict = field(default_factory=dict)

    def prices(self, network: Network) -> np.ndarray:
        return qp.nodal_prices(self.lam, self.mu_lo, self.mu_hi, network).pi


def solve_ed(network: Network, fleet: GeneratorFleet, d1, delta, K: float, robust: ScenarioTree | None = None,
             tol: float = qp.DEFAULT_TOL, max_rounds: int = 50) -> EDSolution:
    """Minimize ``sum_n K c_b + K c_p - delta_n q_b`` over the period-1 feasible set.

    With ``robust`` set to a scenario tree, the setpoints must also admit a
    feasible recourse in every outcome of that tree. Recourse blocks are
    added only for outcomes whose FR problem turns out infeasible.
    """
    delta = np.asarray(getattr(delta, "values", delta), dtype=float)
    d1 = np.asarray(d1, dtype=float)
    if delta.shape != (network.n_nodes,) or d1.shape != (network.n_nodes,):
        raise DimensionMismatch("delta and d1 must have one entry per node")
    extra: list[int] = []
    demands_all = robust.rooted().demands if robust is not None else None
    ids_all = robust.rooted().ids if robust is not None else None
    for _ in range(max_rounds):
        D = d1[None, :] if not extra else np.vstack([d1] + [demands_all[k] for k in extra])
        w_p = np.zeros(len(D))
        w_p[0] = K
        program, layout = _block_program(network, fleet, D, K, w_p, np.ones(len(D)), lin_b=-delta)
        try:
            # zero-cost recourse blocks rule out the active-set polish, so the
            # interior-point complementarity is only accurate to about 1e-4
            sol = _solve_program(program, tol if not extra else max(tol, ROBUST_TOL))
        except Infeasible:
            raise Infeasible("ED is infeasible" + (" under the robust constraints" if extra else "")) from None
        q_b = layout.q_b(sol.x).copy()
        q_p = layout.blocks(sol.x)[0].copy()
        if robust is None:
            break
        fr = solve_fr_batch(network, fleet, q_b, q_p, demands_all[1:])
        bad = [k + 1 for k in np.flatnonzero(~fr.feasible) if k + 1 not in extra]
        if not bad:
            break
        log.debug("robust ED: adding %d recourse blocks", len(bad))
        extra.extend(bad)
    else:
        raise Infeasible("robust ED did not settle")
    mu_lo, mu_hi = _line_duals(sol, layout, network.n_lines)
    N = network.n_nodes
    return EDSolution(
        q_b=q_b, q_p=q_p, lam=float(sol.y[0]), mu_lo=mu_lo[0], mu_hi=mu_hi[0],
        xi_lo=sol.w_lo[:N].copy(), xi_hi=sol.w_hi[:N].copy(),
        nu_lo=sol.w_lo[N:2 * N].copy(), nu_hi=sol.w_hi[N:2 * N].copy(),
        K=float(K), delta=delta, robust_outcomes=tuple(ids_all[k] for k in extra) if extra else (),
        kkt=sol.residuals,
    )


# -- FR ---------------------------------------------------------------------

@dataclass(frozen=True)
class FRSolution:
    r: np.ndarray
    lam: float
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    nu_lo: np.ndarray
    nu_hi: np.ndarray
    kkt: dict = field(default_factory=dict)

    def prices(self, network: Network) -> np.ndarray:
        return qp.nodal_prices(self.lam, self.mu_lo, self.mu_hi, network).pi


def solve_fr(network: Network, fleet: GeneratorFleet, q_b, q_p, d_s, tol: float = qp.DEFAULT_TOL) -> FRSolution:
    """Minimize regulation cost over recourse ``r`` with setpoints held fixed."""
    q_b = np.asarray(q_b, dtype=float)
    q_p = np.asarray(q_p, dtype=float)
    d_s = np.asarray(d_s, dtype=float)
    N = network.n_nodes
    for v in (q_b, q_p, d_s):
        if v.shape != (N,):
            raise DimensionMismatch(f"vector of shape {v.shape}, expected ({N},)")
    program, layout = _block_program(network, fleet, d_s[None, :], 0.0, [1.0], [1.0], b_lo=q_b, b_hi=q_b)
    sol = _solve_program(program, tol)
    x = layout.blocks(sol.x)[0]
    mu_lo, mu_hi = _line_duals(sol, layout, network.n_lines)
    return FRSolution(x - q_p, float(sol.y[0]), mu_lo[0], mu_hi[0],
                      sol.w_lo[N:].copy(), sol.w_hi[N:].copy(), sol.residuals)


@dataclass(frozen=True)
class FRBatch:
    r: np.ndarray
    lam: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    feasible: np.ndarray


def _relaxed_fr(fleet: GeneratorFleet, target):
    """Cheapest regulation output meeting each total ``target`` with no line limits.

    Returns (outputs, price, feasible). The aggregate supply curve is
    piecewise linear in the price, so it is inverted exactly by interpolation
    between its breakpoints.
    """
    reg = fleet.regulation
    k = np.flatnonzero(reg.present & ~reg.fixed)
    fixed_total = reg.lower[reg.fixed & reg.present].sum()
    lo, hi, b, c = reg.lower[k], reg.upper[k], reg.cost.b[k], reg.cost.c[k]
    target = np.asarray(target, dtype=float) - fixed_total
    n_t = len(target)
    out = np.tile(np.where(reg.present, reg.lower, 0.0), (n_t, 1))
    if len(k) == 0:
        ok = np.abs(target) <= 1e-9 * max(1.0, fixed_total)
        # any price supports a fully pinned fleet; report the marginal cost at the pins
        return out, np.zeros(n_t), ok
    bps = np.unique(np.concatenate([b + c * lo, b + c * hi]))
    supply = np.clip((bps[:, None] - b) / c, lo, hi).sum(axis=1)
    s_lo, s_hi = lo.sum(), hi.sum()
    tol = 1e-9 * max(1.0, abs(s_hi))
    ok = (target >= s_lo - tol) & (target <= s_hi + tol)
    t = np.clip(target, s_lo, s_hi)
    idx = np.clip(np.searchsorted(supply, t, side="left"), 1, max(len(bps) - 1, 1))
    if len(bps) == 1:
        price = np.full(n_t, bps[0])
    else:
        s0, s1 = supply[idx - 1], supply[idx]
        span = np.where(s1 > s0, s1 - s0, 1.0)
        price = bps[idx - 1] + np.where(s1 > s0, (t - s0) / span, 0.0) * (bps[idx] - bps[idx - 1])
    x = np.clip((price[:, None] - b) / c, lo, hi)
    # remove rounding so the balance holds to machine precision
    resid = t - x.sum(axis=1)
    room = np.where(resid[:, None] > 0, hi - x, x - lo)
    share = room / np.maximum(room.sum(axis=1, keepdims=True), 1e-300)
    x = x + resid[:, None] * share
    out[:, k] = x
    return out, price, ok


def solve_fr_batch(network: Network, fleet: GeneratorFleet, q_b, q_p, demands, tol: float = qp.DEFAULT_TOL) -> FRBatch:
    """FR for many outcomes at once; infeasible outcomes are flagged, not raised.

    Outcomes whose line limits are slack at the unconstrained optimum are
    solved in closed form; the rest go through the general solver.
    """
    D = np.atleast_2d(np.asarray(demands, dtype=float))
    q_b = np.asarray(q_b, dtype=float)
    q_p = np.asarray(q_p, dtype=float)
    S, N, L = D.shape[0], network.n_nodes, network.n_lines
    x, lam, ok = _relaxed_fr(fleet, D.sum(axis=1) - q_b.sum())
    mu_lo, mu_hi = np.zeros((S, L)), np.zeros((S, L))
    if L:
        flows = (q_b[None, :] + x - D) @ network.shift_factors.T
        cap = network.capacity
        over = np.any(np.abs(flows) > cap + 1e-9 * np.maximum(1.0, cap), axis=1)
    else:
        over = np.zeros(S, dtype=bool)
    feasible = ok.copy()
    for s in np.flatnonzero(ok & over):
        try:
            fr = solve_fr(network, fleet, q_b, q_p, D[s], tol)
        except Infeasible:
            feasible[s] = False
            continue
        x[s] = q_p + fr.r
        lam[s] = fr.lam
        mu_lo[s], mu_hi[s] = fr.mu_lo, fr.mu_hi
    r = x - q_p
    r[~feasible] = np.nan
    return FRBatch(r, lam, mu_lo, mu_hi, feasible)


# -- verification -----------------------------------------------------------

@dataclass(frozen=True)
class DecompositionReport:
    max_deviation: float
    deviations: dict
    interior_nodes: tuple
    delta_residuals: dict
    bound_nodes: tuple
    tol: float

    @property
    def forward_pass(self) -> bool:
        return self.max_deviation <= self.tol

    @property
    def converse_pass(self) -> bool:
        return all(v <= self.tol for v in self.delta_residuals.values())

    @property
    def passed(self) -> bool:
        return self.forward_pass and self.converse_pass


def _rel_dev(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))


def verify_decomposition(system: SystemSolution, ed: EDSolution, fr_r, network: Network, fleet: GeneratorFleet,
                         tol: float = 1e-5, interior_margin: float = 1e-6) -> DecompositionReport:
    """Compare the ED+FR schedule with SYSTEM and check the delta identity at doubly-interior nodes.

    ``fr_r`` holds one recourse row per SYSTEM outcome (row 0 is the root).
    The converse check recovers the offset implied by the ED schedule,
    ``K (c_b'(q_b) - c_p'(q_p))``, and compares it with the SYSTEM price
    average; this needs the node's dispatch and period-1 regulation outputs
    strictly inside their bounds.
    """
    fr_r = np.asarray(fr_r, dtype=float)
    devs = {
        "q_b": _rel_dev(system.q_b, ed.q_b),
        "q_p": _rel_dev(system.q_p, ed.q_p),
        "r": _rel_dev(system.r, fr_r) if np.all(np.isfinite(fr_r)) else np.inf,
    }
    disp, reg = fleet.dispatch, fleet.regulation
    K = system.K
    pi = system.prices(network)
    rhs = system.probabilities @ (pi - pi[0])

    def inside(q, lo, hi):
        m = interior_margin * np.maximum(1.0, hi - lo)
        return (q > lo + m) & (q < hi - m)

    both = disp.present & reg.present
    interior = both & inside(ed.q_b, disp.lower, disp.upper) & inside(ed.q_p, reg.lower, reg.upper)
    implied = K * (disp.cost.marginal(ed.q_b) - reg.cost.marginal(ed.q_p))
    residuals = {int(n): float(abs(implied[n] - rhs[n])) for n in np.flatnonzero(interior)}
    bound_nodes = tuple(int(n) for n in np.flatnonzero(both & ~interior))
    return DecompositionReport(max(devs.values()), devs, tuple(residuals), residuals, bound_nodes, tol)


@dataclass(frozen=True)
class DecompositionRun:
    system: SystemSolution
    delta: DeltaVector
    ed: EDSolution
    fr: FRBatch
    report: DecompositionReport
    expected_cost: float


def run_decomposition(instance: Instance, delta: DeltaVector | None = None, robust: bool = False,
                      tol: float = 1e-5, system: SystemSolution | None = None) -> DecompositionRun:
    """SYSTEM, delta (optimal unless given), ED and per-outcome FR, plus the comparison report."""
    net, fleet, tree = instance.network, instance.fleet, instance.tree.rooted()
    system = system or solve_system(net, fleet, tree)
    if delta is None:
        delta = optimal_delta(system, net)
    ed = solve_ed(net, fleet, tree.root.demand, delta.values, system.K, robust=tree if robust else None)
    fr = solve_fr_batch(net, fleet, ed.q_b, ed.q_p, tree.demands)
    report = verify_decomposition(system, ed, fr.r, net, fleet, tol)
    cost = expected_cost(fleet, tree, ed.q_b, ed.q_p, fr.r) if fr.feasible.all() else np.inf
    return DecompositionRun(system, delta, ed, fr, report, cost)
