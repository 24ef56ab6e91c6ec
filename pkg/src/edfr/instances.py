"""Seeded random instances and small canned cases used by tests and the CLI."""

from __future__ import annotations

import numpy as np

from .decomposition import Instance
from .grid import GeneratorFleet, GeneratorSet, QuadraticCost, build_network
from .scenario import make_tree, single_outcome_tree


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _random_tree_shape(rng, K_max: int, S_max: int):
    K = int(rng.integers(1, K_max + 1))
    K = min(K, S_max)
    counts = [1] + [1] * (K - 1)
    spare = S_max - K
    for k in range(1, K):
        extra = int(rng.integers(0, min(spare, 2) + 1))
        counts[k] += extra
        spare -= extra
    return K, counts


def random_instance(seed, max_nodes: int = 5, K_max: int = 4, S_max: int = 7, congest: bool = True) -> Instance:
    """A feasible instance built around a random reference schedule.

    Demands are chosen so that a random schedule inside the generator bounds
    balances every outcome, and line limits are set at 1 to 1.5 times the
    reference flows, so limits frequently bind at the optimum.
    """
    rng = _rng(seed)
    N = int(rng.integers(1, max_nodes + 1))
    nodes = list(range(1, N + 1))
    lines = []
    for j in range(1, N):
        i = int(rng.integers(0, j))
        lines.append([nodes[i], nodes[j], float(rng.uniform(0.5, 2.0))])
    for i in range(N):
        for j in range(i + 1, N):
            if rng.random() < 0.3 and not any({a, b} == {nodes[i], nodes[j]} for a, b, _ in lines):
                lines.append([nodes[i], nodes[j], float(rng.uniform(0.5, 2.0))])

    has_b = rng.random(N) < 0.8
    has_p = rng.random(N) < 0.8
    has_b[int(rng.integers(N))] = True
    has_p[int(rng.integers(N))] = True

    def gens(mask, b_rng, c_rng):
        lo = np.where(mask, rng.uniform(0, 10, N), 0.0)
        hi = np.where(mask, lo + rng.uniform(20, 80, N), 0.0)
        b = np.where(mask, rng.uniform(*b_rng, N), 0.0)
        c = np.where(mask, rng.uniform(*c_rng, N), 1.0)
        a = np.where(mask, rng.uniform(0, 5, N), 0.0)
        return GeneratorSet(lo, hi, QuadraticCost(a, b, c), mask.copy())

    fleet = GeneratorFleet(gens(has_b, (5, 40), (0.05, 1.0)), gens(has_p, (10, 60), (0.1, 2.0)))

    K, counts = _random_tree_shape(rng, K_max, S_max)
    disp, reg = fleet.dispatch, fleet.regulation
    qb_ref = rng.uniform(disp.lower, disp.upper)
    records, prev, nid = [], [], 1
    injections = []
    for k, n_k in enumerate(counts, start=1):
        p = np.ones(1) if n_k == 1 else rng.dirichlet(np.ones(n_k))
        cur = []
        for j in range(n_k):
            qp_ref = rng.uniform(reg.lower, reg.upper)
            total = qb_ref.sum() + qp_ref.sum()
            d = total * rng.dirichlet(np.ones(N))
            parent = None if k == 1 else int(prev[int(rng.integers(len(prev)))])
            records.append({"id": nid, "period": k, "parent": parent, "p": float(p[j]), "demand": d})
            injections.append(qb_ref + qp_ref - d)
            cur.append(nid)
            nid += 1
        prev = cur
    tree = make_tree(records, K)

    net0 = build_network(nodes, [(a, b, s, np.inf) for a, b, s in lines])
    flows = np.abs(np.array(injections) @ net0.shift_factors.T).max(axis=0) if net0.n_lines else np.zeros(0)
    if congest:
        caps = flows * rng.uniform(1.0, 1.5, len(flows)) + 1e-3
    else:
        caps = np.full(len(flows), np.inf)
    network = build_network(nodes, [(a, b, s, f) for (a, b, s), f in zip(lines, caps)])
    return Instance(network, fleet, tree)


def one_node_instance(demands, periods, probs, parents, dispatch, regulation) -> Instance:
    """Single-node instance; ``dispatch`` and ``regulation`` are ``(lo, hi, a, b, c)``."""
    network = build_network([1], [])

    def one(spec):
        lo, hi, a, b, c = spec
        return GeneratorSet(np.array([lo], float), np.array([hi], float),
                            QuadraticCost(np.array([a], float), np.array([b], float), np.array([c], float)),
                            np.array([True]))

    records = [{"id": k + 1, "period": per, "parent": par, "p": p, "demand": [d]}
               for k, (d, per, p, par) in enumerate(zip(demands, periods, probs, parents))]
    return Instance(network, GeneratorFleet(one(dispatch), one(regulation)), make_tree(records, max(periods)))


def three_bus_dfr_case(congested: bool = True, step_mw: float = 5.0):
    """Triangle network with regulation at every bus and a demand step at bus 3.

    Returns ``(network, fleet, q_b, q_p, d1, d_s)`` where ``(q_b, q_p)`` is the
    ED optimum for ``d1`` with zero offset and ``d_s`` adds ``step_mw`` at bus 3.
    """
    from .decomposition import solve_ed

    # line 1-3 carries 28.2 MW at the ED optimum, so the step pushes it onto its limit
    cap = 29.0 if congested else np.inf
    network = build_network([1, 2, 3], [(1, 2, 1.0, np.inf), (1, 3, 1.0, cap), (2, 3, 2.0, np.inf)])
    disp = GeneratorSet(np.array([0.0, 0.0, 0.0]), np.array([100.0, 0.0, 0.0]),
                        QuadraticCost(np.zeros(3), np.array([10.0, 0.0, 0.0]), np.array([0.05, 1.0, 1.0])),
                        np.array([True, False, False]))
    reg = GeneratorSet(np.zeros(3), np.full(3, 40.0),
                       QuadraticCost(np.zeros(3), np.array([5.0, 8.0, 12.0]), np.full(3, 0.5)),
                       np.array([True, True, True]))
    fleet = GeneratorFleet(disp, reg)
    d1 = np.array([10.0, 20.0, 40.0])
    ed = solve_ed(network, fleet, d1, np.zeros(3), 1.0)
    d_s = d1 + np.array([0.0, 0.0, step_mw])
    return network, fleet, ed.q_b, ed.q_p, d1, d_s


def single_tree(demand):
    return single_outcome_tree(demand)
