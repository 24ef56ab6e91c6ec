from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from edfr import qp
from edfr.decomposition import _block_program, solve_system
from edfr.errors import DegenerateDualsWarning, DimensionMismatch, Infeasible
from edfr.grid import build_network
from edfr.instances import random_instance
from tests.conftest import grid_argmin
from tests.oracles import projected_gradient_dispatch

INF = np.inf


def test_single_pinned_variable():
    p = qp.make_program([1.0], [0.0], [-INF], [INF], [[1.0]], [3.0])
    s = qp.solve(p)
    assert s.x[0] == pytest.approx(3.0) and s.y[0] == pytest.approx(3.0)


def _equal_marginal(c, total):
    """Bisection on lambda for sum_i lambda / c_i = total."""
    lo, hi = 0.0, 1e3
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if np.sum(mid / np.asarray(c)) < total else (lo, mid)
    return 0.5 * (lo + hi)


def test_two_generators_share_load():
    p = qp.make_program([1.0, 2.0], [0.0, 0.0], [-INF] * 2, [INF] * 2, [[1.0, 1.0]], [3.0])
    s = qp.solve(p)
    lam = _equal_marginal([1.0, 2.0], 3.0)
    assert s.x == pytest.approx([2.0, 1.0], abs=1e-8)
    assert s.y[0] == pytest.approx(lam, abs=1e-8) and lam == pytest.approx(2.0, abs=1e-8)


def test_bound_active_multiplier():
    # q in (-inf, 1] with cost q^2/2, u >= 0 with cost 10 u, q + u = 3
    p = qp.make_program([1.0, 0.0], [0.0, 10.0], [-INF, 0.0], [1.0, INF], [[1.0, 1.0]], [3.0])
    s = qp.solve(p)
    # brute force over the active sets of the single bound
    candidates = []
    for q_at_bound in (True, False):
        if q_at_bound:
            q, lam = 1.0, 10.0
            xi = lam - q
            ok = xi >= 0
        else:
            lam = 10.0
            q, xi = lam, 0.0
            ok = q <= 1.0
        if ok:
            candidates.append((q, lam, xi))
    (q, lam, xi), = candidates
    assert s.x[0] == pytest.approx(q, abs=1e-6)
    assert s.y[0] == pytest.approx(lam, abs=1e-6)
    assert s.w_hi[0] == pytest.approx(xi, abs=1e-6) and xi == pytest.approx(9.0)


def test_infeasible_program():
    p = qp.make_program([1.0], [0.0], [0.0], [1.0], [[1.0]], [5.0])
    with pytest.raises(Infeasible):
        qp.solve(p)


def test_nodal_prices_examples():
    net = build_network([1, 2], [(1, 2, 1.0, 10.0)])
    assert qp.nodal_prices(10.0, [0.0], [0.0], net).pi == pytest.approx([10.0, 10.0])
    assert qp.nodal_prices(10.0, [0.0], [2.0], net).pi == pytest.approx([9.0, 11.0])
    with pytest.raises(DimensionMismatch):
        qp.nodal_prices(10.0, [0.0, 1.0], [2.0, 0.0], net)


@given(st.floats(-50, 50), st.lists(st.floats(0, 20), min_size=3, max_size=3),
       st.lists(st.floats(0, 20), min_size=3, max_size=3), st.floats(0.1, 10))
def test_nodal_prices_linear_in_congestion(lam, mlo, mhi, k):
    net = build_network([1, 2, 3], [(1, 2, 1.0, 5.0), (2, 3, 2.0, 5.0), (1, 3, 1.5, 5.0)])
    base = qp.nodal_prices(lam, mlo, mhi, net).pi - lam
    scaled = qp.nodal_prices(lam, k * np.array(mlo), k * np.array(mhi), net).pi - lam
    assert np.allclose(scaled, k * base, atol=1e-9)
    assert np.allclose(qp.nodal_prices(lam, mlo, mhi, net).pi,
                       lam + net.shift_factors.T @ (np.array(mlo) - np.array(mhi)), atol=1e-12)


def test_kkt_residual_reacts_to_perturbed_lambda():
    p = qp.make_program([1.0, 2.0], [0.0, 0.0], [-INF] * 2, [INF] * 2, [[1.0, 1.0]], [3.0])
    s = qp.solve(p)
    bumped = qp.QPSolution(s.x, s.y + 1.0, s.z_lo, s.z_hi, s.w_lo, s.w_hi, s.objective, s.polished, s.iterations)
    assert qp.kkt_residual(p, bumped)["stationarity"] == pytest.approx(1.0, abs=1e-9)


def test_kkt_residual_at_grid_search_optimum():
    # one node: dispatch (b=2, c=1) and regulation (b=5, c=0.5) serve d = 10
    p = qp.make_program([1.0, 0.5], [2.0, 5.0], [0.0, 0.0], [8.0, 8.0], [[1.0, 1.0]], [10.0])
    x, _ = grid_argmin(lambda q: np.where((10 - q >= 0) & (10 - q <= 8),
                                          2 * q + 0.5 * q * q + 5 * (10 - q) + 0.25 * (10 - q) ** 2, np.inf),
                       0.0, 8.0, step=1e-4)
    point = np.array([x, 10 - x])
    lam = 2.0 + x  # dispatch marginal at the grid optimum
    cand = qp.QPSolution(point, np.array([lam]), np.zeros(0), np.zeros(0), np.zeros(2), np.zeros(2), 0.0, False, 0)
    assert max(qp.kkt_residual(p, cand).values()) <= 1e-4


def test_degenerate_warning_on_parallel_active_rows():
    # two identical line rows both binding
    G = np.array([[1.0, -1.0], [1.0, -1.0]])
    p = qp.make_program([1.0, 1.0], [0.0, 10.0], [-INF] * 2, [INF] * 2, [[1.0, 1.0]], [4.0], G, [-INF, -INF], [1.0, 1.0])
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        s = qp.solve(p)
    assert any(issubclass(w.category, DegenerateDualsWarning) for w in rec)
    assert s.kkt_residual <= 1e-6


def test_projected_gradient_oracle_agreement():
    worst = 0.0
    for seed in range(50):
        inst = random_instance(seed, max_nodes=3, K_max=1, S_max=1)
        sol = solve_system(inst.network, inst.fleet, inst.tree)
        qb, qpp = projected_gradient_dispatch(inst.network, inst.fleet, inst.tree.root.demand)
        for mine, ref in ((sol.q_b, qb), (sol.q_p, qpp)):
            worst = max(worst, float(np.max(np.abs(mine - ref) / np.maximum(1.0, np.abs(ref)))))
    assert worst <= 1e-5


@given(st.integers(0, 100_000))
def test_solver_certificates(seed):
    inst = random_instance(seed)
    tree = inst.tree.rooted()
    program, _ = _block_program(inst.network, inst.fleet, tree.demands, tree.K, tree.probabilities,
                                tree.probabilities)
    s = qp.solve(program)
    res = qp.kkt_residual(program, s)
    scale = max(1.0, abs(s.objective))
    assert max(res.values()) <= 1e-6
    assert res["complementarity"] <= 1e-6
    assert min(s.z_lo.min(initial=0), s.z_hi.min(initial=0), s.w_lo.min(initial=0), s.w_hi.min(initial=0)) >= 0
    # strong duality: the Lagrangian at (x, multipliers) equals the objective
    assert abs(qp.lagrangian(program, s) - s.objective) <= 1e-6 * scale
