from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from edfr.errors import (
    DimensionMismatch,
    DisconnectedGraph,
    InvalidParameters,
    NonpositiveSusceptance,
    UnbalancedInjection,
)
from edfr.grid import (
    GeneratorFleet,
    GeneratorSet,
    QuadraticCost,
    aggregate_units,
    build_network,
    check_feasible,
    generator_set,
    line_flows,
    merit_order_marginal,
)


def theta_flows(nodes, lines, p):
    """Flows by solving L theta = p with the last angle grounded, then B (theta_i - theta_j)."""
    n = len(nodes)
    pos = {v: k for k, v in enumerate(nodes)}
    Lm = np.zeros((n, n))
    for t, h, b, _ in lines:
        i, j = pos[t], pos[h]
        Lm[i, i] += b
        Lm[j, j] += b
        Lm[i, j] -= b
        Lm[j, i] -= b
    theta = np.zeros(n)
    theta[:-1] = np.linalg.solve(Lm[:-1, :-1], np.asarray(p, float)[:-1])
    return np.array([b * (theta[pos[t]] - theta[pos[h]]) for t, h, b, _ in lines])


TRIANGLE = [(1, 2, 1.0, np.inf), (1, 3, 1.0, np.inf), (2, 3, 1.0, np.inf)]


def test_two_node_shift_factors():
    net = build_network([1, 2], [(1, 2, 1.0, 10.0)])
    assert np.allclose(net.shift_factors, [[0.5, -0.5]], atol=1e-12)


def test_triangle_laplacian_spectrum():
    net = build_network([1, 2, 3], TRIANGLE)
    # K3 characteristic polynomial: lambda (lambda - 3)^2
    assert np.allclose(np.sort(net.eigenvalues), [0.0, 3.0, 3.0], atol=1e-12)


def test_uniform_injection_produces_no_flow():
    net = build_network([1, 2, 3], TRIANGLE)
    assert np.allclose(net.shift_factors @ np.full(3, 7.0), 0.0, atol=1e-12)


def test_two_node_flow():
    net = build_network([1, 2], [(1, 2, 1.0, 10.0)])
    assert line_flows(net, [5.0, -5.0]) == pytest.approx([5.0])
    assert np.allclose(line_flows(net, [0.0, 0.0]), 0.0)


def test_triangle_flows_match_angle_solve():
    net = build_network([1, 2, 3], TRIANGLE)
    flows = line_flows(net, [3.0, -3.0, 0.0])
    assert np.allclose(flows, [2.0, 1.0, -1.0], atol=1e-12)
    assert np.allclose(flows, theta_flows([1, 2, 3], TRIANGLE, [3, -3, 0]), atol=1e-12)


def test_unbalanced_injection_rejected():
    net = build_network([1, 2], [(1, 2, 1.0, 10.0)])
    with pytest.raises(UnbalancedInjection):
        line_flows(net, [1.0, 0.0])


def test_build_errors():
    with pytest.raises(DisconnectedGraph):
        build_network([1, 2, 3], [(1, 2, 1.0, 5.0)])
    with pytest.raises(NonpositiveSusceptance):
        build_network([1, 2], [(1, 2, 0.0, 5.0)])
    with pytest.raises(InvalidParameters):
        build_network([1, 2], [(1, 9, 1.0, 5.0)])


def test_operators_are_read_only():
    net = build_network([1, 2], [(1, 2, 1.0, 10.0)])
    with pytest.raises(ValueError):
        net.shift_factors[0, 0] = 1.0


def _fleet_1node(lo_p=0.0, hi_p=100.0):
    d = GeneratorSet(np.array([0.0]), np.array([100.0]), QuadraticCost(np.zeros(1), np.ones(1), np.ones(1)), np.array([True]))
    p = GeneratorSet(np.array([lo_p]), np.array([hi_p]), QuadraticCost(np.zeros(1), np.ones(1), np.ones(1)), np.array([True]))
    return GeneratorFleet(d, p)


def test_single_node_feasible():
    net = build_network([1], [])
    rep = check_feasible(net, _fleet_1node(), [4.0], [6.0], [0.0], [10.0])
    assert rep.feasible and not rep.violations


def test_line_violation_magnitude():
    net = build_network([1, 2], [(1, 2, 1.0, 4.0)])
    fleet = GeneratorFleet(generator_set(2, {0: (0, 100, 0, 1, 1)}), generator_set(2, {0: (0, 100, 0, 1, 1)}))
    # 10 MW generated at node 1 against demand (5, 5): net injection (5, -5), flow 5 on a 4 MW line
    rep = check_feasible(net, fleet, [10.0, 0.0], [0.0, 0.0], [0.0, 0.0], [5.0, 5.0])
    lines = [v for v in rep.violations if v.kind == "line"]
    assert len(lines) == 1 and lines[0].magnitude == pytest.approx(1.0)


def test_regulation_cap_violation():
    net = build_network([1], [])
    rep = check_feasible(net, _fleet_1node(hi_p=10.0), [0.0], [8.0], [4.0], [12.0])
    (v,) = rep.violations
    assert v.kind == "regulation-cap" and v.magnitude == pytest.approx(2.0)


def test_check_feasible_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        check_feasible(build_network([1], []), _fleet_1node(), [1.0, 2.0], [0.0], [0.0], [0.0])


def test_curvature_floor_enforced():
    with pytest.raises(InvalidParameters):
        GeneratorSet(np.zeros(1), np.ones(1), QuadraticCost(np.zeros(1), np.zeros(1), np.array([1e-9])), np.array([True]))


def test_aggregate_identical_units_exact():
    lo, hi, a, b, c = aggregate_units([10, 10], [50, 50], [0, 0], [5, 5], [0.2, 0.2])
    assert (lo, hi) == (20, 100)
    # two identical units share output equally: marginal 5 + 0.2 q/2
    assert b == pytest.approx(5.0, abs=1e-9) and c == pytest.approx(0.1, abs=1e-9)
    assert merit_order_marginal(60.0, [10, 10], [50, 50], [5, 5], [0.2, 0.2])[0] == pytest.approx(11.0)


# -- properties -------------------------------------------------------------

@st.composite
def connected_networks(draw, max_nodes=8):
    n = draw(st.integers(1, max_nodes))
    lines = []
    for j in range(1, n):
        i = draw(st.integers(0, j - 1))
        lines.append((i + 1, j + 1, draw(st.floats(0.1, 10.0)), np.inf))
    extra = draw(st.lists(st.tuples(st.integers(1, n), st.integers(1, n), st.floats(0.1, 10.0)), max_size=6))
    for i, j, b in extra:
        if i != j:
            lines.append((i, j, b, np.inf))
    return list(range(1, n + 1)), lines


@given(connected_networks(), st.data())
def test_pseudo_inverse_on_balanced_injections(netdef, data):
    nodes, lines = netdef
    net = build_network(nodes, lines)
    p = np.array(data.draw(st.lists(st.floats(-100, 100), min_size=len(nodes), max_size=len(nodes))))
    p -= p.mean()
    assert np.allclose(net.laplacian @ net.laplacian_pinv @ p, p, atol=1e-8)
    assert np.all(net.incidence.sum(axis=0) == 0)
    assert np.max(np.abs(net.shift_factors @ np.ones(len(nodes))), initial=0.0) <= 1e-10
    assert np.allclose(net.laplacian, net.laplacian.T)
    assert np.min(net.eigenvalues) >= -1e-9 * max(1.0, np.max(net.eigenvalues))
    if len(nodes) > 1 and lines:
        assert np.allclose(line_flows(net, p), theta_flows(nodes, lines, p), atol=1e-7)


@given(st.integers(0, 10_000))
def test_check_feasible_matches_direct_evaluation(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    lines = [(j + 1, int(rng.integers(0, j)) + 1, float(rng.uniform(0.5, 2)), float(rng.uniform(1, 20)))
             for j in range(1, n)]
    net = build_network(list(range(1, n + 1)), lines)
    lo_b, lo_p = rng.uniform(0, 5, n), rng.uniform(0, 5, n)
    fleet = GeneratorFleet(
        GeneratorSet(lo_b, lo_b + rng.uniform(0, 30, n), QuadraticCost(np.zeros(n), np.ones(n), np.ones(n)), np.ones(n, bool)),
        GeneratorSet(lo_p, lo_p + rng.uniform(0, 30, n), QuadraticCost(np.zeros(n), np.ones(n), np.ones(n)), np.ones(n, bool)),
    )
    q_b, q_p, r = rng.uniform(-5, 40, n), rng.uniform(-5, 40, n), rng.uniform(-5, 5, n)
    d = rng.uniform(0, 40, n)
    if rng.random() < 0.5:
        d += (q_b + q_p + r - d).sum() / n
    tol = 1e-6
    rep = check_feasible(net, fleet, q_b, q_p, r, d, tol)

    # independent re-evaluation: caps, balance, then flows from an angle solve
    expect = set()
    for k in range(n):
        if q_b[k] < lo_b[k] - tol or q_b[k] > fleet.dispatch.upper[k] + tol:
            expect.add(("dispatch-cap", k))
        x = q_p[k] + r[k]
        if x < lo_p[k] - tol or x > fleet.regulation.upper[k] + tol:
            expect.add(("regulation-cap", k))
    inj = q_b + q_p + r - d
    if abs(inj.sum()) > tol:
        expect.add(("balance", 0))
    if n > 1:
        bal = inj - inj.mean()  # the flow of the balanced part
        flows = theta_flows(list(range(1, n + 1)), lines, bal)
        for l, (f, (_, _, _, cap)) in enumerate(zip(flows, lines)):
            if abs(f) - cap > tol:
                expect.add(("line", l))
    assert {(v.kind, v.index) for v in rep.violations} == expect
    assert rep.feasible == (not expect)


@given(st.floats(0.0, 50.0), st.floats(1.0, 100.0), st.floats(-20, 20), st.floats(1e-3, 5.0), st.floats(0.0, 1.0))
def test_inverse_marginal_round_trip(lo, width, b, c, frac):
    cost = QuadraticCost(np.array([0.0]), np.array([b]), np.array([c]))
    q = lo + frac * width
    assert cost.inverse_marginal(cost.marginal(np.array([q])))[0] == pytest.approx(q, abs=1e-9)
