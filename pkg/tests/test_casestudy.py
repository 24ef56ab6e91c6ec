from __future__ import annotations

import numpy as np
import pytest

from edfr.casestudy import SweepConfig, emit_report, load_rts24, load_rts24_dir, run_sweep
from edfr.casestudy.rts24 import UNIT_GROUPS, default_data_dir, group, unit_cost
from edfr.errors import InvalidParameters, ParseError, UnknownUnitGroup

SMALL = dict(mu_d=[0.0], K=3, n_samples=2, mu_eps=[0.0, 10.0], sigma_eps=[0.0, 2.0], seed=7)


@pytest.fixture(scope="module")
def data():
    return load_rts24_dir()


@pytest.fixture(scope="module")
def small_result(data):
    return run_sweep(SweepConfig(**SMALL), data)


# -- data ---------------------------------------------------------------------------

def test_table_values_for_u155():
    g = group("U155")
    assert g.q_range == (216, 620) and g.mc_range == (13.294, 14.974) and g.role == "dispatch"
    a, b, c = unit_cost(216, 620, 13.294, 14.974)
    assert b + c * 216 == pytest.approx(13.294, abs=1e-9)
    assert b + c * 620 == pytest.approx(14.974, abs=1e-9)


def test_fitted_endpoints_for_every_group():
    for g in UNIT_GROUPS.values():
        a, b, c = unit_cost(*g.q_range, *g.mc_range)
        lo, hi = g.q_range
        assert b + c * lo == pytest.approx(g.mc_range[0], abs=1e-9)
        if g.mc_range[1] > g.mc_range[0]:
            assert b + c * hi == pytest.approx(g.mc_range[1], abs=1e-9)
        else:
            assert c == 1e-6  # flat curves are regularized


def test_single_u155_unit_at_bus_16(data):
    k = data.network.index(16)
    d = data.fleet.dispatch
    # the group range in the table covers four units
    assert (d.lower[k], d.upper[k]) == pytest.approx((54.0, 155.0))
    assert d.cost.b[k] + d.cost.c[k] * 54.0 == pytest.approx(13.294, abs=1e-9)
    assert d.cost.b[k] + d.cost.c[k] * 155.0 == pytest.approx(14.974, abs=1e-9)


def test_hydro_is_regulation(data):
    k = data.network.index(22)
    reg = data.fleet.regulation
    assert reg.present[k] and not data.fleet.dispatch.present[k]
    # six flat units: the aggregate curvature is floored at 1e-6, so the marginal
    # stays within a few 1e-4 $/MWh of the table value across the whole range
    q = np.linspace(reg.lower[k], reg.upper[k], 50)
    assert np.max(np.abs(reg.cost.b[k] + reg.cost.c[k] * q - 0.001)) <= 5e-4
    assert reg.cost.c[k] <= 1e-6


def test_system_size(data):
    assert data.network.n_nodes == 24 and data.network.n_lines == 38
    assert data.demand.sum() == pytest.approx(2850.0)
    cap = data.fleet.dispatch.upper.sum() + data.fleet.regulation.upper.sum()
    assert cap > data.demand.sum()


def test_unknown_group_rejected(tmp_path):
    src = default_data_dir()
    for name in ("nodes.csv", "lines.csv"):
        (tmp_path / name).write_text((src / name).read_text())
    (tmp_path / "units.csv").write_text("node,group,count\n1,U999,1\n")
    with pytest.raises(UnknownUnitGroup):
        load_rts24(tmp_path / "units.csv", tmp_path / "lines.csv")


def test_malformed_files_rejected(tmp_path):
    with pytest.raises(ParseError):
        load_rts24_dir(tmp_path)
    src = default_data_dir()
    for name in ("nodes.csv", "lines.csv"):
        (tmp_path / name).write_text((src / name).read_text())
    (tmp_path / "units.csv").write_text("node,kind\n1,U20\n")
    with pytest.raises(ParseError):
        load_rts24_dir(tmp_path)
    (tmp_path / "units.csv").write_text("node,group,count\n99,U20,1\n")
    with pytest.raises(ParseError):
        load_rts24_dir(tmp_path)


# -- config -----------------------------------------------------------------------

def test_config_validation(tmp_path):
    with pytest.raises(InvalidParameters):
        SweepConfig(n_samples=0)
    with pytest.raises(InvalidParameters):
        SweepConfig(mu_eps=[])
    with pytest.raises(InvalidParameters):
        SweepConfig(K=0)
    bad = tmp_path / "bad.toml"
    bad.write_text("[sweep]\nn_sample = 3\n")
    with pytest.raises(ParseError):
        SweepConfig.from_toml(bad)


def test_packaged_config_is_the_default():
    from edfr.casestudy.sweep import SweepConfig as C
    path = default_data_dir().parent / "sweep.toml"
    assert C.from_toml(path) == C()
    assert C().n_combos == 3 * 3 * 2


# -- sweep ------------------------------------------------------------------------

def test_small_sweep_invariants(small_result):
    assert all(small_result.checks().values())
    rows = small_result.rows
    assert len(rows) == 4 * 2
    for r in rows:
        if r["feasible"]:
            assert r["pct_increase"] >= -1e-4


def test_one_sample_sweep_row_count(data, tmp_path):
    cfg = SweepConfig(mu_d=[0.0, 0.0002], K=2, n_samples=1, mu_eps=[0.0], sigma_eps=[0.0, 1.0], seed=3)
    res = run_sweep(cfg, data)
    emit_report(res, tmp_path, formats=("csv",))
    lines = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert len(lines) - 1 == cfg.n_combos == 4


def test_report_is_byte_identical(data, small_result, tmp_path):
    again = run_sweep(SweepConfig(**SMALL), data)
    emit_report(small_result, tmp_path / "a")
    emit_report(again, tmp_path / "b")
    for name in ("sweep.csv", "summary.csv", "delta_star.csv", "demand_paths.svg", "cost_increase.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_summary_aggregates(small_result):
    s = small_result.summary()
    assert len(s) == 4
    zero = small_result.mean_increase(0.0, 0.0, 0.0)
    assert abs(zero) <= 1e-4
    with pytest.raises(KeyError):
        small_result.mean_increase(1.0, 0.0, 0.0)
