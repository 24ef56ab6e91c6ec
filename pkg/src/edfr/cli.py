"""Command-line entry points: ``edfr decompose | dfr-sim | market-verify | casestudy | example``."""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import io
from .decomposition import (
    DeltaVector,
    expected_cost,
    optimal_delta,
    solve_ed,
    solve_fr_batch,
    solve_system,
    verify_decomposition,
)
from .dfr import DfrGains, DynamicParams, simulate
from .errors import EdfrError
from .scenario import validate_tree

log = logging.getLogger("edfr.cli")


def _vector(value, n: int, what: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (n,)) if np.ndim(value) == 0 else np.asarray(value, float)
    if arr.shape != (n,):
        raise click.BadParameter(f"{what} needs {n} entries")
    return np.array(arr)


def _delta(spec: str, system, network) -> DeltaVector:
    if spec == "auto":
        return optimal_delta(system, network)
    if spec == "zero":
        return DeltaVector(np.zeros(network.n_nodes), "zero")
    data = json.loads(Path(spec).read_text())
    values = data["values"] if isinstance(data, dict) else data
    return DeltaVector(_vector(values, network.n_nodes, "delta"), f"file:{spec}")


def _finish(ok: bool, message: str) -> None:
    click.echo(f"{'PASS' if ok else 'FAIL'}: {message}")
    sys.exit(0 if ok else 1)


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more log output.")
def main(verbose: int) -> None:
    """Two-timescale dispatch / regulation tools."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--network", "network_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Network JSON, or nodes CSV when --lines is given.")
@click.option("--lines", "lines_path", type=click.Path(exists=True, dir_okay=False), help="Lines CSV.")
@click.option("--generators", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tree", "tree_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--delta", "delta_spec", default="auto", show_default=True,
              help="'auto' (optimal), 'zero', or a JSON file of per-node values.")
@click.option("--robust", is_flag=True, help="Constrain ED so that FR is feasible in every outcome.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def decompose(network_path, lines_path, generators, tree_path, delta_spec, robust, out):
    """Solve SYSTEM, then ED with the offset and FR per outcome, and compare."""
    try:
        network = io.load_network(network_path, lines_path)
        fleet = io.load_generators(generators, network)
        tree = io.load_tree(tree_path).rooted()
        problems = validate_tree(tree)
        if problems:
            raise click.ClickException("invalid tree: " + "; ".join(problems))
        system = solve_system(network, fleet, tree)
        delta = _delta(delta_spec, system, network)
        ed = solve_ed(network, fleet, tree.root.demand, delta.values, system.K, robust=tree if robust else None)
        fr = solve_fr_batch(network, fleet, ed.q_b, ed.q_p, tree.demands)
    except EdfrError as exc:
        raise click.ClickException(str(exc)) from exc
    feasible = bool(fr.feasible.all())
    cost = expected_cost(fleet, tree, ed.q_b, ed.q_p, fr.r) if feasible else float("inf")
    report = verify_decomposition(system, ed, fr.r, network, fleet) if feasible else None
    checks = {"fr_feasible": feasible,
              "dominance": feasible and cost >= system.expected_cost * (1 - 1e-6) - 1e-6}
    if delta_spec == "auto" and report is not None:
        checks["decomposition_exact"] = report.forward_pass
        checks["converse_residual"] = report.converse_pass
    io.write_json({
        "nodes": list(network.node_ids),
        "outcome_ids": tree.ids,
        "system": {"expected_cost": system.expected_cost, "q_b": system.q_b, "q_p": system.q_p, "r": system.r},
        "delta": {"values": delta.values, "provenance": delta.provenance, "per_period": delta.values / system.K},
        "ed": {"q_b": ed.q_b, "q_p": ed.q_p, "robust_outcomes": list(ed.robust_outcomes)},
        "fr": {"r": fr.r, "feasible": fr.feasible},
        "edfr_expected_cost": cost,
        "report": None if report is None else {
            "max_deviation": report.max_deviation, "interior_nodes": report.interior_nodes,
            "delta_residuals": report.delta_residuals},
        "checks": checks,
    }, out)
    _finish(all(checks.values()), f"decomposition written to {out}")


def _case_setpoints(case):
    network, fleet = case["network"], case["fleet"]
    if "q_b" in case and "q_p" in case:
        return case["q_b"], case["q_p"]
    if "d1" not in case:
        raise click.ClickException("case needs q_b/q_p or d1")
    ed = solve_ed(network, fleet, case["d1"], np.zeros(network.n_nodes), 1.0)
    return ed.q_b, ed.q_p


@main.command("dfr-sim")
@click.option("--instance", "case_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dt", default=1e-3, show_default=True, type=float)
@click.option("--T", "T", default=60.0, show_default=True, type=float)
@click.option("--gains", "gains_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON with zeta_pi, zeta_mu_hi, zeta_mu_lo, chi_phi (scalars or lists).")
@click.option("--barrier", default=1e-4, show_default=True, type=float)
@click.option("--record-every", default=1, show_default=True, type=int, help="Write every n-th step.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def dfr_sim(case_path, dt, T, gains_path, barrier, record_every, out):
    """Simulate the distributed regulation controller after a demand step."""
    try:
        case = io.load_case(case_path)
        network, fleet = case["network"], case["fleet"]
        N, L = network.n_nodes, network.n_lines
        if "d_s" not in case:
            raise click.ClickException("case needs d_s")
        q_b, q_p = _case_setpoints(case)
        raw = case["raw"]
        params = DynamicParams(_vector(raw.get("M", 0.1), N, "M"), _vector(raw.get("D", 1.0), N, "D"))
        gains = DfrGains.uniform(N, L)
        if gains_path:
            g = json.loads(Path(gains_path).read_text())
            gains = DfrGains(_vector(g.get("zeta_pi", 1.0), N, "zeta_pi"),
                             _vector(g.get("zeta_mu_hi", 1.0), L, "zeta_mu_hi"),
                             _vector(g.get("zeta_mu_lo", 1.0), L, "zeta_mu_lo"),
                             _vector(g.get("chi_phi", 1.0), N, "chi_phi"))
        res = simulate(network, fleet, q_b, q_p, case["d_s"], params, gains, dt=dt, T=T, barrier=barrier,
                       record_every=record_every)
    except EdfrError as exc:
        raise click.ClickException(str(exc)) from exc
    tr = res.trajectory
    nodes = [str(n) for n in network.node_ids]
    header = (["t"] + [f"omega_{n}" for n in nodes] + [f"r_{n}" for n in nodes]
              + [f"mu_hi_{l}" for l in range(L)] + [f"mu_lo_{l}" for l in range(L)] + ["objective"])
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(tr.t)):
            row = np.concatenate([[tr.t[k]], tr.omega[k], tr.r[k], tr.mu_hi[k], tr.mu_lo[k], [tr.objective[k]]])
            w.writerow([f"{v:.10g}" for v in row])
    rep = res.report
    click.echo(f"stop: {rep.stop_reason} at t={rep.t_final:.3f}s; |omega|={rep.omega_inf:.2e}, "
               f"|r - r_FR|={rep.recourse_deviation:.2e}, line violation={rep.line_violation:.2e}")
    ok = rep.omega_inf <= 1e-4 and rep.recourse_deviation <= 1e-3 and rep.line_violation <= 1e-6
    _finish(ok, f"trajectory written to {out}")


@main.command("market-verify")
@click.option("--instance", "case_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bids", "bids_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON with alpha_b, alpha_p, gamma_b, gamma_p; omitted means truthful bids.")
@click.option("--delta", "delta_spec", default="auto", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def market_verify(case_path, bids_path, delta_spec, out):
    """Check whether bids and operator prices form a competitive equilibrium."""
    from .market import Bids, verify_equilibrium

    try:
        case = io.load_case(case_path)
        network, fleet = case["network"], case["fleet"]
        if "tree" not in case:
            raise click.ClickException("case needs a tree")
        tree = case["tree"].rooted()
        N = network.n_nodes
        bids = Bids.truthful(N)
        if bids_path:
            b = json.loads(Path(bids_path).read_text())
            gb, gp = _vector(b.get("gamma_b", 1.0), N, "gamma_b"), _vector(b.get("gamma_p", 1.0), N, "gamma_p")
            bids = Bids(_vector(b.get("alpha_b", gb), N, "alpha_b"), _vector(b.get("alpha_p", gp), N, "alpha_p"), gb, gp)
        system = solve_system(network, fleet, tree)
        delta = _delta(delta_spec, system, network)
        cert = verify_equilibrium(bids, network, fleet, tree, delta.values)
    except EdfrError as exc:
        raise click.ClickException(str(exc)) from exc
    io.write_json({
        "passed": cert.passed,
        "verdicts": {f"{k}:{network.node_ids[n]}": v for (k, n), v in cert.verdicts.items()},
        "witnesses": {f"{k}:{network.node_ids[n]}": list(w) for (k, n), w in cert.witnesses.items()},
        "mapping_residual": cert.mapping_residual,
        "prices": {"pi_b": cert.prices.pi_b, "pi_p": cert.prices.pi_p},
        "schedule": {"q_b": cert.q_b, "q_p": cert.q_p, "r": cert.r},
        "delta": delta.values,
    }, out)
    _finish(cert.passed, f"certificate written to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Sweep TOML; defaults to the packaged paper-scale configuration.")
@click.option("--data", "data_dir", type=click.Path(exists=True, file_okay=False),
              help="Directory with nodes.csv, lines.csv, units.csv; defaults to the packaged RTS-24 data.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--no-plots", is_flag=True, help="Skip the SVG plots.")
def casestudy(config_path, data_dir, out, no_plots):
    """Run the offset-error sweep on RTS-24 and write CSV tables and plots."""
    from importlib import resources

    from .casestudy import SweepConfig, emit_report, load_rts24_dir, run_sweep

    try:
        if config_path is None:
            config_path = str(resources.files("edfr.casestudy") / "data" / "sweep.toml")
        config = SweepConfig.from_toml(config_path)
        data = load_rts24_dir(data_dir)
        result = run_sweep(config, data)
        emit_report(result, out, ("csv",) if no_plots else ("csv", "svg"))
    except EdfrError as exc:
        raise click.ClickException(str(exc)) from exc
    checks = result.checks()
    for name, ok in checks.items():
        click.echo(f"  {name}: {'ok' if ok else 'VIOLATED'}")
    for md, d in sorted(result.delta_star.items()):
        click.echo(f"  mu_d={md:+g}: delta*/K mean {np.mean(d):.2f} $/MWh")
    _finish(all(checks.values()), f"{len(result.rows)} rows in {result.elapsed_s:.1f}s written to {out}")


@main.command()
@click.option("--out", required=True, type=click.Path(file_okay=False))
def example(out):
    """Write a small 3-bus example: network, generators, tree and case files."""
    from .instances import three_bus_dfr_case
    from .scenario import make_tree

    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    network, fleet, q_b, q_p, d1, d_s = three_bus_dfr_case()
    tree = make_tree([
        {"id": 1, "period": 1, "parent": None, "p": 1.0, "demand": d1},
        {"id": 2, "period": 2, "parent": 1, "p": 0.5, "demand": d_s},
        {"id": 3, "period": 2, "parent": 1, "p": 0.5, "demand": d1 - np.array([0.0, 0.0, 3.0])},
    ], K=2)
    io.write_json(io.network_to_dict(network), d / "net.json")
    with open(d / "gen.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, io.GENERATOR_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(io.fleet_to_records(fleet, network))
    io.save_tree(tree, d / "tree.json")
    io.write_json(io.case_to_dict(network, fleet, tree=tree, d1=d1, d_s=d_s, q_b=q_b, q_p=q_p), d / "case.json")
    io.write_json({"zeta_pi": 1.0, "zeta_mu_hi": 1.0, "zeta_mu_lo": 1.0, "chi_phi": 1.0}, d / "gains.json")
    io.write_json({"alpha_b": 1.0, "alpha_p": [1.0, 2.0, 1.0], "gamma_b": 1.0, "gamma_p": 1.0}, d / "bids.json")
    click.echo(f"example files written to {d}")


if __name__ == "__main__":  # pragma: no cover
    main()
