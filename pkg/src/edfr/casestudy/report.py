"""CSV tables and static SVG plots for a finished sweep."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np

from ..io import write_json
from .sweep import SweepResult, config_dict

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("mu_d", "mu_eps", "sigma_eps", "sample", "seed", "eps_mean", "delta_star_mean",
                 "system_cost", "edfr_cost", "pct_increase", "feasible", "robust_blocks")
SUMMARY_COLUMNS = ("mu_d", "mu_eps", "sigma_eps", "n_samples", "n_infeasible", "mean_pct_increase",
                   "max_pct_increase", "delta_star_mean", "seed")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.10g}"
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _label(mu_d: float) -> str:
    return "increasing" if mu_d > 0 else "decreasing" if mu_d < 0 else "constant"


def _plots(result: SweepResult, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    mus = sorted(result.config.mu_d, reverse=True)
    with plt.rc_context({"svg.hashsalt": "edfr", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(1, len(mus), figsize=(4 * len(mus), 3.2), squeeze=False)
        for ax, md in zip(axes[0], mus):
            paths = result.demand_paths[md]
            t = np.arange(1, paths.shape[1] + 1)
            for row in paths:
                ax.plot(t, row, lw=0.6, color="tab:blue", alpha=0.6)
            ax.set_title(f"{_label(md).capitalize()} demand")
            ax.set_xlabel("period")
            ax.set_ylabel("total demand (MW)")
        fig.tight_layout()
        path = out / "demand_paths.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)

        summary = result.summary()
        fig, axes = plt.subplots(1, len(mus), figsize=(4 * len(mus), 3.2), squeeze=False)
        for ax, md in zip(axes[0], mus):
            for me in sorted(result.config.mu_eps):
                pts = sorted((s["sigma_eps"], s["mean_pct_increase"]) for s in summary
                             if s["mu_d"] == md and s["mu_eps"] == me)
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=f"mu_eps = {me:g}")
            ax.set_title(f"{_label(md).capitalize()} demand")
            ax.set_xlabel("sigma_eps ($/MWh)")
            ax.set_ylabel("increase in total cost (%)")
            ax.legend(fontsize="small")
        fig.tight_layout()
        path = out / "cost_increase.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def emit_report(result: SweepResult, out_dir, formats=("csv", "svg")) -> list[Path]:
    """Write ``sweep.csv``, ``summary.csv``, ``delta_star.csv``, ``run.json`` and the plots.

    Rows are sorted by their parameter keys, so identical results give
    byte-identical files.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    written = []
    if "csv" in formats:
        rows = sorted(result.rows, key=lambda r: (r["mu_d"], r["mu_eps"], r["sigma_eps"], r["sample"]))
        _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
        _write_csv(out / "summary.csv", SUMMARY_COLUMNS, result.summary())
        n = max((len(v) for v in result.delta_star.values()), default=0)
        cols = ("mu_d",) + tuple(f"node_{k}" for k in range(n))
        _write_csv(out / "delta_star.csv", cols,
                   [dict(mu_d=md, **{f"node_{k}": v for k, v in enumerate(d)})
                    for md, d in sorted(result.delta_star.items())])
        write_json({"config": config_dict(result.config), "checks": result.checks(),
                    "system_cost": {_fmt(k): v for k, v in sorted(result.system_cost.items())},
                    "failures": result.failures}, out / "run.json")
        written += [out / "sweep.csv", out / "summary.csv", out / "delta_star.csv", out / "run.json"]
    if "svg" in formats:
        written += _plots(result, out)
    log.info("report: wrote %d files to %s", len(written), out)
    return written
