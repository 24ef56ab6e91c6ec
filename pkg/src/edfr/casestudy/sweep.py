"""Sensitivity of the two-timescale decomposition to errors in the price offset.

For each demand drift ``mu_d`` a tall scenario tree is sampled and SYSTEM is
solved once. The optimal offset is then perturbed as ``delta* + K eps`` with
``eps ~ N(mu_eps, sigma_eps^2 I)`` (``eps`` in $/MWh per period), and each
perturbed offset is scored by the expected cost of ED followed by FR in every
outcome, relative to the SYSTEM optimum.
"""

from __future__ import annotations

import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..decomposition import expected_cost, optimal_delta, solve_ed, solve_fr_batch, solve_system
from ..errors import Infeasible, InvalidParameters, ParseError
from ..scenario import sample_random_walk, validate_tree
from .rts24 import RtsData

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepConfig:
    mu_d: tuple = (-0.0002, 0.0, 0.0002)
    sigma_d: float = 0.002
    K: int = 20
    n_samples: int = 50
    mu_eps: tuple = (-10.0, 0.0, 10.0)
    sigma_eps: tuple = (0.0, 5.0)
    seed: int = 2024
    robust: bool = True
    period_duration_s: float = 15.0
    zero_error_pct_tol: float = 1e-4
    dominance_rel_tol: float = 1e-6

    def __post_init__(self):
        for name in ("mu_d", "mu_eps", "sigma_eps"):
            val = tuple(float(v) for v in np.atleast_1d(getattr(self, name)))
            if not val:
                raise InvalidParameters(f"{name} must be a nonempty list")
            object.__setattr__(self, name, val)
        if self.K < 1 or self.n_samples < 1:
            raise InvalidParameters("K and n_samples must be at least 1")
        if self.sigma_d < 0 or any(s < 0 for s in self.sigma_eps):
            raise InvalidParameters("standard deviations must be nonnegative")

    @classmethod
    def from_toml(cls, path) -> "SweepConfig":
        try:
            data = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ParseError(f"cannot read sweep config {path}: {exc}") from exc
        data = data.get("sweep", data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParseError(f"unknown sweep settings: {sorted(unknown)}")
        return cls(**data)

    @property
    def n_combos(self) -> int:
        return len(self.mu_d) * len(self.mu_eps) * len(self.sigma_eps)


@dataclass
class SweepResult:
    config: SweepConfig
    rows: list = field(default_factory=list)
    delta_star: dict = field(default_factory=dict)  # mu_d -> delta*/K per node
    system_cost: dict = field(default_factory=dict)
    demand_paths: dict = field(default_factory=dict)  # mu_d -> (n_samples, K) total demand
    failures: list = field(default_factory=list)
    elapsed_s: float = 0.0

    def summary(self) -> list[dict]:
        out = []
        c = self.config
        for md in c.mu_d:
            for me in c.mu_eps:
                for se in c.sigma_eps:
                    rs = [r for r in self.rows if (r["mu_d"], r["mu_eps"], r["sigma_eps"]) == (md, me, se)]
                    ok = [r["pct_increase"] for r in rs if r["feasible"]]
                    out.append({
                        "mu_d": md, "mu_eps": me, "sigma_eps": se, "n_samples": len(rs),
                        "n_infeasible": len(rs) - len(ok),
                        "mean_pct_increase": float(np.mean(ok)) if ok else float("nan"),
                        "max_pct_increase": float(np.max(ok)) if ok else float("nan"),
                        "delta_star_mean": float(np.mean(self.delta_star[md])) if md in self.delta_star else float("nan"),
                        "seed": c.seed,
                    })
        return out

    def mean_increase(self, mu_d: float, mu_eps: float, sigma_eps: float) -> float:
        for s in self.summary():
            if (s["mu_d"], s["mu_eps"], s["sigma_eps"]) == (mu_d, mu_eps, sigma_eps):
                return s["mean_pct_increase"]
        raise KeyError((mu_d, mu_eps, sigma_eps))

    def checks(self) -> dict[str, bool]:
        """Invariants every sweep must satisfy."""
        c = self.config
        feas = [r for r in self.rows if r["feasible"]]
        dom = all(r["edfr_cost"] >= r["system_cost"] - c.dominance_rel_tol * abs(r["system_cost"]) for r in feas)
        zero = [r for r in self.rows if r["mu_eps"] == 0 and r["sigma_eps"] == 0]
        exact = all(r["feasible"] and r["pct_increase"] <= c.zero_error_pct_tol for r in zero)
        return {
            "dominance": dom,
            "zero-error exactness": exact,
            "row count": len(self.rows) == c.n_combos * c.n_samples,
            "no solver failures": not self.failures,
        }


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


def run_sweep(config: SweepConfig, data: RtsData) -> SweepResult:
    net, fleet = data.network, data.fleet
    result = SweepResult(config)
    t0 = time.perf_counter()
    for i, md in enumerate(config.mu_d):
        tree_seed = int(np.random.SeedSequence([config.seed, 0, i]).generate_state(1)[0])
        tree = sample_random_walk(data.demand, md, config.sigma_d, config.K, config.n_samples, tree_seed,
                                  config.period_duration_s).rooted()
        problems = validate_tree(tree)
        if problems:
            raise InvalidParameters(f"sampled tree invalid: {problems}")
        paths = tree.demands[1:].sum(axis=1).reshape(config.n_samples, config.K - 1) if config.K > 1 \
            else np.zeros((config.n_samples, 0))
        result.demand_paths[md] = np.hstack([np.full((config.n_samples, 1), data.demand.sum()), paths])
        system = solve_system(net, fleet, tree)
        K = system.K
        d_star = optimal_delta(system, net).values
        result.delta_star[md] = d_star / K
        result.system_cost[md] = system.expected_cost
        log.info("mu_d=%g: SYSTEM cost %.2f, delta*/K in [%.2f, %.2f]", md, system.expected_cost,
                 d_star.min() / K, d_star.max() / K)

        cache: dict[bytes, tuple] = {}

        def score(delta):
            key = np.round(delta, 12).tobytes()
            if key not in cache:
                try:
                    ed = solve_ed(net, fleet, tree.root.demand, delta, K, robust=tree if config.robust else None)
                    fr = solve_fr_batch(net, fleet, ed.q_b, ed.q_p, tree.demands)
                    if fr.feasible.all():
                        cache[key] = (expected_cost(fleet, tree, ed.q_b, ed.q_p, fr.r), True, len(ed.robust_outcomes))
                    else:
                        cache[key] = (float("nan"), False, len(ed.robust_outcomes))
                except Infeasible as exc:
                    result.failures.append((md, str(exc)))
                    cache[key] = (float("nan"), False, 0)
            return cache[key]

        for a, me in enumerate(config.mu_eps):
            for b, se in enumerate(config.sigma_eps):
                rng = _rng(config.seed, 1, i, a, b)
                eps = rng.normal(me, se, size=(config.n_samples, net.n_nodes))
                for j in range(config.n_samples):
                    cost, feasible, blocks = score(d_star + K * eps[j])
                    pct = 100.0 * (cost - system.expected_cost) / abs(system.expected_cost) if feasible else float("nan")
                    result.rows.append({
                        "mu_d": md, "mu_eps": me, "sigma_eps": se, "sample": j, "seed": config.seed,
                        "eps_mean": float(eps[j].mean()), "delta_star_mean": float(np.mean(d_star) / K),
                        "system_cost": system.expected_cost, "edfr_cost": cost,
                        "pct_increase": pct, "feasible": feasible, "robust_blocks": blocks,
                    })
    result.elapsed_s = time.perf_counter() - t0
    log.info("sweep: %d rows in %.1f s", len(result.rows), result.elapsed_s)
    return result


def config_dict(config: SweepConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}
