"""Scenario trees of nodal demand and the multiplicative random-walk sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidParameters

log = logging.getLogger(__name__)

MASS_TOL = 1e-9


@dataclass(frozen=True)
class Outcome:
    id: int
    period: int
    parent: int | None
    p: float
    demand: np.ndarray


@dataclass(frozen=True)
class ScenarioTree:
    """Demand outcomes indexed by period, with probabilities conditioned on the period.

    The root (period 1, probability 1) comes first; probabilities of all
    outcomes in one period sum to one, so the total mass equals ``K``.
    """

    outcomes: tuple
    K: int
    period_duration_s: float = 15.0
    seed: int | None = None

    @property
    def n_outcomes(self) -> int:
        return len(self.outcomes)

    @property
    def n_nodes(self) -> int:
        return len(self.outcomes[0].demand)

    @property
    def root(self) -> Outcome:
        for o in self.outcomes:
            if o.period == 1:
                return o
        raise InvalidParameters("tree has no period-1 outcome")

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([o.p for o in self.outcomes])

    @property
    def demands(self) -> np.ndarray:
        """Demand matrix with one row per outcome."""
        return np.vstack([o.demand for o in self.outcomes])

    @property
    def ids(self) -> list[int]:
        return [o.id for o in self.outcomes]

    def rooted(self) -> "ScenarioTree":
        """The same tree reordered so the root is the first outcome."""
        root = self.root
        rest = tuple(o for o in self.outcomes if o is not root)
        return ScenarioTree((root,) + rest, self.K, self.period_duration_s, self.seed)


def make_tree(records: Sequence[dict], K: int, period_duration_s: float = 15.0, seed: int | None = None) -> ScenarioTree:
    outs = tuple(
        Outcome(
            id=int(r["id"]),
            period=int(r["period"]),
            parent=None if r.get("parent") is None else int(r["parent"]),
            p=float(r["p"]),
            demand=np.asarray(r["demand"], dtype=float),
        )
        for r in records
    )
    if not outs:
        raise InvalidParameters("tree has no outcomes")
    return ScenarioTree(outs, int(K), float(period_duration_s), seed)


def single_outcome_tree(demand, K: int = 1) -> ScenarioTree:
    """A one-outcome tree; with ``K > 1`` the later periods are left empty and the tree is invalid."""
    return make_tree([{"id": 1, "period": 1, "parent": None, "p": 1.0, "demand": demand}], K)


def validate_tree(tree: ScenarioTree) -> list[str]:
    """Return a description of every violated tree invariant (empty when valid)."""
    issues: list[str] = []
    outs = tree.outcomes
    if not outs:
        return ["tree has no outcomes"]
    if tree.K < 1:
        issues.append(f"K = {tree.K} is below 1")
    ids = [o.id for o in outs]
    if len(set(ids)) != len(ids):
        issues.append("duplicate outcome ids")
    by_id = {o.id: o for o in outs}
    widths = {len(o.demand) for o in outs}
    if len(widths) > 1:
        issues.append(f"demand vectors have differing lengths {sorted(widths)}")

    roots = [o for o in outs if o.period == 1]
    if len(roots) != 1:
        issues.append(f"expected exactly one period-1 outcome, found {len(roots)}")
    for r in roots:
        if abs(r.p - 1.0) > MASS_TOL:
            issues.append(f"root outcome {r.id} has p = {r.p}, expected 1")
        if r.parent is not None:
            issues.append(f"root outcome {r.id} has a parent")

    mass: dict[int, float] = {}
    for o in outs:
        if not 0 < o.p <= 1:
            issues.append(f"outcome {o.id} has p = {o.p} outside (0, 1]")
        if not 1 <= o.period <= tree.K:
            issues.append(f"outcome {o.id} has period {o.period} outside 1..{tree.K}")
        if not np.all(np.isfinite(o.demand)):
            issues.append(f"outcome {o.id} has non-finite demand")
        mass[o.period] = mass.get(o.period, 0.0) + o.p
        if o.period > 1:
            par = by_id.get(o.parent)
            if par is None:
                issues.append(f"outcome {o.id} has unknown parent {o.parent}")
            elif par.period != o.period - 1:
                issues.append(f"outcome {o.id} in period {o.period} has parent in period {par.period}")
    for k in range(1, tree.K + 1):
        m = mass.get(k, 0.0)
        if abs(m - 1.0) > MASS_TOL:
            issues.append(f"period-{k} mass {m:.12g} != 1")
    return issues


def sample_random_walk(d1, mu_d: float, sigma: float, K: int, n_samples: int, seed: int,
                       period_duration_s: float = 15.0) -> ScenarioTree:
    """Tall tree of ``n_samples`` demand paths ``d_k = diag(1 + sum_{k'<k} w_k') d_1``.

    Increments ``w`` are i.i.d. normal with mean ``mu_d`` and standard
    deviation ``sigma`` per node, drawn from a PCG64 stream seeded by ``seed``.
    Outcome ids are 1 for the root, then path by path.
    """
    d1 = np.asarray(d1, dtype=float)
    if sigma < 0 or not np.isfinite(sigma):
        raise InvalidParameters(f"sigma must be nonnegative, got {sigma}")
    if K < 1 or n_samples < 1:
        raise InvalidParameters("K and n_samples must be at least 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    w = rng.normal(mu_d, sigma, size=(n_samples, max(K - 1, 0), len(d1)))
    growth = 1.0 + np.cumsum(w, axis=1)

    records = [{"id": 1, "period": 1, "parent": None, "p": 1.0, "demand": d1.copy()}]
    nid = 2
    for i in range(n_samples):
        parent = 1
        for k in range(2, K + 1):
            records.append({"id": nid, "period": k, "parent": parent, "p": 1.0 / n_samples,
                            "demand": growth[i, k - 2] * d1})
            parent = nid
            nid += 1
    log.debug("sampled tall tree: %d outcomes, seed %s", len(records), seed)
    return make_tree(records, K, period_duration_s, seed)


def constant_tree(d1, K: int, n_samples: int = 1) -> ScenarioTree:
    return sample_random_walk(d1, 0.0, 0.0, K, n_samples, seed=0)


def sample_paths(tree: ScenarioTree) -> list[list[int]]:
    """Outcome indices (root excluded) along each root-to-leaf path."""
    idx = {o.id: k for k, o in enumerate(tree.outcomes)}
    children: dict[int, list[int]] = {}
    for o in tree.outcomes:
        if o.parent is not None:
            children.setdefault(o.parent, []).append(o.id)
    paths = []

    def walk(oid, acc):
        kids = children.get(oid, [])
        if not kids:
            paths.append(acc)
        for c in kids:
            walk(c, acc + [idx[c]])

    walk(tree.root.id, [])
    return [p for p in paths if p]
