"""IEEE RTS-24 test system: network, bus loads and unit groups.

Unit groups follow the reference table of production ranges and marginal-cost
ranges. Ranges are quoted for each group as a whole, so a single unit covers
``range / units_in_group``. Each unit's marginal cost runs linearly from the
low to the high end of its group's cost range across its own production range.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import ParseError, UnknownUnitGroup
from ..grid import MIN_CURVATURE, GeneratorFleet, GeneratorSet, Network, QuadraticCost, aggregate_units
from ..io import _num, _read_csv, load_network


@dataclass(frozen=True)
class UnitGroup:
    name: str
    unit_type: str
    q_range: tuple[float, float]
    mc_range: tuple[float, float]
    role: str  # dispatch | regulation


UNIT_GROUPS = {
    g.name: g
    for g in (
        UnitGroup("U12", "Oil/Steam", (10, 60), (58.14, 64.446), "dispatch"),
        UnitGroup("U20", "Oil/CT", (64, 80), (130.0, 130.0), "regulation"),
        UnitGroup("U50", "Hydro", (60, 300), (0.001, 0.001), "regulation"),
        UnitGroup("U76", "Coal/Steam", (60, 304), (16.511, 18.231), "dispatch"),
        UnitGroup("U100", "Oil/Steam", (75, 300), (46.295, 54.196), "dispatch"),
        UnitGroup("U155", "Coal/Steam", (216, 620), (13.294, 14.974), "dispatch"),
        UnitGroup("U197", "Oil/Steam", (207, 591), (49.57, 51.405), "dispatch"),
        UnitGroup("U350", "Coal/Steam", (140, 350), (13.22, 15.276), "dispatch"),
        UnitGroup("U400", "Nuclear", (200, 800), (4.466, 4.594), "dispatch"),
    )
}


def unit_cost(lower: float, upper: float, mc_lo: float, mc_hi: float) -> tuple[float, float, float]:
    """``(a, b, c)`` with ``c'(lower) = mc_lo`` and ``c'(upper) = mc_hi``; flat curves get ``c = 1e-6``."""
    slope = (mc_hi - mc_lo) / (upper - lower) if upper > lower else 0.0
    c = max(slope, MIN_CURVATURE)
    return 0.0, mc_lo - c * lower, c


def group(name: str) -> UnitGroup:
    try:
        return UNIT_GROUPS[name]
    except KeyError:
        raise UnknownUnitGroup(name) from None


@dataclass(frozen=True)
class RtsData:
    network: Network
    fleet: GeneratorFleet
    demand: np.ndarray
    units: tuple  # (node id, group, count)


def _fleet(network: Network, units) -> GeneratorFleet:
    totals: dict[str, int] = {}
    for _, name, count in units:
        group(name)
        totals[name] = totals.get(name, 0) + count
    n = network.n_nodes
    per_node: dict[tuple[int, str], list] = {}
    for node, name, count in units:
        g = group(name)
        lo, hi = (v / totals[name] for v in g.q_range)
        a, b, c = unit_cost(lo, hi, *g.mc_range)
        try:
            k = network.index(node)
        except KeyError:
            raise ParseError(f"unit at unknown bus {node!r}") from None
        per_node.setdefault((k, g.role), []).extend([(lo, hi, a, b, c)] * count)
    sets = {}
    for role in ("dispatch", "regulation"):
        lo, hi = np.zeros(n), np.zeros(n)
        a, b, c = np.zeros(n), np.zeros(n), np.ones(n)
        present = np.zeros(n, dtype=bool)
        for (k, r), rows in per_node.items():
            if r == role:
                lo[k], hi[k], a[k], b[k], c[k] = aggregate_units(*np.array(rows).T)
                present[k] = True
        sets[role] = GeneratorSet(lo, hi, QuadraticCost(a, b, c), present)
    return GeneratorFleet(sets["dispatch"], sets["regulation"])


def read_units(path) -> list[tuple]:
    rows = _read_csv(path)
    out = []
    for r in rows:
        try:
            out.append((int(r["node"]), r["group"].strip(), int(_num(r.get("count", 1), "count"))))
        except KeyError as exc:
            raise ParseError(f"units file lacks column {exc}") from exc
        except ValueError as exc:
            raise ParseError(str(exc)) from exc
    return out


def load_rts24(generators_path, network_path) -> tuple[Network, GeneratorFleet]:
    """Network from ``network_path`` (a lines CSV beside ``nodes.csv``) and the unit fleet.

    ``generators_path`` lists ``node, group, count`` rows naming unit groups.
    """
    network_path = Path(network_path)
    network = load_network(network_path.with_name("nodes.csv"), network_path)
    return network, _fleet(network, read_units(generators_path))


def default_data_dir() -> Path:
    return Path(str(resources.files("edfr.casestudy") / "data" / "rts24"))


def load_rts24_dir(data_dir=None) -> RtsData:
    """Everything in a data directory holding ``nodes.csv``, ``lines.csv`` and ``units.csv``."""
    d = Path(data_dir) if data_dir is not None else default_data_dir()
    for name in ("nodes.csv", "lines.csv", "units.csv"):
        if not (d / name).exists():
            raise ParseError(f"{d} has no {name}")
    network, fleet = load_rts24(d / "units.csv", d / "lines.csv")
    demand = np.zeros(network.n_nodes)
    for r in _read_csv(d / "nodes.csv"):
        demand[network.index(int(r["id"]))] = _num(r["demand_mw"], "demand_mw")
    return RtsData(network, fleet, demand, tuple(read_units(d / "units.csv")))
