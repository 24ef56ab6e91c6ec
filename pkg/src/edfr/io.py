"""Reading and writing networks, generator tables, scenario trees and case files."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import ParseError
from .grid import GeneratorFleet, GeneratorSet, Network, QuadraticCost, aggregate_units, build_network
from .scenario import ScenarioTree, make_tree

GENERATOR_COLUMNS = ("node", "kind", "qmin_mw", "qmax_mw", "cost_a", "cost_b", "cost_c")
KINDS = ("dispatch", "regulation")


def _read_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc


def _num(value, what: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad number for {what}: {value!r}") from exc


def _node_id(value):
    try:
        return int(value)
    except (TypeError, ValueError):
        return str(value)


def _capacity(value) -> float:
    if value is None or value == "" or str(value).lower() in ("inf", "none", "null"):
        return math.inf
    return _num(value, "capacity_mw")


def network_from_dict(data: dict) -> Network:
    try:
        nodes = [_node_id(n) for n in data["nodes"]]
        lines = [(_node_id(l["tail"]), _node_id(l["head"]), _num(l["susceptance"], "susceptance"),
                  _capacity(l.get("capacity_mw", l.get("capacity"))))
                 for l in data.get("lines", [])]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed network record: {exc}") from exc
    return build_network(nodes, lines)


def network_to_dict(network: Network) -> dict:
    return {
        "nodes": list(network.node_ids),
        "lines": [{"tail": t, "head": h, "susceptance": b, "capacity_mw": None if math.isinf(f) else f}
                  for t, h, b, f in network.lines()],
    }


def load_network(path, lines_path=None) -> Network:
    """A network from JSON, or from a nodes CSV plus a lines CSV."""
    path = Path(path)
    if lines_path is None:
        try:
            return network_from_dict(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read network {path}: {exc}") from exc
    nodes = [r["id"] for r in _read_csv(path)]
    return network_from_dict({"nodes": nodes, "lines": _read_csv(lines_path)})


def fleet_from_records(records, network: Network) -> GeneratorFleet:
    """Group generator records by (node, kind); several units of one kind at a node are aggregated."""
    groups: dict[tuple[int, str], list] = defaultdict(list)
    for rec in records:
        missing = [c for c in GENERATOR_COLUMNS if c not in rec]
        if missing:
            raise ParseError(f"generator record lacks {missing}")
        kind = str(rec["kind"]).strip().lower()
        if kind not in KINDS:
            raise ParseError(f"unknown generator kind {rec['kind']!r}")
        try:
            k = network.index(_node_id(rec["node"]))
        except KeyError as exc:
            raise ParseError(f"generator at unknown node {rec['node']!r}") from exc
        groups[(k, kind)].append([_num(rec[c], c) for c in GENERATOR_COLUMNS[2:]])

    n = network.n_nodes
    sets = {}
    for kind in KINDS:
        lo, hi = np.zeros(n), np.zeros(n)
        a, b, c = np.zeros(n), np.zeros(n), np.ones(n)
        present = np.zeros(n, dtype=bool)
        for (k, kd), units in groups.items():
            if kd != kind:
                continue
            u = np.array(units)
            lo[k], hi[k], a[k], b[k], c[k] = aggregate_units(*u.T)
            present[k] = True
        sets[kind] = GeneratorSet(lo, hi, QuadraticCost(a, b, c), present)
    return GeneratorFleet(sets["dispatch"], sets["regulation"])


def load_generators(path, network: Network) -> GeneratorFleet:
    return fleet_from_records(_read_csv(path), network)


def fleet_to_records(fleet: GeneratorFleet, network: Network) -> list[dict]:
    out = []
    for kind, gens in zip(KINDS, (fleet.dispatch, fleet.regulation)):
        for k in np.flatnonzero(gens.present):
            out.append({"node": network.node_ids[k], "kind": kind,
                        "qmin_mw": float(gens.lower[k]), "qmax_mw": float(gens.upper[k]),
                        "cost_a": float(gens.cost.a[k]), "cost_b": float(gens.cost.b[k]),
                        "cost_c": float(gens.cost.c[k])})
    return out


def tree_from_dict(data: dict) -> ScenarioTree:
    try:
        return make_tree(data["outcomes"], data["K"], data.get("period_duration_s", 15.0), data.get("seed"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed tree: {exc}") from exc


def tree_to_dict(tree: ScenarioTree) -> dict:
    return {
        "K": tree.K,
        "period_duration_s": tree.period_duration_s,
        "seed": tree.seed,
        "outcomes": [{"id": o.id, "period": o.period, "parent": o.parent, "p": o.p,
                      "demand": o.demand.tolist()} for o in tree.outcomes],
    }


def load_tree(path) -> ScenarioTree:
    try:
        return tree_from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read tree {path}: {exc}") from exc


def save_tree(tree: ScenarioTree, path) -> None:
    write_json(tree_to_dict(tree), path)


def load_case(path) -> dict:
    """A self-contained case: ``network``, ``generators`` and then ``tree`` and/or ``d1``/``d_s``.

    Returns a dict with ``network`` and ``fleet`` parsed, plus whichever of
    ``tree``, ``d1``, ``d_s``, ``q_b``, ``q_p`` the file provides.
    """
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read case {path}: {exc}") from exc
    if "network" not in data or "generators" not in data:
        raise ParseError("case needs 'network' and 'generators'")
    network = network_from_dict(data["network"])
    case = {"network": network, "fleet": fleet_from_records(data["generators"], network), "raw": data}
    if "tree" in data:
        case["tree"] = tree_from_dict(data["tree"])
    for key in ("d1", "d_s", "q_b", "q_p"):
        if key in data:
            arr = np.asarray(data[key], dtype=float)
            if arr.shape != (network.n_nodes,):
                raise ParseError(f"{key} must list one value per node")
            case[key] = arr
    return case


def case_to_dict(network: Network, fleet: GeneratorFleet, **extra) -> dict:
    out = {"network": network_to_dict(network), "generators": fleet_to_records(fleet, network)}
    for key, val in extra.items():
        if isinstance(val, ScenarioTree):
            out[key] = tree_to_dict(val)
        elif val is not None:
            out[key] = np.asarray(val).tolist()
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(data, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
