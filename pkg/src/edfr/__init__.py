"""Two-timescale economic dispatch and frequency regulation."""

from __future__ import annotations

import logging

from .decomposition import (
    DecompositionReport,
    DeltaVector,
    EDSolution,
    FRSolution,
    Instance,
    SystemSolution,
    optimal_delta,
    run_decomposition,
    solve_ed,
    solve_fr,
    solve_fr_batch,
    solve_system,
    verify_decomposition,
)
from .grid import (
    FeasibilityReport,
    GeneratorFleet,
    GeneratorSet,
    Network,
    QuadraticCost,
    build_network,
    check_feasible,
    line_flows,
)
from .dfr import DfrGains, DfrState, DynamicParams, equilibrium_from_fr, simulate
from .market import Bids, SupplyBid, best_response_check, bid_cost, construct_equilibrium, verify_equilibrium
from .qp import nodal_prices
from .scenario import ScenarioTree, sample_random_walk, validate_tree

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"
