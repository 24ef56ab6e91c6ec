from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from edfr.errors import DegenerateDualsWarning

settings.register_profile(
    "edfr",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("edfr")


@pytest.fixture(autouse=True)
def _quiet_degenerate():
    # degenerate multipliers are legitimate on random instances; dedicated tests check the warning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDualsWarning)
        yield


def grid_argmin(f, lo, hi, step=1e-3):
    """Brute-force minimizer of ``f`` over a uniform grid; ``f`` returns inf when infeasible."""
    xs = np.arange(lo, hi + step / 2, step)
    vals = f(xs)
    k = int(np.argmin(vals))
    return float(xs[k]), float(vals[k])
