"""Shared fixtures: bundled networks, tiny synthetic cases, a solve cache.

The acceptance tests sweep every (case, family, format) combination; several
other modules want the same solves.  The session-scoped cache below makes each
combination cost one interior-point run for the whole session.
"""

import numpy as np
import pytest

from meshflow import cases, ipm, matpower, model
from meshflow.cli import format_index_to_spec

DESK_CASES = ("case9", "case14", "case30", "case57")

TWO_BUS = """\
function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1  3   0   0  0  0  1  1.0  0  230  1  1.1  0.9;
    2  1  90  30  0  0  1  1.0  0  230  1  1.1  0.9;
];
mpc.gen = [
    1  0  0  300  -300  1.0  100  1  250  10;
];
mpc.branch = [
    1  2  0.02  0.06  0.0  250  250  250  0  0  1  -360  360;
];
mpc.gencost = [
    2  0  0  3  0.01  40  0;
];
"""

THREE_BUS_CHAIN = """\
function mpc = chain3
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1  3   0   0  0  0  1  1.0  0  230  1  1.1  0.9;
    2  1  50  10  0  0  1  1.0  0  230  1  1.1  0.9;
    3  1  40  10  0  0  1  1.0  0  230  1  1.1  0.9;
];
mpc.gen = [
    1  0  0  300  -300  1.0  100  1  250  10;
];
mpc.branch = [
    1  2  0.02  0.06  0.0  0  0  0  0  0  1  -360  360;
    2  3  0.01  0.04  0.0  0  0  0  0  0  1  -360  360;
];
mpc.gencost = [
    2  0  0  3  0.02  30  100;
];
"""

# every branch has nonzero R and X, so no format drops or substitutes a row;
# branch charging plus a bus shunt exercise the shunt foldings
THREE_BUS_LOOP = """\
function mpc = loop3
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1  3   0   0  0  0  1  1.0  0  230  1  1.1  0.9;
    2  2  20   5  0  0  1  1.0  0  230  1  1.1  0.9;
    3  1  80  20  2  5  1  1.0  0  230  1  1.1  0.9;
];
mpc.gen = [
    1  0  0  300  -300  1.0  100  1  250  10;
    2  0  0  300  -300  1.0  100  1  150   8;
];
mpc.branch = [
    1  2  0.010  0.050  0.02  200  0  0  0  0  1  -360  360;
    2  3  0.020  0.070  0.04  120  0  0  0  0  1  -360  360;
    1  3  0.015  0.060  0.00  200  0  0  0  0  1  -360  360;
];
mpc.gencost = [
    2  0  0  3  0.02   30  100;
    2  0  0  3  0.015  25   80;
];
"""


def parse_text(text):
    raw = matpower.parse_case(text)
    return matpower.to_network(raw)


@pytest.fixture(scope="session")
def networks():
    return {name: matpower.load_case(cases.case_path(name))
            for name in DESK_CASES}


@pytest.fixture(scope="session")
def two_bus():
    return parse_text(TWO_BUS)


@pytest.fixture(scope="session")
def three_bus_chain():
    return parse_text(THREE_BUS_CHAIN)


@pytest.fixture(scope="session")
def three_bus_loop():
    return parse_text(THREE_BUS_LOOP)


class SolveCache:
    """One interior-point run per (case, family, format, penalty) per session."""

    def __init__(self, nets):
        self.networks = nets
        self._store = {}

    def run(self, case, family, index, xi=0.0):
        key = (case, family, index, xi)
        if key not in self._store:
            eq_format, channel = format_index_to_spec(index, family, True)
            spec = model.ModelSpec(family=family, equation_format=eq_format,
                                   ampacity_channel=channel, penalty_xi=xi)
            system = model.build_opf(self.networks[case], spec)
            result = ipm.solve(system)
            self._store[key] = (system, result)
        return self._store[key]

    def solution(self, case, family, index, xi=0.0):
        system, result = self.run(case, family, index, xi)
        return system.solution(result.primal)


@pytest.fixture(scope="session")
def solved(networks):
    return SolveCache(networks)


def interior_point(system, rng, spread=0.05):
    """A random strictly interior point around the flat start."""
    lo, hi = system.layout.lower, system.layout.upper
    x = ipm.flat_start(system)
    span = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
    x = x + spread * span * rng.uniform(-1.0, 1.0, x.size)
    lo_guard = np.where(np.isfinite(lo), lo + 1e-3 * np.maximum(span, 1e-3), x)
    hi_guard = np.where(np.isfinite(hi), hi - 1e-3 * np.maximum(span, 1e-3), x)
    fixed = lo == hi
    x = np.clip(x, np.minimum(lo_guard, hi_guard), np.maximum(lo_guard, hi_guard))
    x[fixed] = lo[fixed]
    return x
