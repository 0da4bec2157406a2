"""Network representation: incidence, transformer folding, ratings, validation."""

import math

import numpy as np
import pytest

from meshflow.network import (BranchPi, Bus, BusKind, Generator, Network,
                              NetworkError, NonpositiveTap, NonzeroPhaseShift,
                              ampacity_sq_from_rating, build_incidence,
                              transformer_to_pi)


def _net(buses, branches, gens=None):
    gens = gens or [Generator(bus_id=buses[0].id, p_min=0, p_max=1,
                              q_min=-1, q_max=1, cost_quadratic=0.0,
                              cost_linear=1.0, cost_constant=0.0)]
    return Network(base_mva=100.0, buses=tuple(buses),
                   generators=tuple(gens), branches=tuple(branches))


def test_incidence_two_bus_signs():
    net = _net([Bus(1, BusKind.REFERENCE), Bus(2, BusKind.PQ)],
               [BranchPi(1, 2, 0.01, 0.1)])
    inc = build_incidence(net)
    a_plus = inc.a_plus.toarray()
    a_minus = inc.a_minus.toarray()
    assert a_plus[0, 0] == 1 and a_plus[1, 0] == -1
    assert a_minus[0, 0] == 0 and a_minus[1, 0] == -1


def test_incidence_columns_sum_to_zero(networks):
    inc = build_incidence(networks["case9"])
    sums = np.asarray(inc.a_plus.sum(axis=0)).ravel()
    assert np.all(sums == 0)


def test_incidence_matches_branch_endpoints(networks):
    net = networks["case14"]
    inc = build_incidence(net)
    pos = net.bus_position()
    a_plus = inc.a_plus.toarray()
    a_minus = inc.a_minus.toarray()
    for j, br in enumerate(net.branches):
        f, t = pos[br.from_bus], pos[br.to_bus]
        assert a_plus[f, j] == 1 and a_plus[t, j] == -1
        assert a_minus[t, j] == -1 and a_minus[f, j] == 0
        # no other entries in the column
        assert np.count_nonzero(a_plus[:, j]) == 2
        assert np.count_nonzero(a_minus[:, j]) == 1


def test_unit_tap_is_identity():
    pi = transformer_to_pi(0.01, 0.1, total_charging_b=0.1, tap_ratio=1.0)
    assert pi.resistance == 0.01 and pi.reactance == 0.1
    assert pi.shunt_conductance_from == 0.0 and pi.shunt_conductance_to == 0.0
    assert pi.shunt_susceptance_from == pytest.approx(0.05, abs=0.0)
    assert pi.shunt_susceptance_to == pytest.approx(0.05, abs=0.0)


def _two_port_of_pi(pi):
    y = 1.0 / complex(pi.resistance, pi.reactance)
    yf = complex(pi.shunt_conductance_from, pi.shunt_susceptance_from)
    yt = complex(pi.shunt_conductance_to, pi.shunt_susceptance_to)
    return np.array([[y + yf, -y], [-y, y + yt]])


def _two_port_of_transformer(r, x, b, a):
    # ideal transformer a:1 on the from side, then series z and symmetric
    # charging: the textbook tapped-branch admittance matrix
    y = 1.0 / complex(r, x)
    return np.array([
        [(y + 1j * b / 2.0) / (a * a), -y / a],
        [-y / a, y + 1j * b / 2.0],
    ])


def test_ieee14_tap_branch_two_port():
    # branch 4-7 of the IEEE14 data: pure reactance behind a 0.978 tap
    pi = transformer_to_pi(0.0, 0.20912, total_charging_b=0.0, tap_ratio=0.978)
    got = _two_port_of_pi(pi)
    want = _two_port_of_transformer(0.0, 0.20912, 0.0, 0.978)
    assert np.max(np.abs(got - want)) < 1e-12


def test_pi_round_trip_random_taps():
    rng = np.random.default_rng(1234)
    for _ in range(50):
        r = rng.uniform(0.001, 0.05)
        x = rng.uniform(0.01, 0.3)
        b = rng.uniform(0.0, 0.2)
        a = rng.uniform(0.9, 1.1)
        pi = transformer_to_pi(r, x, b, tap_ratio=a)
        got = _two_port_of_pi(pi)
        want = _two_port_of_transformer(r, x, b, a)
        assert np.max(np.abs(got - want)) <= 1e-12 * np.max(np.abs(want))


def test_phase_shifter_rejected():
    with pytest.raises(NonzeroPhaseShift):
        transformer_to_pi(0.01, 0.1, 0.0, tap_ratio=1.0, phase_shift=0.1)


def test_nonpositive_tap_rejected():
    with pytest.raises(NonpositiveTap):
        transformer_to_pi(0.01, 0.1, 0.0, tap_ratio=0.0)
    with pytest.raises(NonpositiveTap):
        transformer_to_pi(0.01, 0.1, 0.0, tap_ratio=-1.2)


@pytest.mark.parametrize("rate,base,want", [
    (250.0, 100.0, 6.25),   # (250/100)^2 by hand
    (100.0, 100.0, 1.0),
    (0.0, 100.0, None),     # zero means unlimited
])
def test_ampacity_from_rating(rate, base, want):
    got = ampacity_sq_from_rating(rate, base)
    if want is None:
        assert got is None
    else:
        assert got == want


def test_duplicate_bus_ids_rejected():
    with pytest.raises(NetworkError):
        _net([Bus(1, BusKind.REFERENCE), Bus(1, BusKind.PQ)],
             [BranchPi(1, 1, 0.01, 0.1)])


def test_dangling_branch_rejected():
    with pytest.raises(NetworkError):
        _net([Bus(1, BusKind.REFERENCE), Bus(2, BusKind.PQ)],
             [BranchPi(1, 7, 0.01, 0.1)])


def test_disconnected_network_rejected():
    buses = [Bus(1, BusKind.REFERENCE), Bus(2, BusKind.PQ),
             Bus(3, BusKind.PQ), Bus(4, BusKind.PQ)]
    with pytest.raises(NetworkError):
        _net(buses, [BranchPi(1, 2, 0.01, 0.1), BranchPi(3, 4, 0.01, 0.1)])


def test_exactly_one_reference_bus():
    with pytest.raises(NetworkError):
        _net([Bus(1, BusKind.REFERENCE), Bus(2, BusKind.REFERENCE)],
             [BranchPi(1, 2, 0.01, 0.1)])
    with pytest.raises(NetworkError):
        _net([Bus(1, BusKind.PQ), Bus(2, BusKind.PQ)],
             [BranchPi(1, 2, 0.01, 0.1)])


def test_voltage_band_ordering_enforced():
    with pytest.raises(NetworkError):
        _net([Bus(1, BusKind.REFERENCE, v_min=1.1, v_max=0.9),
              Bus(2, BusKind.PQ)],
             [BranchPi(1, 2, 0.01, 0.1)])


def test_zero_impedance_branch_rejected():
    with pytest.raises(NetworkError):
        _net([Bus(1, BusKind.REFERENCE), Bus(2, BusKind.PQ)],
             [BranchPi(1, 2, 0.0, 0.0)])


def test_network_is_immutable(two_bus):
    with pytest.raises(Exception):
        two_bus.base_mva = 50.0
    with pytest.raises(Exception):
        two_bus.buses[0].p_demand = 1.0


def test_round_trip_through_dict(networks):
    net = networks["case30"]
    clone = Network.from_dict(net.to_dict())
    assert clone == net
