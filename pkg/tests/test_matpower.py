"""Case-file parsing: structure, unit conversion, error paths, fuzz safety."""

import math
import random

import numpy as np
import pytest

from meshflow import cases
from meshflow.matpower import (CaseError, MissingSection, NonNumericEntry,
                               CaseSyntaxError, UnsupportedCostModel,
                               load_case, parse_case, to_network)
from meshflow.network import BusKind, NetworkError

from conftest import TWO_BUS, parse_text


def test_parse_case9_dimensions():
    raw = parse_case(cases.case_text("case9"))
    assert raw.base_mva == 100.0
    assert raw.bus.shape[0] == 9
    assert raw.gen.shape[0] == 3
    assert raw.branch.shape[0] == 9
    assert raw.gencost.shape[0] == 3


def test_parse_minimal_fixture():
    raw = parse_case(TWO_BUS)
    assert raw.base_mva == 100.0
    assert raw.bus.shape == (2, 13)
    assert raw.gen.shape[0] == 1
    assert raw.branch.shape[0] == 1
    assert raw.gencost.shape[0] == 1


def test_comments_and_matrix_order_ignored():
    shuffled = """\
% leading comment
function mpc = t
mpc.gencost = [ 2 0 0 3 0.01 40 0; ];
mpc.baseMVA = 100;  % trailing comment
mpc.branch = [ 1 2 0.02 0.06 0 0 0 0 0 0 1 -360 360; ];
mpc.bus = [
  1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
  2 1 9 3 0 0 1 1 0 230 1 1.1 0.9; % inline
];
mpc.gen = [ 1 0 0 300 -300 1 100 1 250 10; ];
"""
    raw = parse_case(shuffled)
    assert raw.bus.shape[0] == 2
    assert raw.branch[0, 3] == 0.06


def test_scientific_notation_accepted():
    text = TWO_BUS.replace("0.02  0.06", "2e-2  6.0E-2")
    raw = parse_case(text)
    assert raw.branch[0, 2] == 0.02
    assert raw.branch[0, 3] == 0.06


def test_missing_bus_section():
    with pytest.raises(MissingSection):
        parse_case(TWO_BUS.replace("mpc.bus", "mpc.notbus"))


def test_non_numeric_entry():
    text = TWO_BUS.replace("0.02", "bogus")
    with pytest.raises((NonNumericEntry, CaseSyntaxError)):
        parse_case(text)


def test_piecewise_cost_rejected():
    text = TWO_BUS.replace("2  0  0  3  0.01  40  0;",
                           "1  0  0  2  10 100 20 200;")
    raw = parse_case(text)
    with pytest.raises(UnsupportedCostModel):
        to_network(raw)


def test_case9_network_shape(networks):
    net = networks["case9"]
    assert len(net.buses) == 9
    assert len(net.branches) == 9
    assert len(net.generators) == 3
    ref = [b for b in net.buses if b.kind is BusKind.REFERENCE]
    assert [b.id for b in ref] == [1]


def test_bus_shunt_scaled_to_per_unit():
    text = TWO_BUS.replace(
        "2  1  90  30  0  0  1  1.0  0  230  1  1.1  0.9;",
        "2  1  90  30  0  19  1  1.0  0  230  1  1.1  0.9;")
    net = parse_text(text)
    assert net.buses[1].shunt_susceptance == pytest.approx(0.19, rel=0, abs=0)


def test_out_of_service_branch_dropped():
    text = TWO_BUS.replace(
        "mpc.branch = [\n    1  2  0.02  0.06  0.0  250  250  250  0  0  1  -360  360;",
        "mpc.branch = [\n    1  2  0.02  0.06  0.0  250  250  250  0  0  1  -360  360;\n"
        "    1  2  0.05  0.15  0.0  0  0  0  0  0  0  -360  360;")
    net = parse_text(text)
    assert len(net.branches) == 1


def test_cost_rescaling_matches_mw_evaluation():
    # objective invariance: per-unit coefficients on per-unit power must
    # price a dispatch identically to file coefficients on MW power
    raw = parse_case(cases.case_text("case30"))
    net = to_network(raw)
    rng = np.random.default_rng(7)
    cost_rows = raw.gencost
    on = raw.gen[:, 7] > 0
    file_rows = cost_rows[on]
    for _ in range(20):
        p_mw = rng.uniform(10.0, 80.0, len(net.generators))
        per_unit = sum(
            g.cost_quadratic * (p / net.base_mva) ** 2
            + g.cost_linear * (p / net.base_mva) + g.cost_constant
            for g, p in zip(net.generators, p_mw))
        in_mw = sum(row[4] * p ** 2 + row[5] * p + row[6]
                    for row, p in zip(file_rows, p_mw))
        assert per_unit == pytest.approx(in_mw, rel=1e-9)


def test_angle_limits_intersected_with_half_pi():
    net = parse_text(TWO_BUS)  # -360/360 in the file means unlimited
    br = net.branches[0]
    assert br.angle_min == pytest.approx(-math.pi / 2)
    assert br.angle_max == pytest.approx(math.pi / 2)


def test_negative_demand_accepted_with_warning(caplog):
    text = TWO_BUS.replace("2  1  90  30", "2  1  -90  -30")
    with caplog.at_level("WARNING"):
        net = parse_text(text)
    assert net.buses[1].p_demand == pytest.approx(-0.9)
    assert any("negative demand" in rec.message for rec in caplog.records)


def test_fuzzed_mutations_never_crash():
    # every mutation must either parse or raise a structured CaseError
    rng = random.Random(20240)
    base = cases.case_text("case9")
    glyphs = "0123456789.eE-+;[]% \n"
    for _ in range(150):
        chars = list(base)
        for _ in range(rng.randrange(1, 6)):
            i = rng.randrange(len(chars))
            chars[i] = rng.choice(glyphs)
        text = "".join(chars)
        try:
            raw = parse_case(text)
            to_network(raw)
        except (CaseError, NetworkError):
            pass


def test_load_case_path(tmp_path):
    path = tmp_path / "mini.m"
    path.write_text(TWO_BUS)
    net = load_case(path)
    assert len(net.buses) == 2
    assert net.name == "twobus"
