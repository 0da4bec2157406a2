"""Interior-point solver: derivative fidelity, convergence certificates,
determinism, and failure-mode classification."""

import dataclasses

import numpy as np
import pytest

from conftest import interior_point
from meshflow import ipm, model
from meshflow.ipm import (EmptyInterior, SolveStatus, SolverOptions,
                          derivative_check, flat_start, push_interior, solve)
from meshflow.model import (AmpacityChannel, Family, ModelError, ModelSpec,
                            build_opf)
from meshflow.network import BranchPi, Bus, BusKind, Generator, Network

# nonlinear coverage: every row class and both voltage conventions of the
# ampacity row appear in at least one of these systems
COVERAGE = (
    (Family.EXACT, 1, AmpacityChannel.ACTIVE_LOSS,
     {"sq_drop", "sin_drop", "loss_p", "loss_q", "balance_p", "balance_q",
      "ampacity_p", "angle_window"}),
    (Family.EXACT, 4, AmpacityChannel.REACTIVE_LOSS,
     {"cos_drop", "sin_drop", "loss_p", "loss_q", "ampacity_q"}),
    (Family.EXACT, 2, AmpacityChannel.NONE, {"loss_ratio"}),
    (Family.APPROXIMATE, 1, AmpacityChannel.ACTIVE_LOSS,
     {"v_drop_loss", "theta_link", "angle_link", "cone_loss_p", "cone_loss_q",
      "feas_cone", "ampacity_p"}),
    (Family.APPROXIMATE, 4, AmpacityChannel.REACTIVE_LOSS,
     {"v_drop_mean", "cone_loss_q", "ampacity_q"}),
)


@pytest.mark.parametrize("family,fmt,channel,labels", COVERAGE,
                         ids=lambda v: getattr(v, "name", str(v))[:12])
def test_derivatives_match_finite_differences(three_bus_loop, family, fmt,
                                              channel, labels):
    sys_ = build_opf(three_bus_loop, ModelSpec(family, fmt, channel))
    assert labels <= set(sys_.row_labels())
    rng = np.random.default_rng(42)
    for _ in range(3):
        x = interior_point(sys_, rng)
        rep = derivative_check(sys_, x)
        assert rep.worst() <= 1e-6, (family, fmt, rep.jacobian, rep.hessian)
        assert labels <= set(rep.jacobian)


def test_linear_rows_differentiate_exactly(three_bus_loop):
    sys_ = build_opf(three_bus_loop,
                     ModelSpec(Family.APPROXIMATE, 2, AmpacityChannel.NONE))
    rng = np.random.default_rng(3)
    rep = derivative_check(sys_, interior_point(sys_, rng))
    for label in ("v_drop_loss", "theta_link", "angle_link", "loss_ratio",
                  "balance_p", "balance_q"):
        assert rep.jacobian[label] <= 1e-10
        assert rep.hessian[label] <= 1e-10


def test_flat_start_interior_and_pins(networks):
    for family in (Family.EXACT, Family.APPROXIMATE):
        sys_ = build_opf(networks["case9"], ModelSpec(family, 1))
        x = flat_start(sys_)
        layout = sys_.layout
        free = layout.lower != layout.upper
        assert np.all(x[free] > layout.lower[free])
        assert np.all(x[free] < layout.upper[free])
        assert np.all(x[~free] == layout.lower[~free])


def test_flat_start_rejects_empty_generator_box():
    net = Network(
        base_mva=100.0,
        buses=(Bus(1, BusKind.REFERENCE), Bus(2, BusKind.PQ, p_demand=0.4)),
        generators=(Generator(1, 1.0, 1.0, -3.0, 3.0, 0.01, 40.0, 0.0),),
        branches=(BranchPi(1, 2, 0.02, 0.06),),
    )
    sys_ = build_opf(net, ModelSpec(Family.EXACT, 1))
    with pytest.raises(EmptyInterior, match=r"pg\[0\]"):
        flat_start(sys_)


def test_push_interior_respects_pins():
    lo = np.array([0.0, -1.0, 2.0])
    hi = np.array([0.0, 1.0, 4.0])
    x = push_interior(np.array([5.0, 5.0, 5.0]), lo, hi)
    assert x[0] == 0.0
    assert -1.0 < x[1] < 1.0
    assert 2.0 < x[2] < 4.0


def test_solve_without_objective_raises(two_bus):
    sys_ = build_opf(two_bus, ModelSpec(Family.EXACT, 1))
    with pytest.raises(ModelError):
        solve(dataclasses.replace(sys_, objective=None))


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(tol_kkt=0.0)
    with pytest.raises(ValueError):
        SolverOptions(max_iter=0)
    with pytest.raises(ValueError):
        SolverOptions(mu_shrink=1.0)
    with pytest.raises(ValueError):
        SolverOptions(fraction_to_boundary=1.5)


def test_two_bus_exact_converges(two_bus):
    sys_ = build_opf(two_bus, ModelSpec(Family.EXACT, 1))
    res = solve(sys_)
    assert res.status is SolveStatus.OPTIMAL
    # dispatch must cover load plus a small positive series loss
    sol = sys_.solution(res.primal)
    pg = sol.get("pg", 0)
    assert pg > 0.9
    assert sol.array("po")[0] > 0.0
    assert res.objective == pytest.approx(100.0 * pg ** 2 + 4000.0 * pg,
                                          rel=1e-8)


def test_deterministic_repeat(networks):
    sys_ = build_opf(networks["case14"], ModelSpec(Family.APPROXIMATE, 1))
    r1 = solve(sys_)
    r2 = solve(sys_)
    assert r1.status is r2.status
    assert r1.iterations == r2.iterations
    assert r1.objective == r2.objective
    assert np.array_equal(r1.primal, r2.primal)
    assert r1.mu_sequence == r2.mu_sequence


def test_optimal_point_feasible(solved, networks):
    system, result = solved.run("case9", Family.EXACT, 1)
    assert result.status is SolveStatus.OPTIMAL
    x = result.primal
    layout = system.layout
    assert np.all(x >= layout.lower - 1e-8)
    assert np.all(x <= layout.upper + 1e-8)
    for row in system.rows:
        res = row.residual(x)
        if row.equality:
            assert abs(res) <= 1e-7, row.label
        else:
            assert res <= 1e-7, row.label


def test_kkt_certificate_recheck(solved):
    # rebuild the scaled stationarity residual from the returned multipliers;
    # it must stand on its own, not just echo the solver's internal state
    for family, index in ((Family.EXACT, 1), (Family.APPROXIMATE, 1)):
        system, result = solved.run("case9", family, index)
        assert result.status is SolveStatus.OPTIMAL
        x = result.primal
        layout = system.layout
        fscale = result.objective_scale
        fixed = layout.lower == layout.upper

        grad = fscale * system.objective.gradient(x)
        dual_vec = grad.copy()
        for row, y in zip(system.equality_rows(), fscale * result.duals_eq):
            idx, val = row.gradient(x)
            for i, v in zip(idx, val):
                dual_vec[i] += y * v
        for row, y in zip(system.inequality_rows(), fscale * result.duals_ineq):
            idx, val = row.gradient(x)
            for i, v in zip(idx, val):
                dual_vec[i] += y * v
        dual_vec -= fscale * result.duals_lower
        dual_vec += fscale * result.duals_upper
        dual_vec[fixed] = 0.0
        scale = max(1.0, float(np.max(np.abs(grad))))
        tol = 10 * 1e-8

        assert float(np.max(np.abs(dual_vec))) / scale <= tol

        eq_res = np.array([r.residual(x) for r in system.equality_rows()])
        ineq_res = np.array([r.residual(x) for r in system.inequality_rows()])
        assert float(np.max(np.abs(eq_res))) <= tol
        assert float(np.max(ineq_res + result.slacks)) <= tol

        # complementarity: every inequality is slack or priced, never both
        z_s = fscale * result.duals_ineq
        comp = float(np.max(result.slacks * z_s)) if z_s.size else 0.0
        gaps_lo = (x - layout.lower)[~fixed]
        comp = max(comp, float(np.max(
            np.where(np.isfinite(gaps_lo), gaps_lo, 0.0)
            * (fscale * result.duals_lower)[~fixed], initial=0.0)))
        gaps_hi = (layout.upper - x)[~fixed]
        comp = max(comp, float(np.max(
            np.where(np.isfinite(gaps_hi), gaps_hi, 0.0)
            * (fscale * result.duals_upper)[~fixed], initial=0.0)))
        assert comp / scale <= tol

        assert np.all(result.duals_ineq >= -1e-12)
        assert np.all(result.duals_lower >= -1e-12)
        assert np.all(result.duals_upper >= -1e-12)


def test_barrier_parameter_monotone(solved):
    _, result = solved.run("case9", Family.APPROXIMATE, 1)
    assert result.status is SolveStatus.OPTIMAL
    seq = result.mu_sequence
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    assert seq[-1] <= 1e-9


def test_infeasible_network_is_classified():
    # demand exceeds every generator's capability: no feasible point exists
    net = Network(
        base_mva=100.0,
        buses=(Bus(1, BusKind.REFERENCE),
               Bus(2, BusKind.PQ, p_demand=0.9, q_demand=0.3)),
        generators=(Generator(1, 0.0, 0.5, -3.0, 3.0, 0.01, 40.0, 0.0),),
        branches=(BranchPi(1, 2, 0.02, 0.06),),
    )
    for family in (Family.EXACT, Family.APPROXIMATE):
        sys_ = build_opf(net, ModelSpec(family, 1, AmpacityChannel.NONE))
        res = solve(sys_)
        assert res.status is SolveStatus.INFEASIBLE_DETECTED
        assert "violation" in res.message


def test_iteration_cap_reported(two_bus):
    sys_ = build_opf(two_bus, ModelSpec(Family.EXACT, 1))
    res = solve(sys_, options=SolverOptions(max_iter=2))
    assert res.status is SolveStatus.MAX_ITERATIONS
    assert res.iterations == 2


def test_solver_ignores_input_mutation(two_bus):
    # the solver must copy or never alias its starting point
    sys_ = build_opf(two_bus, ModelSpec(Family.EXACT, 1))
    x0 = flat_start(sys_)
    keep = x0.copy()
    solve(sys_, x0=x0)
    assert np.array_equal(x0, keep)
