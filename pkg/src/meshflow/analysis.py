"""Post-solve auditing: approximation gaps, solution recovery, measurable
terminal flows, cross-format residuals, and an admittance-matrix oracle.

Everything here is a pure function over immutable inputs.  The oracle
deliberately rebuilds nodal physics from the pi parameters along a different
code path than the model rows, so a transcription error in either one shows
up as a mismatch instead of cancelling out.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .model import (AmpacityChannel, ConstraintSystem, Family, ModelSpec,
                    Solution, build_opf)
from .network import Network


@dataclass(frozen=True)
class GapReport:
    """Per-branch relaxation slack of the loss definitions.

    gap_po[j] = po_j - R_j*(ps_j^2 + qs_j^2)/Vs_j  (active channel), and the
    analogous reactive quantity with X.  Positive values mean the relaxed
    loss variable overshoots the physical loss implied by the series flow.
    """

    gap_po: np.ndarray
    gap_qo: np.ndarray
    gap_po_max: float
    gap_qo_max: float
    argmax_po: int
    argmax_qo: int


@dataclass(frozen=True)
class MeasurableFlows:
    """Terminal-side (meterable) sending-end quantities per branch."""

    p_tilde: np.ndarray        # measurable active flow at the sending terminal
    q_tilde: np.ndarray        # measurable reactive flow
    i_tilde_sq: np.ndarray     # squared measurable current amplitude
    i_series_sq: np.ndarray    # squared series-branch current amplitude
    delta_i_sq: np.ndarray     # i_series_sq - i_tilde_sq
    k_effective: np.ndarray    # shifted squared-current budget (nan if unrated)
    p_shunt: np.ndarray        # sending-end shunt active draw Vs*Gs
    q_shunt: np.ndarray        # sending-end shunt reactive injection Vs*Bs
    violations: np.ndarray     # i_tilde_sq > rating (False when unrated)

    @property
    def violation_count(self) -> int:
        return int(np.count_nonzero(self.violations))


@dataclass(frozen=True)
class PhysicalSolution:
    """Bus-phasor view of a solve, directly comparable across families."""

    v: np.ndarray              # voltage magnitude per bus (network order)
    theta: np.ndarray          # voltage angle per bus, reference pinned to 0
    p_series: np.ndarray       # sending-end series active flow per branch
    q_series: np.ndarray
    p_loss: np.ndarray
    q_loss: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    cycle_residual: float      # worst angle-closure defect over mesh cycles


def _sending_voltage_sq(solution: Solution, network: Network) -> np.ndarray:
    if solution.family is Family.EXACT:
        return np.array([solution.get("vm", br.from_bus) ** 2
                         for br in network.branches])
    return np.array([solution.get("vv", br.from_bus)
                     for br in network.branches])


def compute_gaps(system: ConstraintSystem, solution, network: Network) -> GapReport:
    """Loss-relaxation gaps at a primal point (either family)."""
    if not isinstance(solution, Solution):
        solution = system.solution(np.asarray(solution, float))
    vs = _sending_voltage_sq(solution, network)
    ps = solution.array("ps")
    qs = solution.array("qs")
    po = solution.array("po")
    qo = solution.array("qo")
    r = np.array([br.resistance for br in network.branches])
    x = np.array([br.reactance for br in network.branches])
    flow_sq = (ps * ps + qs * qs) / vs
    gap_po = po - flow_sq * r
    gap_qo = qo - flow_sq * x
    i_p = int(np.argmax(gap_po)) if gap_po.size else 0
    i_q = int(np.argmax(gap_qo)) if gap_qo.size else 0
    return GapReport(
        gap_po=gap_po, gap_qo=gap_qo,
        gap_po_max=float(gap_po[i_p]) if gap_po.size else 0.0,
        gap_qo_max=float(gap_qo[i_q]) if gap_qo.size else 0.0,
        argmax_po=i_p, argmax_qo=i_q,
    )


def measurable_flows(solution: Solution, network: Network) -> MeasurableFlows:
    """Terminal flows, current amplitudes and shifted ampacity budgets.

    The series branch carries (ps, qs); what a meter at the sending terminal
    sees additionally includes the shunt draw, so the squared measurable
    current differs from the squared series current by an affine amount.
    """
    vs = _sending_voltage_sq(solution, network)
    ps = solution.array("ps")
    qs = solution.array("qs")
    g = np.array([br.shunt_conductance_from for br in network.branches])
    b = np.array([br.shunt_susceptance_from for br in network.branches])
    rating = np.array([math.nan if br.ampacity_sq is None else br.ampacity_sq
                       for br in network.branches])

    p_shunt = vs * g
    q_shunt = vs * b
    p_tilde = ps + p_shunt
    q_tilde = qs - q_shunt
    i_series_sq = (ps * ps + qs * qs) / vs
    i_tilde_sq = (p_tilde * p_tilde + q_tilde * q_tilde) / vs
    delta_i_sq = -vs * b * b + 2.0 * qs * b - vs * g * g - 2.0 * ps * g
    k_effective = rating + delta_i_sq
    with np.errstate(invalid="ignore"):
        violations = i_tilde_sq > rating
    return MeasurableFlows(
        p_tilde=p_tilde, q_tilde=q_tilde,
        i_tilde_sq=i_tilde_sq, i_series_sq=i_series_sq,
        delta_i_sq=delta_i_sq, k_effective=k_effective,
        p_shunt=p_shunt, q_shunt=q_shunt, violations=violations,
    )


def recover_solution(solution: Solution, system: ConstraintSystem,
                     network: Network) -> PhysicalSolution:
    """Bus phasors from a solve.

    Exact solutions pass through unchanged.  Approximate solutions take
    v = sqrt(V), invert the sine-drop law for each branch angle difference,
    and rebuild bus angles by propagating those differences over a
    minimum-reactance spanning tree rooted at the reference bus (closure
    defects then land on the stiffest branches, where an angle error has
    the least effect on recomputed flows); the worst closure defect over
    the remaining (cycle-forming) branches is reported, never redistributed.
    """
    pos = network.bus_position()
    n = network.n_bus
    ps = solution.array("ps")
    qs = solution.array("qs")
    po = solution.array("po")
    qo = solution.array("qo")
    pg = solution.array("pg")
    qg = solution.array("qg")

    if solution.family is Family.EXACT:
        v = np.array([solution.get("vm", bus.id) for bus in network.buses])
        theta = np.array([solution.get("va", bus.id) for bus in network.buses])
        cycle = 0.0
    else:
        v = np.sqrt(np.array([solution.get("vv", bus.id)
                              for bus in network.buses]))
        th = solution.array("th")
        # invert the sine-drop law per branch: the angle-difference variable
        # stands in for vs*vr*sin(delta), and the feasibility cone guarantees
        # |th| <= vs*vr, so the inversion is always defined
        delta_br = np.empty(network.n_branch)
        for j, br in enumerate(network.branches):
            f, t = pos[br.from_bus], pos[br.to_bus]
            delta_br[j] = math.asin(min(1.0, max(-1.0, th[j] / (v[f] * v[t]))))
        # Kruskal on ascending reactance: low-X branches join the tree,
        # high-X branches become the chords that absorb closure defects
        parent = list(range(n))

        def find(a: int) -> int:
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        in_tree = np.zeros(network.n_branch, dtype=bool)
        order = sorted(range(network.n_branch),
                       key=lambda j: abs(network.branches[j].reactance))
        for j in order:
            br = network.branches[j]
            rf, rt = find(pos[br.from_bus]), find(pos[br.to_bus])
            if rf != rt:
                parent[rf] = rt
                in_tree[j] = True

        adjacency: list[list[tuple[int, int, float]]] = [[] for _ in range(n)]
        for j, br in enumerate(network.branches):
            if not in_tree[j]:
                continue
            f, t = pos[br.from_bus], pos[br.to_bus]
            # traversing with the branch: receiving angle = sending - delta
            adjacency[f].append((t, j, -delta_br[j]))
            adjacency[t].append((f, j, +delta_br[j]))
        theta = np.full(n, np.nan)
        root = pos[network.reference_bus.id]
        theta[root] = 0.0
        queue = deque([root])
        while queue:
            k = queue.popleft()
            for other, j, delta in adjacency[k]:
                if math.isnan(theta[other]):
                    theta[other] = theta[k] + delta
                    queue.append(other)
        cycle = 0.0
        for j, br in enumerate(network.branches):
            if in_tree[j]:
                continue
            f, t = pos[br.from_bus], pos[br.to_bus]
            cycle = max(cycle, abs(delta_br[j] - (theta[f] - theta[t])))

    return PhysicalSolution(
        v=v, theta=theta, p_series=ps, q_series=qs, p_loss=po, q_loss=qo,
        p_gen=pg, q_gen=qg, cycle_residual=float(cycle),
    )


def cross_format_residuals(solution: Solution, network: Network,
                           family: Family,
                           formats: list[int]) -> dict[int, dict[str, float]]:
    """Evaluate one point under every listed format's equation set.

    Returns, per format, the worst absolute residual per row label (equality
    rows) and the worst positive violation (inequality rows).  Points are
    shared verbatim: all formats of a family use the same variable layout.
    """
    out: dict[int, dict[str, float]] = {}
    for fmt in formats:
        spec = ModelSpec(family=family, equation_format=fmt,
                         ampacity_channel=AmpacityChannel.NONE)
        target = build_opf(network, spec)
        if target.layout.kinds != solution.layout.kinds:
            raise ValueError("solution layout does not match target family")
        worst: dict[str, float] = {}
        for row in target.rows:
            r = row.residual(solution.values)
            err = abs(r) if row.equality else max(r, 0.0)
            worst[row.label] = max(worst.get(row.label, 0.0), err)
        out[fmt] = worst
    return out


def build_ybus(network: Network) -> np.ndarray:
    """Complex bus admittance matrix from the same pi parameters."""
    pos = network.bus_position()
    n = network.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        f, t = pos[br.from_bus], pos[br.to_bus]
        y = 1.0 / complex(br.resistance, br.reactance)
        Y[f, f] += y + complex(br.shunt_conductance_from, br.shunt_susceptance_from)
        Y[t, t] += y + complex(br.shunt_conductance_to, br.shunt_susceptance_to)
        Y[f, t] -= y
        Y[t, f] -= y
    for k, bus in enumerate(network.buses):
        Y[k, k] += complex(bus.shunt_conductance, bus.shunt_susceptance)
    return Y


def ybus_oracle(solution, network: Network,
                system: ConstraintSystem | None = None) -> np.ndarray:
    """Per-bus complex power mismatch against nodal admittance physics.

    Accepts an exact-family Solution or an already recovered
    PhysicalSolution; approximate-family Solutions are recovered first (pass
    the system for that).  Returns |S_injected(Y, v, theta) - (gen - demand)|
    per bus, in per-unit.
    """
    if isinstance(solution, Solution):
        if solution.family is Family.APPROXIMATE:
            if system is None:
                raise ValueError("recovering an approximate solution needs "
                                 "its constraint system")
            phys = recover_solution(solution, system, network)
        else:
            phys = recover_solution(solution, None, network)
    elif isinstance(solution, PhysicalSolution):
        phys = solution
    else:
        raise TypeError(f"unsupported solution type {type(solution)!r}")

    pos = network.bus_position()
    Y = build_ybus(network)
    vc = phys.v * np.exp(1j * phys.theta)
    s_inj = vc * np.conj(Y @ vc)

    s_net = np.zeros(network.n_bus, dtype=complex)
    for k, bus in enumerate(network.buses):
        s_net[k] -= complex(bus.p_demand, bus.q_demand)
    for gidx, gen in enumerate(network.generators):
        s_net[pos[gen.bus_id]] += complex(phys.p_gen[gidx], phys.q_gen[gidx])
    return np.abs(s_inj - s_net)
