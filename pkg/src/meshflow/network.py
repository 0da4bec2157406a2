"""Per-unit network model: buses, generators, pi-model branches, incidence.

Branches are stored as asymmetric pi sections (series impedance plus four
independent terminal shunt admittance components), which is general enough to
hold plain lines, charging capacitance, and off-nominal-tap transformers after
conversion.  All quantities are in per-unit on the system MVA base; angles are
in radians.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

HALF_PI = math.pi / 2.0


class NetworkError(Exception):
    """Network data violates a structural or numeric invariant."""


class NonzeroPhaseShift(NetworkError):
    """Phase-shifting transformers cannot be folded into a passive pi section."""


class NonpositiveTap(NetworkError):
    """Off-nominal tap ratios must be strictly positive."""


class BusKind(enum.Enum):
    PQ = "pq"
    PV = "pv"
    REFERENCE = "reference"


@dataclass(frozen=True)
class Bus:
    """A network node with fixed demand and a fixed shunt admittance."""

    id: int
    kind: BusKind
    p_demand: float = 0.0
    q_demand: float = 0.0
    shunt_conductance: float = 0.0
    shunt_susceptance: float = 0.0
    v_min: float = 0.9
    v_max: float = 1.1
    base_kv: float = 0.0


@dataclass(frozen=True)
class Generator:
    """A dispatchable unit with box limits and quadratic cost in per-unit output.

    Cost is ``quadratic * p**2 + linear * p + constant`` with ``p`` in per-unit,
    so the coefficients already absorb the MVA base.  ``None`` cost fields mean
    the unit has no cost data attached yet.
    """

    bus_id: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_quadratic: float | None = None
    cost_linear: float | None = None
    cost_constant: float | None = None


@dataclass(frozen=True)
class BranchPi:
    """Asymmetric pi section between two buses.

    ``ampacity_sq`` is the squared per-unit bound on the measurable sending-end
    current magnitude (``None`` means unconstrained).  Angle limits bound the
    terminal voltage angle difference, always within (-pi/2, pi/2).
    """

    from_bus: int
    to_bus: int
    resistance: float
    reactance: float
    shunt_conductance_from: float = 0.0
    shunt_susceptance_from: float = 0.0
    shunt_conductance_to: float = 0.0
    shunt_susceptance_to: float = 0.0
    ampacity_sq: float | None = None
    angle_min: float = -HALF_PI
    angle_max: float = HALF_PI


class PiParameters(NamedTuple):
    """Result of folding a two-winding transformer into a pi section."""

    resistance: float
    reactance: float
    shunt_conductance_from: float
    shunt_susceptance_from: float
    shunt_conductance_to: float
    shunt_susceptance_to: float


class Incidence(NamedTuple):
    """Sparse node-by-branch incidence pair.

    ``a_plus`` carries +1 at the sending end and -1 at the receiving end of
    each branch; ``a_minus`` carries -1 at the receiving end only.  Weighting
    sending flows by ``a_plus`` and subtracting losses weighted by ``a_minus``
    yields the net series-flow injection at every node.
    """

    a_plus: sp.csr_matrix
    a_minus: sp.csr_matrix


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def _validate_bus(bus: Bus) -> None:
    if not isinstance(bus.kind, BusKind):
        raise NetworkError(f"bus {bus.id}: kind must be a BusKind, got {bus.kind!r}")
    if not _finite(bus.p_demand, bus.q_demand, bus.shunt_conductance,
                   bus.shunt_susceptance, bus.v_min, bus.v_max, bus.base_kv):
        raise NetworkError(f"bus {bus.id}: non-finite field")
    if not (0.0 < bus.v_min < bus.v_max):
        raise NetworkError(
            f"bus {bus.id}: voltage window [{bus.v_min}, {bus.v_max}] must satisfy 0 < min < max")


def _validate_generator(i: int, gen: Generator) -> None:
    if not _finite(gen.p_min, gen.p_max, gen.q_min, gen.q_max):
        raise NetworkError(f"generator {i}: non-finite limit")
    if gen.p_min > gen.p_max or gen.q_min > gen.q_max:
        raise NetworkError(f"generator {i} at bus {gen.bus_id}: inverted limits")
    for name in ("cost_quadratic", "cost_linear", "cost_constant"):
        c = getattr(gen, name)
        if c is not None and not math.isfinite(c):
            raise NetworkError(f"generator {i}: non-finite {name}")


def _validate_branch(i: int, br: BranchPi) -> None:
    if not _finite(br.resistance, br.reactance, br.shunt_conductance_from,
                   br.shunt_susceptance_from, br.shunt_conductance_to,
                   br.shunt_susceptance_to, br.angle_min, br.angle_max):
        raise NetworkError(f"branch {i}: non-finite field")
    if br.resistance == 0.0 and br.reactance == 0.0:
        raise NetworkError(f"branch {i} ({br.from_bus}-{br.to_bus}): zero series impedance")
    if br.from_bus == br.to_bus:
        raise NetworkError(f"branch {i}: both ends at bus {br.from_bus}")
    if not (-HALF_PI <= br.angle_min < br.angle_max <= HALF_PI):
        raise NetworkError(
            f"branch {i}: angle window [{br.angle_min}, {br.angle_max}] "
            f"must be within [-pi/2, pi/2] with min < max")
    if br.ampacity_sq is not None:
        if not math.isfinite(br.ampacity_sq) or br.ampacity_sq <= 0.0:
            raise NetworkError(f"branch {i}: ampacity_sq must be positive, got {br.ampacity_sq}")


@dataclass(frozen=True)
class Network:
    """Validated immutable network.  Construction performs total validation."""

    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[BranchPi, ...]
    name: str = ""

    def __post_init__(self) -> None:
        if not math.isfinite(self.base_mva) or self.base_mva <= 0.0:
            raise NetworkError(f"base MVA must be positive, got {self.base_mva}")
        if not self.buses:
            raise NetworkError("network has no buses")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        for bus in self.buses:
            _validate_bus(bus)
        refs = [b.id for b in self.buses if b.kind is BusKind.REFERENCE]
        if len(refs) != 1:
            raise NetworkError(f"expected exactly one reference bus, found {len(refs)}")
        known = set(ids)
        for i, gen in enumerate(self.generators):
            if gen.bus_id not in known:
                raise NetworkError(f"generator {i} references unknown bus {gen.bus_id}")
            _validate_generator(i, gen)
        for i, br in enumerate(self.branches):
            if br.from_bus not in known or br.to_bus not in known:
                raise NetworkError(
                    f"branch {i} references unknown bus {br.from_bus} or {br.to_bus}")
            _validate_branch(i, br)
        _check_connected(self)

    # -- lookups ---------------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    def bus_position(self) -> dict[int, int]:
        """Map external bus id -> position in ``buses``."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def reference_bus(self) -> Bus:
        return next(b for b in self.buses if b.kind is BusKind.REFERENCE)

    def to_dict(self) -> dict:
        """Canonical plain-data form, stable under round-tripping."""
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "buses": [
                {"id": b.id, "kind": b.kind.value, "p_demand": b.p_demand,
                 "q_demand": b.q_demand, "shunt_conductance": b.shunt_conductance,
                 "shunt_susceptance": b.shunt_susceptance, "v_min": b.v_min,
                 "v_max": b.v_max, "base_kv": b.base_kv}
                for b in self.buses
            ],
            "generators": [
                {"bus_id": g.bus_id, "p_min": g.p_min, "p_max": g.p_max,
                 "q_min": g.q_min, "q_max": g.q_max,
                 "cost_quadratic": g.cost_quadratic, "cost_linear": g.cost_linear,
                 "cost_constant": g.cost_constant}
                for g in self.generators
            ],
            "branches": [
                {"from_bus": br.from_bus, "to_bus": br.to_bus,
                 "resistance": br.resistance, "reactance": br.reactance,
                 "shunt_conductance_from": br.shunt_conductance_from,
                 "shunt_susceptance_from": br.shunt_susceptance_from,
                 "shunt_conductance_to": br.shunt_conductance_to,
                 "shunt_susceptance_to": br.shunt_susceptance_to,
                 "ampacity_sq": br.ampacity_sq,
                 "angle_min": br.angle_min, "angle_max": br.angle_max}
                for br in self.branches
            ],
        }

    @staticmethod
    def from_dict(data: dict) -> "Network":
        return Network(
            name=data.get("name", ""),
            base_mva=data["base_mva"],
            buses=tuple(Bus(id=d["id"], kind=BusKind(d["kind"]),
                            p_demand=d["p_demand"], q_demand=d["q_demand"],
                            shunt_conductance=d["shunt_conductance"],
                            shunt_susceptance=d["shunt_susceptance"],
                            v_min=d["v_min"], v_max=d["v_max"], base_kv=d["base_kv"])
                        for d in data["buses"]),
            generators=tuple(Generator(**d) for d in data["generators"]),
            branches=tuple(BranchPi(**d) for d in data["branches"]),
        )


def _check_connected(net: Network) -> None:
    n = net.n_bus
    pos = {b.id: i for i, b in enumerate(net.buses)}
    if net.branches:
        rows = [pos[br.from_bus] for br in net.branches]
        cols = [pos[br.to_bus] for br in net.branches]
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        ncomp, _ = connected_components(adj, directed=False)
    else:
        ncomp = n
    if ncomp != 1:
        raise NetworkError(f"network is disconnected ({ncomp} components)")


def build_incidence(network: Network) -> Incidence:
    """Sending/receiving incidence matrices, bus rows in ``buses`` order."""
    n, m = network.n_bus, network.n_branch
    pos = network.bus_position()
    rows_p, cols_p, vals_p = [], [], []
    rows_m, cols_m, vals_m = [], [], []
    for j, br in enumerate(network.branches):
        rows_p += [pos[br.from_bus], pos[br.to_bus]]
        cols_p += [j, j]
        vals_p += [1.0, -1.0]
        rows_m.append(pos[br.to_bus])
        cols_m.append(j)
        vals_m.append(-1.0)
    a_plus = sp.csr_matrix((vals_p, (rows_p, cols_p)), shape=(n, m))
    a_minus = sp.csr_matrix((vals_m, (rows_m, cols_m)), shape=(n, m))
    return Incidence(a_plus, a_minus)


def transformer_to_pi(series_r: float, series_x: float, total_charging_b: float,
                      tap_ratio: float = 1.0, phase_shift: float = 0.0) -> PiParameters:
    """Fold a two-winding transformer into an equivalent asymmetric pi section.

    The tap (ratio ``a``, on the from side) rescales the series impedance to
    ``a*(r + jx)`` and leaves unequal shunt admittances at the two terminals so
    that the two-port admittance matrix of the pi section matches the tapped
    device exactly.  A unit tap degenerates to the familiar symmetric section
    with half the charging at each end.  Phase shifters are rejected: their
    two-port is not representable by any passive pi network.
    """
    if phase_shift != 0.0:
        raise NonzeroPhaseShift(f"phase shift {phase_shift} not supported")
    if not math.isfinite(tap_ratio) or tap_ratio <= 0.0:
        raise NonpositiveTap(f"tap ratio must be positive, got {tap_ratio}")
    if series_r == 0.0 and series_x == 0.0:
        raise NetworkError("zero series impedance")
    a = tap_ratio
    y_series = 1.0 / complex(series_r, series_x)
    y_from = y_series * (1.0 / a) * (1.0 / a - 1.0) + complex(0.0, total_charging_b / (2.0 * a * a))
    y_to = y_series * (1.0 - 1.0 / a) + complex(0.0, total_charging_b / 2.0)
    return PiParameters(
        resistance=a * series_r,
        reactance=a * series_x,
        shunt_conductance_from=y_from.real,
        shunt_susceptance_from=y_from.imag,
        shunt_conductance_to=y_to.real,
        shunt_susceptance_to=y_to.imag,
    )


def ampacity_sq_from_rating(rate_mva: float, base_mva: float) -> float | None:
    """Squared per-unit current bound from an MVA line rating.

    The rating is read as apparent power at nominal (1.0 per-unit) voltage, so
    the implied current bound is ``rate/base`` and the squared bound is its
    square.  A zero or negative rating means the line is unconstrained.
    """
    if not math.isfinite(rate_mva):
        raise NetworkError(f"non-finite line rating {rate_mva}")
    if base_mva <= 0.0:
        raise NetworkError(f"base MVA must be positive, got {base_mva}")
    if rate_mva <= 0.0:
        return None
    return (rate_mva / base_mva) ** 2
