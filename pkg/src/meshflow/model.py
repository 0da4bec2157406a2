"""Optimization model assembly for branch-flow OPF on meshed networks.

Two model families share a per-branch flow parameterization (sending-end
series flows ``ps, qs`` and series losses ``po, qo``):

* the exact family carries bus voltage magnitude and angle variables and
  nonlinear voltage-drop/loss equations;
* the approximate family replaces magnitudes by squared-voltage variables,
  carries one angle-difference variable per branch, linearizes the drop
  equations, and relaxes the loss definitions into rotated-cone inequalities.

Each family comes in six interchangeable equation formats (different but, for
the exact family, mathematically equivalent subsets of the drop/loss
equations), and an ampacity limit can be attached through either the active-
or reactive-loss channel.  Systems are immutable; the ``attach_*`` helpers
return modified copies.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .network import Network

# Branch-equation membership per equation format.  Balance rows are always
# present; the labels below select the per-branch drop/loss rows.
EXACT_BRANCH_EQS: dict[int, tuple[str, ...]] = {
    1: ("sq_drop", "sin_drop", "loss_p", "loss_q"),
    2: ("sq_drop", "sin_drop", "loss_p", "loss_ratio"),
    3: ("sq_drop", "sin_drop", "loss_q", "loss_ratio"),
    4: ("sin_drop", "cos_drop", "loss_p", "loss_q"),
    5: ("sin_drop", "cos_drop", "loss_p", "loss_ratio"),
    6: ("sin_drop", "cos_drop", "loss_q", "loss_ratio"),
}
APPROX_BRANCH_EQS: dict[int, tuple[str, ...]] = {
    1: ("v_drop_loss", "theta_link", "cone_loss_p", "cone_loss_q"),
    2: ("v_drop_loss", "theta_link", "loss_ratio", "cone_loss_p"),
    3: ("v_drop_loss", "theta_link", "loss_ratio", "cone_loss_q"),
    4: ("v_drop_mean", "theta_link", "cone_loss_p", "cone_loss_q"),
    5: ("v_drop_mean", "theta_link", "loss_ratio", "cone_loss_p"),
    6: ("v_drop_mean", "theta_link", "loss_ratio", "cone_loss_q"),
}

NONLINEAR_EQ_TAGS = ("sin_drop", "cos_drop", "sq_drop", "loss_p", "loss_q",
                     "balance_p", "balance_q")


class ModelError(Exception):
    """Model assembly failure."""


class InvalidSpec(ModelError):
    """Malformed ModelSpec (unknown format index, negative penalty, ...)."""


class MissingCost(ModelError):
    """A generator has no cost coefficients attached."""


class PenaltyOnExactModel(ModelError):
    """Loss penalties only apply to the approximate family."""


class Family(enum.Enum):
    EXACT = "exact"
    APPROXIMATE = "approx"


class AmpacityChannel(enum.Enum):
    ACTIVE_LOSS = "active_loss"
    REACTIVE_LOSS = "reactive_loss"
    NONE = "none"


@dataclass(frozen=True)
class ModelSpec:
    """Which model to build: family, equation format 1-6, ampacity channel,
    and (approximate family only) reactive-loss penalty weight.

    ``penalty_xi`` follows the data file's cost-coefficient convention:
    currency per physical unit of reactive loss.  The builder rescales it to
    the per-unit variables the same way the linear cost coefficients are
    rescaled, so a given number exerts the same economic pressure regardless
    of the network's base power."""

    family: Family
    equation_format: int = 1
    ampacity_channel: AmpacityChannel = AmpacityChannel.ACTIVE_LOSS
    penalty_xi: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.family, Family):
            raise InvalidSpec(f"family must be a Family, got {self.family!r}")
        if self.equation_format not in range(1, 7):
            raise InvalidSpec(f"equation_format must be 1..6, got {self.equation_format}")
        if not isinstance(self.ampacity_channel, AmpacityChannel):
            raise InvalidSpec(f"bad ampacity channel {self.ampacity_channel!r}")
        if not (math.isfinite(self.penalty_xi) and self.penalty_xi >= 0.0):
            raise InvalidSpec(f"penalty_xi must be >= 0, got {self.penalty_xi}")


# -- variable layout -------------------------------------------------------

# kinds: vm/va keyed by bus id (exact), vv keyed by bus id (approximate,
# squared magnitude), th keyed by branch position (approximate), pg/qg keyed
# by generator position, ps/qs/po/qo keyed by branch position.


@dataclass(frozen=True)
class VariableLayout:
    """Dense variable vector layout with per-variable box bounds."""

    kinds: tuple[str, ...]
    keys: tuple[int, ...]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index",
                           {kk: i for i, kk in enumerate(zip(self.kinds, self.keys))})

    @property
    def n(self) -> int:
        return len(self.kinds)

    def idx(self, kind: str, key: int) -> int:
        return self._index[(kind, key)]

    def indices(self, kind: str) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == kind]

    def describe(self, i: int) -> str:
        return f"{self.kinds[i]}[{self.keys[i]}]"


def _build_layout(network: Network, family: Family) -> VariableLayout:
    kinds: list[str] = []
    keys: list[int] = []
    lower: list[float] = []
    upper: list[float] = []

    def add(kind: str, key: int, lo: float, hi: float) -> None:
        kinds.append(kind)
        keys.append(key)
        lower.append(lo)
        upper.append(hi)

    ref_id = network.reference_bus.id
    if family is Family.EXACT:
        for bus in network.buses:
            add("vm", bus.id, bus.v_min, bus.v_max)
        for bus in network.buses:
            if bus.id == ref_id:
                add("va", bus.id, 0.0, 0.0)  # pinned angle reference
            else:
                add("va", bus.id, -math.pi, math.pi)
    else:
        for bus in network.buses:
            add("vv", bus.id, bus.v_min ** 2, bus.v_max ** 2)
        # nodal angles stay in the linearized family so the per-branch
        # angle differences telescope around every mesh loop; dropping them
        # would silently relax the model on any non-radial network
        for bus in network.buses:
            if bus.id == ref_id:
                add("va", bus.id, 0.0, 0.0)  # pinned angle reference
            else:
                add("va", bus.id, -math.pi, math.pi)
        for j, br in enumerate(network.branches):
            add("th", j, br.angle_min, br.angle_max)

    for g, gen in enumerate(network.generators):
        add("pg", g, gen.p_min, gen.p_max)
    for g, gen in enumerate(network.generators):
        add("qg", g, gen.q_min, gen.q_max)
    for kind in ("ps", "qs"):
        for j in range(network.n_branch):
            add(kind, j, -math.inf, math.inf)
    for j, br in enumerate(network.branches):
        lo, hi = (0.0, math.inf) if br.resistance >= 0.0 else (-math.inf, 0.0)
        add("po", j, lo, hi)
    for j, br in enumerate(network.branches):
        lo, hi = (0.0, math.inf) if br.reactance >= 0.0 else (-math.inf, 0.0)
        add("qo", j, lo, hi)

    return VariableLayout(tuple(kinds), tuple(keys),
                          np.array(lower, float), np.array(upper, float))


# -- constraint rows -------------------------------------------------------
#
# Every row exposes residual(x), gradient(x) -> (indices, values), and
# hessian(x) -> iterable of (i, j, value) with each symmetric pair emitted
# once (i <= j).  Equality rows are r(x) = 0; inequality rows are g(x) <= 0.


@dataclass(frozen=True)
class LinearRow:
    """coeffs . x - rhs  (= 0 or <= 0)."""

    label: str
    indices: tuple[int, ...]
    coeffs: tuple[float, ...]
    rhs: float
    equality: bool
    branch: int | None = None

    is_linear = True

    def residual(self, x: np.ndarray) -> float:
        r = -self.rhs
        for i, c in zip(self.indices, self.coeffs):
            r += c * x[i]
        return r

    def gradient(self, x: np.ndarray):
        return self.indices, self.coeffs

    def hessian(self, x: np.ndarray):
        return ()


@dataclass(frozen=True)
class ConeRow:
    """scale * sum(x[z]^2) - bilinear * x[t] * x[d]  <= 0.

    With positive ``scale`` and ``bilinear`` and ``x[t], x[d]`` kept positive
    by their bounds, the feasible set is a rotated second-order cone.
    """

    label: str
    z_indices: tuple[int, ...]
    t_index: int
    d_index: int
    scale: float
    bilinear: float
    branch: int | None = None

    equality = False
    is_linear = False

    def residual(self, x: np.ndarray) -> float:
        q = sum(x[i] * x[i] for i in self.z_indices)
        return self.scale * q - self.bilinear * x[self.t_index] * x[self.d_index]

    def gradient(self, x: np.ndarray):
        idx = list(self.z_indices) + [self.t_index, self.d_index]
        vals = [2.0 * self.scale * x[i] for i in self.z_indices]
        vals += [-self.bilinear * x[self.d_index], -self.bilinear * x[self.t_index]]
        return tuple(idx), tuple(vals)

    def hessian(self, x: np.ndarray):
        ent = [(i, i, 2.0 * self.scale) for i in self.z_indices]
        a, b = sorted((self.t_index, self.d_index))
        ent.append((a, b, -self.bilinear))
        return ent


@dataclass(frozen=True)
class SinDropRow:
    """vs*vr*sin(ts - tr) - x*ps + r*qs = 0 (angle-drop coupling)."""

    label: str
    vs: int
    vr: int
    ts: int
    tr: int
    ps: int
    qs: int
    r: float
    x: float
    branch: int

    equality = True
    is_linear = False

    def residual(self, x: np.ndarray) -> float:
        d = x[self.ts] - x[self.tr]
        return x[self.vs] * x[self.vr] * math.sin(d) - self.x * x[self.ps] + self.r * x[self.qs]

    def gradient(self, x: np.ndarray):
        vs, vr = x[self.vs], x[self.vr]
        d = x[self.ts] - x[self.tr]
        s, c = math.sin(d), math.cos(d)
        return ((self.vs, self.vr, self.ts, self.tr, self.ps, self.qs),
                (vr * s, vs * s, vs * vr * c, -vs * vr * c, -self.x, self.r))

    def hessian(self, x: np.ndarray):
        vs, vr = x[self.vs], x[self.vr]
        d = x[self.ts] - x[self.tr]
        s, c = math.sin(d), math.cos(d)
        return (
            (*sorted((self.vs, self.vr)), s),
            (*sorted((self.vs, self.ts)), vr * c),
            (*sorted((self.vs, self.tr)), -vr * c),
            (*sorted((self.vr, self.ts)), vs * c),
            (*sorted((self.vr, self.tr)), -vs * c),
            (self.ts, self.ts, -vs * vr * s),
            (*sorted((self.ts, self.tr)), vs * vr * s),
            (self.tr, self.tr, -vs * vr * s),
        )


@dataclass(frozen=True)
class CosDropRow:
    """vs^2 - vs*vr*cos(ts - tr) - r*ps - x*qs = 0 (magnitude-drop coupling)."""

    label: str
    vs: int
    vr: int
    ts: int
    tr: int
    ps: int
    qs: int
    r: float
    x: float
    branch: int

    equality = True
    is_linear = False

    def residual(self, x: np.ndarray) -> float:
        d = x[self.ts] - x[self.tr]
        return (x[self.vs] ** 2 - x[self.vs] * x[self.vr] * math.cos(d)
                - self.r * x[self.ps] - self.x * x[self.qs])

    def gradient(self, x: np.ndarray):
        vs, vr = x[self.vs], x[self.vr]
        d = x[self.ts] - x[self.tr]
        s, c = math.sin(d), math.cos(d)
        return ((self.vs, self.vr, self.ts, self.tr, self.ps, self.qs),
                (2.0 * vs - vr * c, -vs * c, vs * vr * s, -vs * vr * s, -self.r, -self.x))

    def hessian(self, x: np.ndarray):
        vs, vr = x[self.vs], x[self.vr]
        d = x[self.ts] - x[self.tr]
        s, c = math.sin(d), math.cos(d)
        return (
            (self.vs, self.vs, 2.0),
            (*sorted((self.vs, self.vr)), -c),
            (*sorted((self.vs, self.ts)), vr * s),
            (*sorted((self.vs, self.tr)), -vr * s),
            (*sorted((self.vr, self.ts)), vs * s),
            (*sorted((self.vr, self.tr)), -vs * s),
            (self.ts, self.ts, vs * vr * c),
            (*sorted((self.ts, self.tr)), -vs * vr * c),
            (self.tr, self.tr, vs * vr * c),
        )


@dataclass(frozen=True)
class SqDropRow:
    """vs^2 - vr^2 - 2r*ps - 2x*qs + r*po + x*qo = 0 (squared-magnitude drop)."""

    label: str
    vs: int
    vr: int
    ps: int
    qs: int
    po: int
    qo: int
    r: float
    x: float
    branch: int

    equality = True
    is_linear = False

    def residual(self, x: np.ndarray) -> float:
        return (x[self.vs] ** 2 - x[self.vr] ** 2
                - 2.0 * self.r * x[self.ps] - 2.0 * self.x * x[self.qs]
                + self.r * x[self.po] + self.x * x[self.qo])

    def gradient(self, x: np.ndarray):
        return ((self.vs, self.vr, self.ps, self.qs, self.po, self.qo),
                (2.0 * x[self.vs], -2.0 * x[self.vr],
                 -2.0 * self.r, -2.0 * self.x, self.r, self.x))

    def hessian(self, x: np.ndarray):
        return ((self.vs, self.vs, 2.0), (self.vr, self.vr, -2.0))


@dataclass(frozen=True)
class LossRow:
    """loss * vs^2 / series - (ps^2 + qs^2) = 0.

    The loss definition (series current magnitude squared times the series
    resistance or reactance), divided through by the series element and
    multiplied by vs^2 to keep the residual polynomial.  In these units the
    residual measures a squared-current mismatch, which keeps the row's
    multiplier on the same scale as the capacity rows'; stated in loss units
    the multiplier would grow by 1/series and tiny violations would buy real
    objective.
    """

    label: str
    vs: int
    ps: int
    qs: int
    loss: int
    inv_series: float
    branch: int

    equality = True
    is_linear = False

    def residual(self, x: np.ndarray) -> float:
        return (self.inv_series * x[self.loss] * x[self.vs] ** 2
                - (x[self.ps] ** 2 + x[self.qs] ** 2))

    def gradient(self, x: np.ndarray):
        return ((self.vs, self.ps, self.qs, self.loss),
                (2.0 * self.inv_series * x[self.loss] * x[self.vs],
                 -2.0 * x[self.ps],
                 -2.0 * x[self.qs],
                 self.inv_series * x[self.vs] ** 2))

    def hessian(self, x: np.ndarray):
        return (
            (self.vs, self.vs, 2.0 * self.inv_series * x[self.loss]),
            (*sorted((self.vs, self.loss)), 2.0 * self.inv_series * x[self.vs]),
            (self.ps, self.ps, -2.0),
            (self.qs, self.qs, -2.0),
        )


@dataclass(frozen=True)
class BalanceRow:
    """sum(coeffs . x) + shunt_sign-adjusted v^2 term + const = 0.

    Nodal balance: generation minus demand equals net series-flow injection
    plus the quadratic shunt term.  ``v_coef`` multiplies ``x[v]**2`` for the
    exact family; the approximate variant is emitted as a plain LinearRow.
    """

    label: str
    indices: tuple[int, ...]
    coeffs: tuple[float, ...]
    v: int
    v_coef: float
    const: float

    equality = True
    is_linear = False
    branch = None

    def residual(self, x: np.ndarray) -> float:
        r = self.const + self.v_coef * x[self.v] ** 2
        for i, c in zip(self.indices, self.coeffs):
            r += c * x[i]
        return r

    def gradient(self, x: np.ndarray):
        return (self.indices + (self.v,),
                self.coeffs + (2.0 * self.v_coef * x[self.v],))

    def hessian(self, x: np.ndarray):
        return ((self.v, self.v, 2.0 * self.v_coef),)


@dataclass(frozen=True)
class AmpacityRow:
    """c_loss * loss - (affine ampacity budget in voltage, ps, qs)  <= 0.

    The budget is affine in the squared voltage; for the exact family the
    squared voltage is expanded as vm^2, making the row quadratic.  The row
    is stated in squared-current units (``c_loss`` is the reciprocal of the
    series element), which keeps its multiplier on the same footing as the
    other rows; a loss-unit statement would scale the dual by 1/R or 1/X
    and let tiny violations hide real overloads.
    """

    label: str
    loss: int
    v: int
    ps: int
    qs: int
    c_loss: float
    c_v: float
    c_ps: float
    c_qs: float
    c_const: float
    voltage_is_squared_var: bool
    branch: int

    equality = False

    @property
    def is_linear(self) -> bool:
        return self.voltage_is_squared_var

    def _vsq(self, x: np.ndarray) -> float:
        return x[self.v] if self.voltage_is_squared_var else x[self.v] ** 2

    def residual(self, x: np.ndarray) -> float:
        budget = (self.c_v * self._vsq(x) + self.c_ps * x[self.ps]
                  + self.c_qs * x[self.qs] + self.c_const)
        return self.c_loss * x[self.loss] - budget

    def gradient(self, x: np.ndarray):
        dv = -self.c_v if self.voltage_is_squared_var else -2.0 * self.c_v * x[self.v]
        return ((self.loss, self.v, self.ps, self.qs),
                (self.c_loss, dv, -self.c_ps, -self.c_qs))

    def hessian(self, x: np.ndarray):
        if self.voltage_is_squared_var:
            return ()
        return ((self.v, self.v, -2.0 * self.c_v),)


Row = LinearRow | ConeRow | SinDropRow | CosDropRow | SqDropRow | LossRow | BalanceRow | AmpacityRow


@dataclass(frozen=True)
class AmpacityExpr:
    """Affine ampacity budget for one branch: the loss bound equals
    ``c_v * Vs + c_ps * ps + c_qs * qs + c_const`` with ``Vs`` the squared
    sending-end voltage."""

    branch: int
    channel: AmpacityChannel
    c_v: float
    c_ps: float
    c_qs: float
    c_const: float


def ampacity_expression(network: Network, branch_index: int,
                        channel: AmpacityChannel) -> AmpacityExpr | None:
    """Loss-channel ampacity budget for one branch, or None if unrated.

    The measurable terminal current differs from the series current by the
    sending-end shunt draw; correcting the squared rating for that difference
    and scaling by the series resistance (active channel) or reactance
    (reactive channel) yields an affine bound on the loss variable.
    """
    br = network.branches[branch_index]
    if br.ampacity_sq is None or channel is AmpacityChannel.NONE:
        return None
    g, b = br.shunt_conductance_from, br.shunt_susceptance_from
    scale = br.resistance if channel is AmpacityChannel.ACTIVE_LOSS else br.reactance
    return AmpacityExpr(
        branch=branch_index, channel=channel,
        c_v=-(g * g + b * b) * scale,
        c_ps=-2.0 * g * scale,
        c_qs=2.0 * b * scale,
        c_const=br.ampacity_sq * scale,
    )


# -- objective ---------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticObjective:
    """f(x) = sum(quad * x^2) + lin . x + const (diagonal quadratic)."""

    quad: np.ndarray
    lin: np.ndarray
    const: float

    def value(self, x: np.ndarray) -> float:
        return float(self.quad @ (x * x) + self.lin @ x + self.const)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.quad * x + self.lin

    def hessian_diag(self) -> np.ndarray:
        return 2.0 * self.quad


# -- constraint system -------------------------------------------------------


@dataclass(frozen=True)
class ConstraintSystem:
    """Immutable bundle of layout, rows and objective for one model."""

    layout: VariableLayout
    rows: tuple[Row, ...]
    objective: QuadraticObjective | None
    family: Family
    equation_format: int
    ampacity_channel: AmpacityChannel
    penalty_xi: float
    network_name: str = ""

    @property
    def n(self) -> int:
        return self.layout.n

    def equality_rows(self) -> tuple[Row, ...]:
        return tuple(r for r in self.rows if r.equality)

    def inequality_rows(self) -> tuple[Row, ...]:
        return tuple(r for r in self.rows if not r.equality)

    def row_labels(self) -> list[str]:
        return [r.label for r in self.rows]

    def is_structurally_convex(self) -> bool:
        """True when every row is linear or a rotated-cone inequality."""
        return all(r.is_linear or isinstance(r, ConeRow) for r in self.rows)

    def solution(self, x: np.ndarray) -> "Solution":
        return Solution(layout=self.layout, values=np.asarray(x, float),
                        family=self.family)


@dataclass(frozen=True)
class Solution:
    """Primal point addressed by physical quantity."""

    layout: VariableLayout
    values: np.ndarray
    family: Family

    def get(self, kind: str, key: int) -> float:
        return float(self.values[self.layout.idx(kind, key)])

    def array(self, kind: str) -> np.ndarray:
        return self.values[self.layout.indices(kind)]


# -- builders ----------------------------------------------------------------


def effective_nodal_shunts(network: Network) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus shunt admittance with branch terminal shunts folded in.

    The balance equations carry a single quadratic shunt term per bus, so the
    pi-section terminal shunts of every incident branch are lumped with the
    bus's own shunt.  (The branch fields themselves stay untouched; the
    ampacity correction still uses them per branch.)
    """
    pos = network.bus_position()
    g = np.array([b.shunt_conductance for b in network.buses], float)
    b = np.array([b.shunt_susceptance for b in network.buses], float)
    for br in network.branches:
        g[pos[br.from_bus]] += br.shunt_conductance_from
        b[pos[br.from_bus]] += br.shunt_susceptance_from
        g[pos[br.to_bus]] += br.shunt_conductance_to
        b[pos[br.to_bus]] += br.shunt_susceptance_to
    return g, b


def _balance_terms(network: Network, layout: VariableLayout):
    """Shared structure of nodal balance rows: per-bus index/coefficient lists."""
    pos = network.bus_position()
    n = network.n_bus
    p_idx: list[list[int]] = [[] for _ in range(n)]
    p_coef: list[list[float]] = [[] for _ in range(n)]
    q_idx: list[list[int]] = [[] for _ in range(n)]
    q_coef: list[list[float]] = [[] for _ in range(n)]
    for g, gen in enumerate(network.generators):
        k = pos[gen.bus_id]
        p_idx[k].append(layout.idx("pg", g))
        p_coef[k].append(1.0)
        q_idx[k].append(layout.idx("qg", g))
        q_coef[k].append(1.0)
    for j, br in enumerate(network.branches):
        fk, tk = pos[br.from_bus], pos[br.to_bus]
        # sending end: net series injection is +ps
        p_idx[fk].append(layout.idx("ps", j))
        p_coef[fk].append(-1.0)
        q_idx[fk].append(layout.idx("qs", j))
        q_coef[fk].append(-1.0)
        # receiving end: net series injection is -(ps - po)
        p_idx[tk].append(layout.idx("ps", j))
        p_coef[tk].append(1.0)
        p_idx[tk].append(layout.idx("po", j))
        p_coef[tk].append(-1.0)
        q_idx[tk].append(layout.idx("qs", j))
        q_coef[tk].append(1.0)
        q_idx[tk].append(layout.idx("qo", j))
        q_coef[tk].append(-1.0)
    return p_idx, p_coef, q_idx, q_coef


def _exact_rows(network: Network, layout: VariableLayout, fmt: int) -> list[Row]:
    pos = network.bus_position()
    rows: list[Row] = []
    g_eff, b_eff = effective_nodal_shunts(network)

    p_idx, p_coef, q_idx, q_coef = _balance_terms(network, layout)
    for k, bus in enumerate(network.buses):
        v = layout.idx("vm", bus.id)
        rows.append(BalanceRow("balance_p", tuple(p_idx[k]), tuple(p_coef[k]),
                               v=v, v_coef=-g_eff[k], const=-bus.p_demand))
        rows.append(BalanceRow("balance_q", tuple(q_idx[k]), tuple(q_coef[k]),
                               v=v, v_coef=b_eff[k], const=-bus.q_demand))

    eqs = EXACT_BRANCH_EQS[fmt]
    for j, br in enumerate(network.branches):
        vs = layout.idx("vm", br.from_bus)
        vr = layout.idx("vm", br.to_bus)
        ts = layout.idx("va", br.from_bus)
        tr = layout.idx("va", br.to_bus)
        ps = layout.idx("ps", j)
        qs = layout.idx("qs", j)
        po = layout.idx("po", j)
        qo = layout.idx("qo", j)
        r, x = br.resistance, br.reactance
        if "sq_drop" in eqs:
            rows.append(SqDropRow("sq_drop", vs, vr, ps, qs, po, qo, r, x, j))
        if "sin_drop" in eqs:
            rows.append(SinDropRow("sin_drop", vs, vr, ts, tr, ps, qs, r, x, j))
        if "cos_drop" in eqs:
            rows.append(CosDropRow("cos_drop", vs, vr, ts, tr, ps, qs, r, x, j))
        # a zero series element collapses a loss equation to "loss = 0",
        # which the layout carries as a fixed variable; emitting the row as
        # well would leave an equality whose gradient touches only that
        # fixed variable, a structurally singular pairing
        if "loss_p" in eqs and r != 0.0:
            rows.append(LossRow("loss_p", vs, ps, qs, po, 1.0 / r, j))
        if "loss_q" in eqs and x != 0.0:
            rows.append(LossRow("loss_q", vs, ps, qs, qo, 1.0 / x, j))
        if "loss_ratio" in eqs and r != 0.0 and x != 0.0:
            # po/r - qo/x = 0: both implied squared currents must agree, so a
            # unit of violation is a unit of current mismatch rather than a
            # loss mismatch scaled by a (possibly tiny) series element; any
            # other scaling lets the row trade microscopic violations for
            # real objective through a binding capacity row
            rows.append(LinearRow("loss_ratio", (po, qo), (1.0 / r, -1.0 / x),
                                  0.0, equality=True, branch=j))
        elif "loss_ratio" in eqs and r == 0.0 and x != 0.0 and "loss_q" not in eqs:
            # limit of the loss/ratio pair as the resistance vanishes: the
            # active loss is pinned to zero by the layout and the ratio row
            # degenerates, but the reactive loss keeps its surviving
            # definition qo = x * i^2.  Dropping both rows would leave qo
            # with no defining equation -- a free reactive sink the optimizer
            # happily exploits, returning AC-inconsistent optima
            rows.append(LossRow("loss_q", vs, ps, qs, qo, 1.0 / x, j))
        elif "loss_ratio" in eqs and x == 0.0 and r != 0.0 and "loss_p" not in eqs:
            rows.append(LossRow("loss_p", vs, ps, qs, po, 1.0 / r, j))
        # angle-difference window (the angle variables are per bus, so the
        # branch window cannot be a box bound)
        rows.append(LinearRow("angle_window", (ts, tr), (1.0, -1.0), br.angle_max,
                              equality=False, branch=j))
        rows.append(LinearRow("angle_window", (ts, tr), (-1.0, 1.0), -br.angle_min,
                              equality=False, branch=j))
    return rows


def _approx_rows(network: Network, layout: VariableLayout, fmt: int) -> list[Row]:
    rows: list[Row] = []
    g_eff, b_eff = effective_nodal_shunts(network)

    p_idx, p_coef, q_idx, q_coef = _balance_terms(network, layout)
    for k, bus in enumerate(network.buses):
        v = layout.idx("vv", bus.id)
        rows.append(LinearRow("balance_p",
                              tuple(p_idx[k]) + (v,), tuple(p_coef[k]) + (-g_eff[k],),
                              bus.p_demand, equality=True))
        rows.append(LinearRow("balance_q",
                              tuple(q_idx[k]) + (v,), tuple(q_coef[k]) + (b_eff[k],),
                              bus.q_demand, equality=True))

    eqs = APPROX_BRANCH_EQS[fmt]
    for j, br in enumerate(network.branches):
        vs = layout.idx("vv", br.from_bus)
        vr = layout.idx("vv", br.to_bus)
        th = layout.idx("th", j)
        ps = layout.idx("ps", j)
        qs = layout.idx("qs", j)
        po = layout.idx("po", j)
        qo = layout.idx("qo", j)
        r, x = br.resistance, br.reactance
        if "v_drop_loss" in eqs:
            rows.append(LinearRow("v_drop_loss", (vs, vr, ps, qs, po, qo),
                                  (1.0, -1.0, -2.0 * r, -2.0 * x, r, x), 0.0,
                                  equality=True, branch=j))
        if "v_drop_mean" in eqs:
            rows.append(LinearRow("v_drop_mean", (vs, vr, ps, qs),
                                  (0.5, -0.5, -r, -x), 0.0, equality=True, branch=j))
        if "theta_link" in eqs:
            rows.append(LinearRow("theta_link", (th, ps, qs), (1.0, -x, r), 0.0,
                                  equality=True, branch=j))
        # the angle-difference variable is the drop between its terminal
        # angles, which carries loop consistency on meshed networks
        ts = layout.idx("va", br.from_bus)
        tr = layout.idx("va", br.to_bus)
        rows.append(LinearRow("angle_link", (th, ts, tr), (1.0, -1.0, 1.0), 0.0,
                              equality=True, branch=j))
        if "loss_ratio" in eqs and r != 0.0 and x != 0.0:
            # same squared-current statement as the exact family's ratio row
            rows.append(LinearRow("loss_ratio", (po, qo), (1.0 / r, -1.0 / x),
                                  0.0, equality=True, branch=j))
        elif "loss_ratio" in eqs and r == 0.0 and x != 0.0 and "cone_loss_q" not in eqs:
            # limit of the cone/ratio pair as the resistance vanishes (the
            # exact family's limit argument, relaxed): the surviving reactive
            # loss keeps its cone qo >= x * i^2; without it qo has no
            # defining row at all and becomes a free reactive sink
            rows.append(ConeRow("cone_loss_q", (ps, qs), qo, vs,
                                scale=1.0, bilinear=1.0 / x, branch=j))
        elif "loss_ratio" in eqs and x == 0.0 and r != 0.0 and "cone_loss_p" not in eqs:
            rows.append(ConeRow("cone_loss_p", (ps, qs), po, vs,
                                scale=1.0, bilinear=1.0 / r, branch=j))
        # a zero series element collapses the rotated cone to the loss
        # variable's sign bound, which the layout already carries; the
        # collapsed row would leave its slack no interior.  Like the loss and
        # ratio rows, the cones are divided through by the series element so
        # their multipliers stay on the capacity rows' squared-current scale.
        if "cone_loss_p" in eqs and r != 0.0:
            rows.append(ConeRow("cone_loss_p", (ps, qs), po, vs,
                                scale=1.0, bilinear=1.0 / r, branch=j))
        if "cone_loss_q" in eqs and x != 0.0:
            rows.append(ConeRow("cone_loss_q", (ps, qs), qo, vs,
                                scale=1.0, bilinear=1.0 / x, branch=j))
        # angle-difference feasibility cone: th^2 <= sin^2(window) * Vs * Vr
        width = max(abs(br.angle_min), abs(br.angle_max))
        rows.append(ConeRow("feas_cone", (th,), vs, vr,
                            scale=1.0, bilinear=math.sin(width) ** 2, branch=j))
    return rows


def _pin_zero_losses(layout: VariableLayout, network: Network,
                     eqs: tuple[str, ...]) -> VariableLayout:
    """Close the bounds of loss variables the equations force to zero.

    A zero series element collapses its loss equation to ``loss = 0``.
    Leaving the variable's open positivity bound to fight that pin starves
    the iterates of interior (no strictly feasible point exists), so the
    layout carries the pin as a fixed variable instead.
    """
    upper = layout.upper.copy()
    changed = False
    for j, br in enumerate(network.branches):
        zero_r, zero_x = br.resistance == 0.0, br.reactance == 0.0
        if zero_r and ("loss_p" in eqs or ("loss_ratio" in eqs and not zero_x)):
            upper[layout.idx("po", j)] = 0.0
            changed = True
        if zero_x and ("loss_q" in eqs or ("loss_ratio" in eqs and not zero_r)):
            upper[layout.idx("qo", j)] = 0.0
            changed = True
    return replace(layout, upper=upper) if changed else layout


def build_opf(network: Network, spec: ModelSpec) -> ConstraintSystem:
    """Assemble the full OPF system for one model spec.

    Includes the format's balance/drop/loss rows, ampacity rows on every rated
    branch for the requested channel, the generation-cost objective and, for
    the approximate family, the optional reactive-loss penalty.
    """
    layout = _build_layout(network, spec.family)
    if spec.family is Family.EXACT:
        rows = _exact_rows(network, layout, spec.equation_format)
        layout = _pin_zero_losses(layout, network,
                                  EXACT_BRANCH_EQS[spec.equation_format])
    else:
        rows = _approx_rows(network, layout, spec.equation_format)
        layout = _pin_zero_losses(layout, network,
                                  APPROX_BRANCH_EQS[spec.equation_format])

    system = ConstraintSystem(
        layout=layout, rows=tuple(rows), objective=None,
        family=spec.family, equation_format=spec.equation_format,
        ampacity_channel=AmpacityChannel.NONE, penalty_xi=0.0,
        network_name=network.name,
    )
    if spec.ampacity_channel is not AmpacityChannel.NONE:
        system = add_ampacity(system, network, spec.ampacity_channel)
    system = attach_objective(system, network)
    if spec.family is Family.APPROXIMATE and spec.penalty_xi > 0.0:
        # penalty_xi is stated in the data file's currency per physical unit
        # of reactive loss -- the same convention the cost coefficients use --
        # so it is mapped onto the per-unit variables exactly as the linear
        # cost coefficients are at parse time.  Stated per per-unit instead,
        # the same number buys two orders of magnitude less pressure and
        # cannot beat the shadow prices that hold the reactive slack open.
        system = attach_penalty(system, spec.penalty_xi * network.base_mva)
    return system


def add_ampacity(system: ConstraintSystem, network: Network,
                 channel: AmpacityChannel) -> ConstraintSystem:
    """Append loss-channel ampacity rows for every rated branch."""
    if not isinstance(channel, AmpacityChannel):
        raise InvalidSpec(f"bad ampacity channel {channel!r}")
    if channel is AmpacityChannel.NONE:
        return replace(system, ampacity_channel=channel)
    layout = system.layout
    v_kind = "vv" if system.family is Family.APPROXIMATE else "vm"
    new_rows = list(system.rows)
    for j, br in enumerate(network.branches):
        if br.ampacity_sq is None:
            continue
        row_channel = channel
        scale = (br.resistance if channel is AmpacityChannel.ACTIVE_LOSS
                 else br.reactance)
        if scale == 0.0:
            # with a zero series element the chosen budget is vacuous ("loss
            # <= 0" says nothing about the current), so the cap switches to
            # the other loss variable, which carries the same current content
            # scaled by the nonzero element
            row_channel = (AmpacityChannel.REACTIVE_LOSS
                           if channel is AmpacityChannel.ACTIVE_LOSS
                           else AmpacityChannel.ACTIVE_LOSS)
        expr = ampacity_expression(network, j, row_channel)
        active = row_channel is AmpacityChannel.ACTIVE_LOSS
        series = br.resistance if active else br.reactance
        new_rows.append(AmpacityRow(
            label="ampacity_p" if active else "ampacity_q",
            loss=layout.idx("po" if active else "qo", j),
            v=layout.idx(v_kind, br.from_bus),
            ps=layout.idx("ps", j),
            qs=layout.idx("qs", j),
            c_loss=1.0 / series,
            c_v=expr.c_v / series, c_ps=expr.c_ps / series,
            c_qs=expr.c_qs / series, c_const=expr.c_const / series,
            voltage_is_squared_var=(system.family is Family.APPROXIMATE),
            branch=j,
        ))
    return replace(system, rows=tuple(new_rows), layout=layout,
                   ampacity_channel=channel)


def attach_objective(system: ConstraintSystem, network: Network) -> ConstraintSystem:
    """Attach the quadratic generation-cost objective."""
    n = system.layout.n
    quad = np.zeros(n)
    lin = np.zeros(n)
    const = 0.0
    for g, gen in enumerate(network.generators):
        if gen.cost_quadratic is None or gen.cost_linear is None or gen.cost_constant is None:
            raise MissingCost(f"generator {g} at bus {gen.bus_id} has no cost data")
        i = system.layout.idx("pg", g)
        quad[i] = gen.cost_quadratic
        lin[i] = gen.cost_linear
        const += gen.cost_constant
    return replace(system, objective=QuadraticObjective(quad, lin, const))


def attach_penalty(system: ConstraintSystem, xi: float) -> ConstraintSystem:
    """Add ``xi * sum(qo)`` to the objective (approximate family only).

    The penalty drives the reactive-loss cones tight, collapsing the slack the
    plain relaxation leaves in the reactive channel.

    ``xi`` here multiplies the per-unit loss variables directly (objective
    currency per per-unit).  The model builder's ``penalty_xi`` knob, by
    contrast, is stated per physical unit like the cost coefficients and is
    rescaled by the network's base power before it reaches this function.
    """
    if system.family is not Family.APPROXIMATE:
        raise PenaltyOnExactModel("loss penalty applies to the approximate family only")
    if not (math.isfinite(xi) and xi >= 0.0):
        raise InvalidSpec(f"penalty weight must be >= 0, got {xi}")
    if system.objective is None:
        raise ModelError("attach an objective before the penalty")
    lin = system.objective.lin.copy()
    for i in system.layout.indices("qo"):
        lin[i] += xi
    return replace(system,
                   objective=replace(system.objective, lin=lin),
                   penalty_xi=xi)
