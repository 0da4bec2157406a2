"""Reader for the MATPOWER case-file subset used by the bundled test systems.

``parse_case`` lexes the file text into raw numeric tables without any unit
conversion; ``to_network`` applies the per-unit conventions (MW and MVAr
divided by the MVA base, cost coefficients rescaled onto per-unit output,
transformers folded into pi sections) and returns a validated ``Network``.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass

import numpy as np

from .network import (
    HALF_PI,
    BranchPi,
    Bus,
    BusKind,
    Generator,
    Network,
    NetworkError,
    ampacity_sq_from_rating,
    transformer_to_pi,
)

log = logging.getLogger(__name__)

BUS_COLUMNS = 13
GEN_COLUMNS = 10
BRANCH_COLUMNS = 13
GENCOST_COLUMNS = 4


class CaseError(Exception):
    """Base class for case-file rejections."""


class CaseSyntaxError(CaseError):
    """Malformed file structure.  Carries the 1-based line number."""

    def __init__(self, line: int | None, reason: str):
        self.line = line
        self.reason = reason
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}")


class MissingSection(CaseError):
    """A required ``mpc.<name>`` assignment is absent."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing section {name!r}")


class NonNumericEntry(CaseError):
    """A matrix entry failed numeric conversion."""

    def __init__(self, line: int, column: int, token: str = ""):
        self.line = line
        self.column = column
        self.token = token
        super().__init__(f"line {line}, column {column}: non-numeric entry {token!r}")


class UnsupportedCostModel(CaseError):
    """Piecewise-linear or above-quadratic polynomial cost rows."""


class PhaseShifterPresent(CaseError):
    """Branch table contains a nonzero phase-shift angle."""


class NoReferenceBus(CaseError):
    """Bus table declares no type-3 bus."""


class DisconnectedNetwork(CaseError):
    """In-service branches do not connect all buses."""


@dataclass(frozen=True)
class RawCase:
    """Verbatim numeric tables from one case file (no unit conversion).

    ``gencost`` may be ``None``; every other table is required.  Row widths
    are uniform per table and meet the minimum MATPOWER column counts.
    """

    name: str
    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    gencost: np.ndarray | None = None

    def __post_init__(self) -> None:
        for label, table, need in (("bus", self.bus, BUS_COLUMNS),
                                   ("gen", self.gen, GEN_COLUMNS),
                                   ("branch", self.branch, BRANCH_COLUMNS)):
            if table.ndim != 2 or table.shape[0] == 0:
                raise CaseSyntaxError(None, f"{label} table is empty")
            if table.shape[1] < need:
                raise CaseSyntaxError(
                    None, f"{label} table has {table.shape[1]} columns, needs >= {need}")
        if self.gencost is not None:
            if self.gencost.ndim != 2 or self.gencost.shape[1] < GENCOST_COLUMNS:
                raise CaseSyntaxError(None, "gencost table too narrow")
            if self.gencost.shape[0] != self.gen.shape[0]:
                raise CaseSyntaxError(
                    None,
                    f"gencost has {self.gencost.shape[0]} rows for "
                    f"{self.gen.shape[0]} generators (must align 1:1)")
        if not math.isfinite(self.base_mva) or self.base_mva <= 0.0:
            raise CaseSyntaxError(None, f"baseMVA must be positive, got {self.base_mva}")


_FUNCTION_RE = re.compile(r"^\s*function\s+(?:\w+\s*=\s*)?(\w+)")
_SCALAR_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*([^;'\[\]]+);")
_STRING_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*'[^']*'\s*;")
_MATRIX_OPEN_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")

_KNOWN_TABLES = ("bus", "gen", "branch", "gencost")


def _strip_comment(line: str) -> str:
    cut = line.find("%")
    return line if cut < 0 else line[:cut]


def _parse_row(body: str, lineno: int, rows: list[list[float]]) -> None:
    """Append the numeric rows contained in one matrix-body line."""
    # several ';'-terminated rows may sit on one physical line
    for chunk in body.split(";"):
        tokens = chunk.replace(",", " ").split()
        if not tokens:
            continue
        row: list[float] = []
        for col, tok in enumerate(tokens, start=1):
            try:
                row.append(float(tok))
            except ValueError:
                raise NonNumericEntry(lineno, col, tok) from None
        rows.append(row)


def parse_case(text: str) -> RawCase:
    """Lex MATPOWER case text into a :class:`RawCase`.

    Recognizes the ``function mpc = <name>`` header, the ``mpc.baseMVA``
    scalar, and the bus/gen/branch/gencost matrices.  Unknown ``mpc.*``
    assignments are skipped.  Raises :class:`CaseSyntaxError`,
    :class:`NonNumericEntry`, or :class:`MissingSection`.
    """
    name = ""
    base_mva: float | None = None
    tables: dict[str, list[list[float]]] = {}
    current: str | None = None  # table currently being read
    skipping = False  # inside an unrecognized matrix

    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line).strip()
        if not line:
            continue

        if current is not None or skipping:
            body, closed = line, False
            if "]" in line:
                body = line[:line.index("]")]
                closed = True
            if current is not None:
                _parse_row(body, lineno, tables[current])
            if closed:
                current = None
                skipping = False
            continue

        m = _FUNCTION_RE.match(line)
        if m:
            name = m.group(1)
            continue
        if _STRING_RE.match(line):
            continue
        m = _MATRIX_OPEN_RE.match(line)
        if m:
            target, rest = m.group(1), m.group(2)
            if target in _KNOWN_TABLES:
                if target in tables:
                    raise CaseSyntaxError(lineno, f"duplicate section mpc.{target}")
                tables[target] = []
                current = target
            else:
                skipping = True
                current = None
            if "]" in rest:
                body = rest[:rest.index("]")]
                if current is not None:
                    _parse_row(body, lineno, tables[current])
                current = None
                skipping = False
            elif current is not None and rest.strip():
                _parse_row(rest, lineno, tables[current])
            continue
        m = _SCALAR_RE.match(line)
        if m:
            if m.group(1) == "baseMVA":
                tok = m.group(2).strip()
                try:
                    base_mva = float(tok)
                except ValueError:
                    raise CaseSyntaxError(lineno, f"baseMVA is not numeric: {tok!r}") from None
            continue
        raise CaseSyntaxError(lineno, f"unrecognized statement: {line[:60]!r}")

    if current is not None or skipping:
        raise CaseSyntaxError(None, "unterminated matrix (missing '];')")
    if base_mva is None:
        raise MissingSection("baseMVA")
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise MissingSection(required)

    arrays: dict[str, np.ndarray] = {}
    for label, rows in tables.items():
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise CaseSyntaxError(None, f"{label} table has ragged rows (widths {sorted(widths)})")
        arrays[label] = np.array(rows, dtype=float)

    return RawCase(name=name, base_mva=base_mva,
                   bus=arrays["bus"], gen=arrays["gen"], branch=arrays["branch"],
                   gencost=arrays.get("gencost"))


_BUS_KINDS = {1.0: BusKind.PQ, 2.0: BusKind.PV, 3.0: BusKind.REFERENCE, 4.0: BusKind.PQ}


def _cost_coefficients(row: np.ndarray, base_mva: float, gen_index: int) -> tuple[float, float, float]:
    """Per-unit quadratic cost coefficients from one gencost row."""
    model = row[0]
    if model != 2.0:
        raise UnsupportedCostModel(
            f"gencost row {gen_index}: model {model:g} (only polynomial model 2 supported)")
    ncoef = int(row[3])
    if ncoef != row[3] or ncoef < 1:
        raise UnsupportedCostModel(f"gencost row {gen_index}: bad coefficient count {row[3]:g}")
    if ncoef > 3:
        raise UnsupportedCostModel(
            f"gencost row {gen_index}: polynomial degree {ncoef - 1} > 2 not supported")
    if row.shape[0] < 4 + ncoef:
        raise CaseSyntaxError(None, f"gencost row {gen_index}: fewer than {ncoef} coefficients")
    coeffs = [0.0] * (3 - ncoef) + list(row[4:4 + ncoef])
    c2, c1, c0 = coeffs
    # file coefficients act on MW output; rescale onto per-unit output
    return c2 * base_mva * base_mva, c1 * base_mva, c0


def to_network(raw: RawCase,
               cost_default: tuple[float, float, float] | None = None) -> Network:
    """Convert a raw case to a validated per-unit :class:`Network`.

    ``cost_default`` supplies ``(c2, c1, c0)`` per-MW coefficients applied to
    every generator when the file has no gencost table.
    """
    base = raw.base_mva

    buses = []
    for r, row in enumerate(raw.bus):
        kind = _BUS_KINDS.get(row[1])
        if kind is None:
            raise CaseSyntaxError(None, f"bus row {r}: unknown bus type {row[1]:g}")
        v_max = row[11] if row[11] > 0.0 else 1.1
        v_min = row[12] if row[12] > 0.0 else 0.9
        if row[2] < 0.0 or row[3] < 0.0:
            log.warning("bus %g: negative demand (%g MW, %g MVAr) accepted as injection",
                        row[0], row[2], row[3])
        buses.append(Bus(
            id=int(row[0]), kind=kind,
            p_demand=row[2] / base, q_demand=row[3] / base,
            shunt_conductance=row[4] / base, shunt_susceptance=row[5] / base,
            v_min=v_min, v_max=v_max, base_kv=row[9],
        ))
    if not any(b.kind is BusKind.REFERENCE for b in buses):
        raise NoReferenceBus("bus table has no type-3 bus")

    if raw.gencost is None and cost_default is None:
        raise MissingSection("gencost")

    generators = []
    for g, row in enumerate(raw.gen):
        if row[7] <= 0.0:  # status
            continue
        if raw.gencost is not None:
            c2, c1, c0 = _cost_coefficients(raw.gencost[g], base, g)
        else:
            d2, d1, d0 = cost_default
            c2, c1, c0 = d2 * base * base, d1 * base, d0
        generators.append(Generator(
            bus_id=int(row[0]),
            p_min=row[9] / base, p_max=row[8] / base,
            q_min=row[4] / base, q_max=row[3] / base,
            cost_quadratic=c2, cost_linear=c1, cost_constant=c0,
        ))

    branches = []
    for b, row in enumerate(raw.branch):
        if row[10] <= 0.0:  # status
            continue
        if row[9] != 0.0:
            raise PhaseShifterPresent(
                f"branch row {b} ({row[0]:g}-{row[1]:g}): phase shift {row[9]:g} degrees")
        tap = row[8] if row[8] != 0.0 else 1.0
        pi = transformer_to_pi(row[2], row[3], row[4], tap_ratio=tap, phase_shift=0.0)
        angle_min, angle_max = _angle_window(row[11], row[12], b)
        branches.append(BranchPi(
            from_bus=int(row[0]), to_bus=int(row[1]),
            resistance=pi.resistance, reactance=pi.reactance,
            shunt_conductance_from=pi.shunt_conductance_from,
            shunt_susceptance_from=pi.shunt_susceptance_from,
            shunt_conductance_to=pi.shunt_conductance_to,
            shunt_susceptance_to=pi.shunt_susceptance_to,
            ampacity_sq=ampacity_sq_from_rating(row[5], base),
            angle_min=angle_min, angle_max=angle_max,
        ))

    try:
        return Network(base_mva=base, buses=tuple(buses), generators=tuple(generators),
                       branches=tuple(branches), name=raw.name)
    except NetworkError as exc:
        if "disconnected" in str(exc):
            raise DisconnectedNetwork(str(exc)) from exc
        raise


def _angle_window(angmin_deg: float, angmax_deg: float, row: int) -> tuple[float, float]:
    """Angle-difference window in radians, clipped to (-pi/2, pi/2).

    The MATPOWER convention ``angmin = angmax = 0`` means unconstrained.
    """
    if angmin_deg == 0.0 and angmax_deg == 0.0:
        return -HALF_PI, HALF_PI
    lo = max(math.radians(angmin_deg), -HALF_PI)
    hi = min(math.radians(angmax_deg), HALF_PI)
    if not lo < hi:
        raise CaseSyntaxError(None, f"branch row {row}: empty angle window after clipping")
    return lo, hi


def load_case(path, cost_default: tuple[float, float, float] | None = None) -> Network:
    """Parse and convert a case file from disk."""
    with open(path, "r") as fh:
        raw = parse_case(fh.read())
    return to_network(raw, cost_default=cost_default)
