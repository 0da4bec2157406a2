"""Command-line interface: solve cases, sweep formats, and audit gaps.

Report contract: every run serializes to the same flat record
(case, family, format, objective, status, iterations, wall_time_s,
gap_po_max, gap_qo_max, ybus_mismatch_max, ampacity_violations), emitted as
JSON ({tool_version, case, runs: [...]}) or CSV with a matching header.  The
same number prints identically in both (shortest round-trip repr), so
downstream diffing never sees formatting noise.

Exit codes: 0 success, 1 input/usage error, 2 solver non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from . import __version__, cases
from .analysis import compute_gaps, measurable_flows, recover_solution, ybus_oracle
from .ipm import SolveStatus, SolverOptions, solve
from .matpower import CaseError, load_case
from .model import AmpacityChannel, Family, ModelError, ModelSpec, build_opf
from .network import NetworkError

logger = logging.getLogger(__name__)

REPORT_FIELDS = ("case", "family", "format", "objective", "status",
                 "iterations", "wall_time_s", "gap_po_max", "gap_qo_max",
                 "ybus_mismatch_max", "ampacity_violations")


class InputError(Exception):
    """Anything wrong with user input; maps to exit code 1."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved CLI options for one invocation."""

    case_path: str
    family: Family
    format_spec: str            # "all" or "1".."12"
    penalty_xi: float
    tolerance: float
    max_iter: int
    out_format: str             # "json" | "csv"
    out_path: str | None
    ampacity_enabled: bool
    seed: int | None
    currency: str = "$"


@dataclass(frozen=True)
class RunReport:
    """One solved format, flattened for serialization."""

    case: str
    family: str
    format: int
    objective: float
    status: str
    iterations: int
    wall_time_s: float
    gap_po_max: float
    gap_qo_max: float
    ybus_mismatch_max: float
    ampacity_violations: int

    def to_record(self) -> dict:
        return {name: getattr(self, name) for name in REPORT_FIELDS}


def format_index_to_spec(index: int, family: Family,
                         ampacity_enabled: bool) -> tuple[int, AmpacityChannel]:
    """OPF format 1-12 -> (equation format 1-6, ampacity channel)."""
    if index not in range(1, 13):
        raise InputError(f"format must be 1..12 or 'all', got {index}")
    eq_format = (index - 1) % 6 + 1
    if not ampacity_enabled:
        return eq_format, AmpacityChannel.NONE
    channel = (AmpacityChannel.ACTIVE_LOSS if index <= 6
               else AmpacityChannel.REACTIVE_LOSS)
    return eq_format, channel


def _resolve_case(path_arg: str):
    """Load from disk, falling back to the bundled cases by name."""
    p = Path(path_arg)
    if p.exists():
        return load_case(p)
    stem = p.stem
    if p.parent == Path(".") and stem in cases.available():
        return load_case(cases.case_path(stem))
    raise InputError(f"case file not found: {path_arg}")


def run_format(network, case_name: str, family: Family, index: int,
               penalty_xi: float, options: SolverOptions,
               ampacity_enabled: bool) -> RunReport:
    """Build, solve and audit one OPF format; never raises on solver failure."""
    eq_format, channel = format_index_to_spec(index, family, ampacity_enabled)
    t0 = time.perf_counter()
    spec = ModelSpec(family=family, equation_format=eq_format,
                     ampacity_channel=channel,
                     penalty_xi=penalty_xi if family is Family.APPROXIMATE else 0.0)
    system = build_opf(network, spec)
    t_build = time.perf_counter() - t0

    result = solve(system, options=options)
    solution = system.solution(result.primal)

    gaps = compute_gaps(system, solution, network)
    flows = measurable_flows(solution, network)
    mismatch = ybus_oracle(solution, network, system=system)
    logger.debug("case %s format %d: build %.3fs solve %.3fs",
                 case_name, index, t_build, result.wall_time_s)
    return RunReport(
        case=case_name,
        family=family.value,
        format=index,
        objective=float(result.objective),
        status=result.status.value,
        iterations=result.iterations,
        wall_time_s=float(t_build + result.wall_time_s),
        gap_po_max=float(gaps.gap_po_max),
        gap_qo_max=float(gaps.gap_qo_max),
        ybus_mismatch_max=float(mismatch.max()) if mismatch.size else 0.0,
        ampacity_violations=flows.violation_count,
    )


# -- serialization -----------------------------------------------------------


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_json(payload: dict) -> str:
    return json.dumps(payload, indent=2) + "\n"


def render_csv(records: list[dict], fieldnames: tuple[str, ...]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fieldnames)
    for rec in records:
        writer.writerow([_csv_cell(rec[name]) for name in fieldnames])
    return buf.getvalue()


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def _summarize(reports: list[RunReport], currency: str) -> None:
    for rep in reports:
        print(f"  format {rep.format:2d} [{rep.family}] status={rep.status} "
              f"objective={currency}{rep.objective:.2f} "
              f"gap_po_max={rep.gap_po_max:.3e} gap_qo_max={rep.gap_qo_max:.3e}",
              file=sys.stderr)


# -- commands ----------------------------------------------------------------


def _requested_formats(config: RunConfig) -> list[int]:
    if config.format_spec == "all":
        return list(range(1, 13))
    try:
        index = int(config.format_spec)
    except ValueError:
        raise InputError(f"format must be 1..12 or 'all', "
                         f"got {config.format_spec!r}") from None
    if index not in range(1, 13):
        raise InputError(f"format must be 1..12 or 'all', got {index}")
    return [index]


def _check_penalty(config: RunConfig) -> None:
    if config.penalty_xi != 0.0 and config.family is not Family.APPROXIMATE:
        raise InputError("--penalty applies to the approximate family only")


def _solver_options(config: RunConfig) -> SolverOptions:
    return SolverOptions(tol_kkt=config.tolerance, max_iter=config.max_iter)


def cmd_solve(config: RunConfig) -> int:
    _check_penalty(config)
    network = _resolve_case(config.case_path)
    case_name = network.name or Path(config.case_path).stem
    options = _solver_options(config)
    reports = [run_format(network, case_name, config.family, idx,
                          config.penalty_xi, options, config.ampacity_enabled)
               for idx in _requested_formats(config)]
    _summarize(reports, config.currency)

    payload = {"tool_version": __version__, "case": case_name,
               "runs": [r.to_record() for r in reports]}
    if config.out_format == "json":
        _emit(render_json(payload), config.out_path)
    else:
        _emit(render_csv([r.to_record() for r in reports], REPORT_FIELDS),
              config.out_path)
    ok = all(r.status == SolveStatus.OPTIMAL.value for r in reports)
    return 0 if ok else 2


def cmd_compare(config: RunConfig) -> int:
    _check_penalty(config)
    network = _resolve_case(config.case_path)
    case_name = network.name or Path(config.case_path).stem
    options = _solver_options(config)
    reports = [run_format(network, case_name, config.family, idx,
                          config.penalty_xi, options, config.ampacity_enabled)
               for idx in range(1, 13)]
    _summarize(reports, config.currency)

    if config.family is Family.EXACT:
        optimal = [r for r in reports if r.status == SolveStatus.OPTIMAL.value]
        for i, a in enumerate(optimal):
            for b in optimal[i + 1:]:
                lo = min(abs(a.objective), abs(b.objective))
                if lo > 0 and abs(a.objective - b.objective) / lo > 0.005:
                    print(f"note: formats {a.format} and {b.format} reach "
                          f"objectives differing by "
                          f"{abs(a.objective - b.objective) / lo:.2%} "
                          "(distinct local optima)", file=sys.stderr)

    payload = {"tool_version": __version__, "case": case_name,
               "runs": [r.to_record() for r in reports]}
    if config.out_format == "json":
        _emit(render_json(payload), config.out_path)
    else:
        _emit(render_csv([r.to_record() for r in reports], REPORT_FIELDS),
              config.out_path)
    any_ok = any(r.status == SolveStatus.OPTIMAL.value for r in reports)
    return 0 if any_ok else 2


def cmd_gaps(config: RunConfig, penalty_sweep: list[float]) -> int:
    if config.family is not Family.APPROXIMATE:
        raise InputError("gaps requires --family approx")
    network = _resolve_case(config.case_path)
    case_name = network.name or Path(config.case_path).stem
    options = _solver_options(config)

    sweeps = []
    for xi in penalty_sweep:
        reports = [run_format(network, case_name, Family.APPROXIMATE, idx,
                              xi, options, config.ampacity_enabled)
                   for idx in _requested_formats(config)]
        print(f"penalty xi={xi:g}:", file=sys.stderr)
        _summarize(reports, config.currency)
        sweeps.append({"penalty_xi": xi,
                       "runs": [r.to_record() for r in reports]})

    if config.out_format == "json":
        payload = {"tool_version": __version__, "case": case_name,
                   "sweeps": sweeps}
        _emit(render_json(payload), config.out_path)
    else:
        fieldnames = ("penalty_xi",) + REPORT_FIELDS
        records = []
        for sweep in sweeps:
            for rec in sweep["runs"]:
                records.append({"penalty_xi": sweep["penalty_xi"], **rec})
        _emit(render_csv(records, fieldnames), config.out_path)

    any_ok = any(rec["status"] == SolveStatus.OPTIMAL.value
                 for sweep in sweeps for rec in sweep["runs"])
    return 0 if any_ok else 2


# -- argument parsing --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit 2; the report contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="meshflow",
                     description="Branch-flow OPF models for meshed networks: "
                                 "build, solve, audit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--case", required=True,
                       help="MATPOWER case file path, or a bundled name "
                            f"({', '.join(cases.available())})")
        p.add_argument("--family", choices=("exact", "approx"), default="exact")
        p.add_argument("--format", default="1", dest="format_spec",
                       help="OPF format 1..12 or 'all' (1-6 active-loss "
                            "ampacity, 7-12 reactive-loss)")
        p.add_argument("--penalty", default="0",
                       help="reactive-loss penalty weight (approx family); "
                            "the gaps command accepts a comma-separated sweep")
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--max-iter", type=int, default=200)
        p.add_argument("--no-ampacity", action="store_true",
                       help="drop ampacity rows from every format")
        p.add_argument("--out", default=None, help="report path (default stdout)")
        p.add_argument("--format-out", choices=("json", "csv"), default="json")
        p.add_argument("--seed", type=int, default=None,
                       help="seed recorded for randomized fixtures; solves "
                            "are deterministic and ignore it")
        p.add_argument("--currency", default="$")
        p.add_argument("-v", "--verbose", action="store_true")

    for name in ("solve", "compare", "gaps"):
        add_common(sub.add_parser(name))
    return parser


def _config_from_args(args: argparse.Namespace, penalty_xi: float) -> RunConfig:
    return RunConfig(
        case_path=args.case,
        family=Family.EXACT if args.family == "exact" else Family.APPROXIMATE,
        format_spec=args.format_spec,
        penalty_xi=penalty_xi,
        tolerance=args.tol,
        max_iter=args.max_iter,
        out_format=args.format_out,
        out_path=args.out,
        ampacity_enabled=not args.no_ampacity,
        seed=args.seed,
        currency=args.currency,
    )


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None:
        logger.info("seed recorded: %d", args.seed)

    try:
        if args.command == "gaps":
            try:
                sweep = [float(tok) for tok in str(args.penalty).split(",") if tok]
            except ValueError:
                raise InputError(
                    f"bad penalty sweep {args.penalty!r}") from None
            if not sweep:
                sweep = [0.0, 0.3]
            config = _config_from_args(args, sweep[0])
            return cmd_gaps(config, sweep)
        try:
            penalty = float(args.penalty)
        except ValueError:
            raise InputError(f"bad penalty value {args.penalty!r}") from None
        config = _config_from_args(args, penalty)
        if args.command == "solve":
            return cmd_solve(config)
        return cmd_compare(config)
    except (InputError, CaseError, NetworkError, ModelError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
