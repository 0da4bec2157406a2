"""meshflow: branch-flow optimal power flow models for meshed networks.

Builds the exact (nonconvex) and approximate (convex relaxation) branch-flow
OPF families in six interchangeable equation formats each, solves them with a
built-in primal-dual interior-point method, and audits solutions against
independent nodal-admittance physics.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .analysis import (GapReport, MeasurableFlows, PhysicalSolution,
                       build_ybus, compute_gaps, cross_format_residuals,
                       measurable_flows, recover_solution, ybus_oracle)
from .ipm import (DerivativeReport, EmptyInterior, SolveStatus, SolverOptions,
                  SolverResult, derivative_check, flat_start, solve)
from .matpower import (CaseError, RawCase, load_case, parse_case, to_network)
from .model import (AmpacityChannel, ConstraintSystem, Family, InvalidSpec,
                    MissingCost, ModelError, ModelSpec, PenaltyOnExactModel,
                    Solution, add_ampacity, attach_objective, attach_penalty,
                    build_opf)
from .network import (BranchPi, Bus, BusKind, Generator, Network,
                      NetworkError, ampacity_sq_from_rating, build_incidence,
                      transformer_to_pi)

__all__ = [
    "__version__",
    # network
    "Bus", "BusKind", "Generator", "BranchPi", "Network", "NetworkError",
    "build_incidence", "transformer_to_pi", "ampacity_sq_from_rating",
    # parser
    "RawCase", "CaseError", "parse_case", "to_network", "load_case",
    # model
    "Family", "AmpacityChannel", "ModelSpec", "ConstraintSystem", "Solution",
    "ModelError", "InvalidSpec", "MissingCost", "PenaltyOnExactModel",
    "build_opf", "add_ampacity", "attach_objective", "attach_penalty",
    # solver
    "SolverOptions", "SolverResult", "SolveStatus", "EmptyInterior",
    "DerivativeReport", "solve", "flat_start", "derivative_check",
    # analysis
    "GapReport", "MeasurableFlows", "PhysicalSolution", "compute_gaps",
    "measurable_flows", "recover_solution", "cross_format_residuals",
    "build_ybus", "ybus_oracle",
]
