"""Primal-dual interior-point solver for the branch-flow OPF systems.

The solver handles the general smooth program

    min f(x)   s.t.  c_E(x) = 0,  c_I(x) <= 0,  lo <= x <= hi

with a slack reformulation of the inequalities (c_I(x) + s = 0, s >= 0), a
log barrier on slacks and finite bounds, a monotone barrier-parameter
schedule, an l1-penalty merit line search, and inertia-corrected Newton steps
on the symmetric primal-dual KKT system.  Factorization uses LAPACK's
Bunch-Kaufman routines; the block inertia is read off the pivot structure so
directions are only accepted when the reduced Hessian is positive definite.

No randomness anywhere: repeated solves of the same system from the same
start are bitwise identical.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs

from .model import ConstraintSystem, ModelError

logger = logging.getLogger(__name__)

_SCALE_CAP = 100.0  # residual scaling follows the usual s_max=100 convention


class SolverError(Exception):
    """Solver-level failure that is not a termination status."""


class EmptyInterior(SolverError):
    """A variable box has no interior, so no barrier start exists."""


class SolveStatus(enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITERATIONS = "MaxIterations"
    INFEASIBLE_DETECTED = "InfeasibleDetected"
    NUMERIC_FAILURE = "NumericFailure"


@dataclass(frozen=True)
class SolverOptions:
    """Interior-point tuning knobs (defaults are fine for the bundled cases)."""

    tol_kkt: float = 1e-8
    max_iter: int = 200
    mu_init: float = 0.1
    mu_shrink: float = 0.2
    mu_superlinear: float = 1.5
    mu_min: float = 1e-11
    kappa_eps: float = 10.0
    fraction_to_boundary: float = 0.995
    inertia_regularization_init: float = 1e-8
    inertia_regularization_max: float = 1e40
    dual_regularization: float = 1e-8
    armijo_eta: float = 1e-4
    min_step: float = 1e-12
    kappa_sigma: float = 1e10
    slack_floor: float = 1e-4
    infeasibility_threshold: float = 1e-6

    def __post_init__(self) -> None:
        if not (0.0 < self.tol_kkt < 1.0):
            raise ValueError(f"tol_kkt out of range: {self.tol_kkt}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not (0.0 < self.mu_shrink < 1.0):
            raise ValueError("mu_shrink must lie in (0, 1)")
        if not (0.0 < self.fraction_to_boundary < 1.0):
            raise ValueError("fraction_to_boundary must lie in (0, 1)")


@dataclass(frozen=True)
class SolverResult:
    """Termination state plus everything needed to re-check optimality."""

    status: SolveStatus
    primal: np.ndarray
    objective: float
    iterations: int
    kkt_residuals: tuple[float, float, float]  # (dual, primal, complementarity)
    wall_time_s: float
    mu_sequence: tuple[float, ...]
    message: str
    duals_eq: np.ndarray
    duals_ineq: np.ndarray
    duals_lower: np.ndarray
    duals_upper: np.ndarray
    slacks: np.ndarray
    objective_scale: float


# -- starting points ---------------------------------------------------------


def flat_start(system: ConstraintSystem) -> np.ndarray:
    """Electrically flat, strictly interior starting point.

    Voltages at 1 (magnitude or squared), angles at 0, generator setpoints at
    the midpoint of their boxes, and small positive seeds on flows and losses
    so the loss/cone rows are not started exactly on their vertex.
    """
    layout = system.layout
    lo, hi = layout.lower, layout.upper
    x = np.empty(layout.n)
    for i, kind in enumerate(layout.kinds):
        a, b = lo[i], hi[i]
        if a == b:
            if kind in ("va", "po", "qo"):
                x[i] = a  # pinned reference angle / structurally zero loss
                continue
            raise EmptyInterior(
                f"variable {layout.describe(i)} has an empty box [{a}, {b}]")
        if kind in ("vm", "vv"):
            x[i] = 1.0 if a < 1.0 < b else 0.5 * (a + b)
        elif kind in ("va", "th"):
            x[i] = 0.0 if a < 0.0 < b else 0.5 * (a + b)
        elif kind in ("pg", "qg"):
            if math.isfinite(a) and math.isfinite(b):
                x[i] = 0.5 * (a + b)
            elif math.isfinite(a):
                x[i] = a + 1.0
            elif math.isfinite(b):
                x[i] = b - 1.0
            else:
                x[i] = 0.0
        elif kind in ("ps", "qs"):
            x[i] = 1e-4
        else:  # po, qo: seed strictly inside the signed half-line
            if a >= 0.0:
                x[i] = a + 1e-4
            elif b <= 0.0:
                x[i] = b - 1e-4
            else:
                x[i] = 1e-4
    return x


def push_interior(x: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Project a user start strictly inside the bounds (fixed entries pinned)."""
    x = np.array(x, dtype=float, copy=True)
    if x.shape != lower.shape:
        raise ValueError(f"start has shape {x.shape}, expected {lower.shape}")
    for i in range(x.size):
        a, b = lower[i], upper[i]
        if a == b:
            x[i] = a
            continue
        if math.isfinite(a) and math.isfinite(b):
            pad = min(1e-4 * max(1.0, abs(a), abs(b)), 0.25 * (b - a))
            x[i] = min(max(x[i], a + pad), b - pad)
        elif math.isfinite(a):
            x[i] = max(x[i], a + 1e-4 * max(1.0, abs(a)))
        elif math.isfinite(b):
            x[i] = min(x[i], b - 1e-4 * max(1.0, abs(b)))
    return x


# -- constraint evaluation ---------------------------------------------------


def _residuals(rows, x: np.ndarray) -> np.ndarray:
    return np.array([row.residual(x) for row in rows], float)


def _jacobian(rows, x: np.ndarray, n: int) -> np.ndarray:
    J = np.zeros((len(rows), n))
    for k, row in enumerate(rows):
        idx, val = row.gradient(x)
        for i, v in zip(idx, val):
            J[k, i] += v
    return J


def _lagrangian_hessian(system: ConstraintSystem, x: np.ndarray,
                        y_eq: np.ndarray, y_ineq: np.ndarray,
                        fscale: float) -> np.ndarray:
    n = system.layout.n
    W = np.zeros((n, n))
    d = np.arange(n)
    W[d, d] = fscale * system.objective.hessian_diag()
    for rows, mult in ((system.equality_rows(), y_eq),
                       (system.inequality_rows(), y_ineq)):
        for k, row in enumerate(rows):
            y = mult[k]
            if y == 0.0:
                continue
            for i, j, v in row.hessian(x):
                W[i, j] += y * v
                if i != j:
                    W[j, i] += y * v
    return W


# -- KKT factorization -------------------------------------------------------


def _factor_and_inertia(K: np.ndarray):
    """Bunch-Kaufman factorization plus inertia (n_pos, n_neg, n_zero)."""
    sytrf, = get_lapack_funcs(("sytrf",), (K,))
    ldu, ipiv, info = sytrf(K, lower=1)
    if info > 0:
        return None, None, (0, 0, 1)  # singular pivot block
    if info < 0:
        raise SolverError(f"sytrf failed with illegal argument {-info}")
    pos = neg = zero = 0
    N = K.shape[0]
    k = 0
    while k < N:
        if ipiv[k] > 0:
            d = ldu[k, k]
            if d > 0.0:
                pos += 1
            elif d < 0.0:
                neg += 1
            else:
                zero += 1
            k += 1
        else:
            a, b, c = ldu[k, k], ldu[k + 1, k + 1], ldu[k + 1, k]
            det = a * b - c * c
            if det < 0.0:
                pos += 1
                neg += 1
            elif det > 0.0:
                if a + b > 0.0:
                    pos += 2
                else:
                    neg += 2
            else:
                zero += 2
            k += 2
    return ldu, ipiv, (pos, neg, zero)


def _backsolve(ldu: np.ndarray, ipiv: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    sytrs, = get_lapack_funcs(("sytrs",), (ldu,))
    sol, info = sytrs(ldu, ipiv, rhs, lower=1)
    if info != 0:
        raise SolverError(f"sytrs failed with info={info}")
    return sol


def _max_step(values: np.ndarray, deltas: np.ndarray, tau: float) -> float:
    """Largest alpha in (0, 1] keeping values + alpha*deltas >= (1-tau)*values."""
    alpha = 1.0
    neg = deltas < 0.0
    if np.any(neg):
        alpha = min(alpha, float(np.min(-tau * values[neg] / deltas[neg])))
    return alpha


# -- main solver -------------------------------------------------------------


def solve(system: ConstraintSystem, x0: np.ndarray | None = None,
          options: SolverOptions | None = None) -> SolverResult:
    """Run the interior-point method on an assembled system."""
    opts = options or SolverOptions()
    if system.objective is None:
        raise ModelError("system has no objective attached")
    t_start = time.perf_counter()

    layout = system.layout
    n = layout.n
    lo = np.asarray(layout.lower, float)
    hi = np.asarray(layout.upper, float)
    fixed = lo == hi
    free = ~fixed
    ilo = np.flatnonzero(np.isfinite(lo) & free)
    ihi = np.flatnonzero(np.isfinite(hi) & free)

    eq_rows = system.equality_rows()
    ineq_rows = system.inequality_rows()
    m_eq, m_ineq = len(eq_rows), len(ineq_rows)

    if x0 is None:
        x = flat_start(system)
    else:
        x = push_interior(x0, lo, hi)
    x[fixed] = lo[fixed]

    obj = system.objective
    fscale = _SCALE_CAP / max(_SCALE_CAP, float(np.max(np.abs(obj.gradient(x)))))

    mu = opts.mu_init
    mu_sequence = [mu]

    c_ineq = _residuals(ineq_rows, x)
    s = np.maximum(-c_ineq, opts.slack_floor)
    y_eq = np.zeros(m_eq)
    # y_ineq is the (sign-free) dual of c_I + s = 0; z_s the positive dual
    # of the slack bound s >= 0.  They agree only at a KKT point.
    z_s = mu / s if m_ineq else np.zeros(0)
    y_ineq = z_s.copy()
    z_lo = np.zeros(n)
    z_hi = np.zeros(n)
    z_lo[ilo] = mu / (x[ilo] - lo[ilo])
    z_hi[ihi] = mu / (hi[ihi] - x[ihi])

    nu = 1.0                 # merit penalty weight
    delta_w_last = 0.0       # last successful Hessian regularization
    forced_delta = 0.0       # bump requested by a failed line search
    fail_count = 0
    stall_count = 0          # consecutive accepted steps of negligible size
    rescue_count = 0         # recovery recenterings spent so far
    progress_best = math.inf  # best overall KKT error seen so far
    progress_iter = 0        # iteration that last halved progress_best
    status = SolveStatus.MAX_ITERATIONS
    message = "iteration limit reached"
    iterations = 0
    kkt_triplet = (math.inf, math.inf, math.inf)

    def recenter(reason: str) -> None:
        """Back the barrier off and re-inflate slacks after a jam.

        A converging run can wedge itself into a constraint corner while mu
        is already tiny: slacks collapse, the fraction-to-boundary rule caps
        the step near zero, and the stall looks like local infeasibility even
        when the problem is perfectly feasible.  Raising mu restores the
        barrier's push away from the boundary so the iterate can slide around
        the corner; the escalating value makes each retry more forceful.
        """
        nonlocal mu, s, z_s, y_ineq, nu
        nonlocal fail_count, stall_count, delta_w_last, forced_delta
        mu = min(opts.mu_init, 10.0 ** (rescue_count - 4))
        mu_sequence.append(mu)
        # a jammed iterate can sit exactly on a bound; every barrier
        # quantity divides by the gap, so lift it strictly inside first
        if ilo.size:
            b = lo[ilo]
            x[ilo] = np.maximum(x[ilo], b + 1e-12 * (1.0 + np.abs(b)))
        if ihi.size:
            b = hi[ihi]
            x[ihi] = np.minimum(x[ihi], b - 1e-12 * (1.0 + np.abs(b)))
        if m_ineq:
            s = np.maximum(-_residuals(ineq_rows, x), mu)
            z_s = mu / s
            y_ineq = z_s.copy()
        dl = x[ilo] - lo[ilo]
        dh = hi[ihi] - x[ihi]
        ks = opts.kappa_sigma
        z_lo[ilo] = np.clip(z_lo[ilo], mu / (ks * dl), ks * mu / dl)
        z_hi[ihi] = np.clip(z_hi[ihi], mu / (ks * dh), ks * mu / dh)
        nu = 1.0
        fail_count = 0
        stall_count = 0
        delta_w_last = 0.0
        forced_delta = 0.0
        logger.debug("recentering #%d (%s): mu raised to %.1e",
                     rescue_count, reason, mu)

    def kkt_errors(dual_vec, c_eq, cis, comp_target, grad_scale):
        """(dual, primal, complementarity), scaled by the gradient size."""
        s_d = s_c = max(1.0, grad_scale)
        dual = float(np.max(np.abs(dual_vec))) if n else 0.0
        if m_ineq:
            # stationarity in the slack direction: constraint dual must meet
            # the slack-bound dual
            dual = max(dual, float(np.max(np.abs(y_ineq - z_s))))
        primal = 0.0
        if m_eq:
            primal = max(primal, float(np.max(np.abs(c_eq))))
        if m_ineq:
            primal = max(primal, float(np.max(np.abs(cis))))
        comp = 0.0
        if m_ineq:
            comp = max(comp, float(np.max(np.abs(s * z_s - comp_target))))
        if ilo.size:
            comp = max(comp, float(np.max(np.abs((x[ilo] - lo[ilo]) * z_lo[ilo]
                                                 - comp_target))))
        if ihi.size:
            comp = max(comp, float(np.max(np.abs((hi[ihi] - x[ihi]) * z_hi[ihi]
                                                 - comp_target))))
        return dual / s_d, primal, comp / s_c

    for it in range(1, opts.max_iter + 1):
        iterations = it

        f_grad_s = fscale * obj.gradient(x)
        c_eq = _residuals(eq_rows, x)
        J_eq = _jacobian(eq_rows, x, n)
        c_ineq = _residuals(ineq_rows, x)
        J_ineq = _jacobian(ineq_rows, x, n)
        cis = c_ineq + s

        dual_vec = f_grad_s + J_eq.T @ y_eq + J_ineq.T @ y_ineq - z_lo + z_hi
        dual_vec[fixed] = 0.0
        grad_scale = float(np.max(np.abs(f_grad_s))) if n else 1.0

        e_dual0, e_primal, e_comp0 = kkt_errors(dual_vec, c_eq, cis, 0.0,
                                                grad_scale)
        kkt_triplet = (e_dual0, e_primal, e_comp0)
        # declare optimality only once the barrier itself is small, so active
        # inequality slacks (the reported gaps) are driven far below tol
        if (max(kkt_triplet) <= opts.tol_kkt
                and mu <= max(opts.mu_min, 0.1 * opts.tol_kkt)):
            status = SolveStatus.OPTIMAL
            message = "scaled KKT error below tolerance"
            break

        # a healthy run halves its KKT error much faster than this; a crawl
        # (step sizes pinned near zero by the boundary while the barrier is
        # already far ahead of the iterate) can only be cured by recentering
        if max(kkt_triplet) < 0.5 * progress_best:
            progress_best = max(kkt_triplet)
            progress_iter = it
        elif it - progress_iter >= 30 and rescue_count < 3:
            rescue_count += 1
            recenter("no progress over 30 iterations")
            progress_best = math.inf
            progress_iter = it
            continue

        while mu > opts.mu_min:
            ed, ep, ec = kkt_errors(dual_vec, c_eq, cis, mu, grad_scale)
            if max(ed, ep, ec) > opts.kappa_eps * mu:
                break
            mu = max(opts.mu_min,
                     min(opts.mu_shrink * mu, mu ** opts.mu_superlinear))
            mu_sequence.append(mu)
        tau = max(opts.fraction_to_boundary, 1.0 - mu)

        d_lo = x[ilo] - lo[ilo]
        d_hi = hi[ihi] - x[ihi]

        # condensed symmetric KKT matrix
        W = _lagrangian_hessian(system, x, y_eq, y_ineq, fscale)
        sigma = np.zeros(n)
        sigma[ilo] += z_lo[ilo] / d_lo
        sigma[ihi] += z_hi[ihi] / d_hi

        N = n + m_eq + m_ineq
        K_base = np.zeros((N, N))
        K_base[:n, :n] = W
        K_base[np.arange(n), np.arange(n)] += sigma
        if m_eq:
            K_base[n:n + m_eq, :n] = J_eq
            K_base[:n, n:n + m_eq] = J_eq.T
            K_base[np.arange(n, n + m_eq), np.arange(n, n + m_eq)] = \
                -opts.dual_regularization
        if m_ineq:
            K_base[n + m_eq:, :n] = J_ineq
            K_base[:n, n + m_eq:] = J_ineq.T
            K_base[np.arange(n + m_eq, N), np.arange(n + m_eq, N)] = \
                -(s / z_s) - opts.dual_regularization

        rhs = np.zeros(N)
        rhs_x = -(f_grad_s + J_eq.T @ y_eq + J_ineq.T @ y_ineq)
        rhs_x[ilo] += mu / d_lo
        rhs_x[ihi] -= mu / d_hi
        rhs_x[fixed] = 0.0
        rhs[:n] = rhs_x
        if m_eq:
            rhs[n:n + m_eq] = -c_eq
        if m_ineq:
            rhs[n + m_eq:] = -cis - mu / z_s + (s / z_s) * y_ineq

        fixed_idx = np.flatnonzero(fixed)

        delta_w = forced_delta
        was_forced = forced_delta > 0.0
        forced_delta = 0.0
        ldu = ipiv = None
        while True:
            K = K_base.copy()
            if delta_w > 0.0:
                K[np.arange(n), np.arange(n)] += delta_w
            if fixed_idx.size:
                K[fixed_idx, :] = 0.0
                K[:, fixed_idx] = 0.0
                K[fixed_idx, fixed_idx] = 1.0
            ldu, ipiv, inertia = _factor_and_inertia(K)
            if ldu is not None and inertia == (n, m_eq + m_ineq, 0):
                break
            if delta_w == 0.0:
                delta_w = (opts.inertia_regularization_init if delta_w_last == 0.0
                           else max(opts.inertia_regularization_init,
                                    delta_w_last / 3.0))
            else:
                delta_w *= 8.0
            if delta_w > opts.inertia_regularization_max:
                status = SolveStatus.NUMERIC_FAILURE
                message = "inertia correction exceeded regularization limit"
                ldu = None
                break
        if ldu is None:
            break
        # a line-search-forced bump is a one-off and must not ratchet the
        # warm-start value for future inertia corrections
        if delta_w > 0.0 and not was_forced:
            delta_w_last = delta_w

        step = _backsolve(ldu, ipiv, rhs)
        dx = step[:n]
        dy_eq = step[n:n + m_eq]
        dy_ineq = step[n + m_eq:]
        if m_ineq:
            # recover the slack step from the slack-bound complementarity
            # row: the barrier keeps it O(s), so a collapsed slack can never
            # dominate the fraction-to-boundary rule
            ds = mu / z_s - (s / z_s) * (y_ineq + dy_ineq)
            dz_s = mu / s - z_s - (z_s / s) * ds
        else:
            ds = np.zeros(0)
            dz_s = np.zeros(0)
        dz_lo = mu / d_lo - z_lo[ilo] - (z_lo[ilo] / d_lo) * dx[ilo]
        dz_hi = mu / d_hi - z_hi[ihi] + (z_hi[ihi] / d_hi) * dx[ihi]

        alpha_pri = 1.0
        alpha_pri = min(alpha_pri, _max_step(d_lo, dx[ilo], tau))
        alpha_pri = min(alpha_pri, _max_step(d_hi, -dx[ihi], tau))
        if m_ineq:
            alpha_pri = min(alpha_pri, _max_step(s, ds, tau))
        alpha_dual = 1.0
        alpha_dual = min(alpha_dual, _max_step(z_lo[ilo], dz_lo, tau))
        alpha_dual = min(alpha_dual, _max_step(z_hi[ihi], dz_hi, tau))
        if m_ineq:
            alpha_dual = min(alpha_dual, _max_step(z_s, dz_s, tau))

        # l1 merit line search on (x, s)
        theta0 = float(np.sum(np.abs(c_eq)) + np.sum(np.abs(cis)))
        d_barrier = float(f_grad_s @ dx)
        d_barrier -= mu * float(np.sum(dx[ilo] / d_lo))
        d_barrier += mu * float(np.sum(dx[ihi] / d_hi))
        if m_ineq:
            d_barrier -= mu * float(np.sum(ds / s))
        if theta0 > 1e-14:
            nu_req = d_barrier / (0.9 * theta0)
            if nu > 1e12:
                if rescue_count < 3:
                    rescue_count += 1
                    recenter("merit penalty diverged")
                    continue
                status = SolveStatus.INFEASIBLE_DETECTED
                message = "merit penalty diverged while infeasible"
                break
            if nu_req > nu:
                nu = 1.5 * nu_req
        d_merit = d_barrier - nu * theta0

        def merit(x_t, s_t):
            if not np.all(np.isfinite(x_t)):
                return math.inf
            val = fscale * obj.value(x_t)
            dl = x_t[ilo] - lo[ilo]
            dh = hi[ihi] - x_t[ihi]
            if (dl.size and dl.min() <= 0.0) or (dh.size and dh.min() <= 0.0):
                return math.inf
            if s_t.size and s_t.min() <= 0.0:
                return math.inf
            val -= mu * (float(np.sum(np.log(dl))) + float(np.sum(np.log(dh))))
            if s_t.size:
                val -= mu * float(np.sum(np.log(s_t)))
            th = (np.sum(np.abs(_residuals(eq_rows, x_t)))
                  + np.sum(np.abs(_residuals(ineq_rows, x_t) + s_t)))
            return val + nu * float(th)

        phi0 = merit(x, s)
        alpha = alpha_pri
        accepted = False
        x_new = x
        s_new = s
        noise = 1e-9 * max(1.0, abs(phi0))
        if d_merit >= -noise:
            # the predicted decrease is below what float arithmetic can
            # resolve (terminal refinement, mostly multiplier correction);
            # take the full fraction-to-boundary step if it does no harm
            x_t = x + alpha * dx
            s_t = s + alpha * ds
            if merit(x_t, s_t) <= phi0 + noise:
                x_new, s_new, accepted = x_t, s_t, True
        if not accepted and d_merit < 0.0:
            first_trial = True
            while alpha >= opts.min_step:
                x_t = x + alpha * dx
                s_t = s + alpha * ds
                if merit(x_t, s_t) <= phi0 + opts.armijo_eta * alpha * d_merit:
                    x_new, s_new, accepted = x_t, s_t, True
                    break
                if first_trial:
                    first_trial = False
                    # second-order correction: re-solve with the constraint
                    # residuals taken at the trial point (same factorization)
                    # so curvature-induced violation does not force tiny steps
                    rhs2 = np.zeros(N)
                    rhs2[:n] = rhs_x
                    if m_eq:
                        rhs2[n:n + m_eq] = -(alpha * c_eq
                                             + _residuals(eq_rows, x_t))
                    if m_ineq:
                        cis_t = _residuals(ineq_rows, x_t) + s_t
                        rhs2[n + m_eq:] = (-(alpha * cis + cis_t)
                                           - mu / z_s + (s / z_s) * y_ineq)
                    step2 = _backsolve(ldu, ipiv, rhs2)
                    dx2 = step2[:n]
                    dy_ineq2 = step2[n + m_eq:]
                    if m_ineq:
                        ds2 = mu / z_s - (s / z_s) * (y_ineq + dy_ineq2)
                    else:
                        ds2 = np.zeros(0)
                    a2 = 1.0
                    a2 = min(a2, _max_step(d_lo, dx2[ilo], tau))
                    a2 = min(a2, _max_step(d_hi, -dx2[ihi], tau))
                    if m_ineq:
                        a2 = min(a2, _max_step(s, ds2, tau))
                    x_t2 = x + a2 * dx2
                    s_t2 = s + a2 * ds2
                    if merit(x_t2, s_t2) <= phi0 + opts.armijo_eta * a2 * d_merit:
                        dx, ds = dx2, ds2
                        dy_eq = step2[n:n + m_eq]
                        dy_ineq = dy_ineq2
                        if m_ineq:
                            dz_s = mu / s - z_s - (z_s / s) * ds
                        dz_lo = (mu / d_lo - z_lo[ilo]
                                 - (z_lo[ilo] / d_lo) * dx[ilo])
                        dz_hi = (mu / d_hi - z_hi[ihi]
                                 + (z_hi[ihi] / d_hi) * dx[ihi])
                        alpha_dual = 1.0
                        alpha_dual = min(alpha_dual,
                                         _max_step(z_lo[ilo], dz_lo, tau))
                        alpha_dual = min(alpha_dual,
                                         _max_step(z_hi[ihi], dz_hi, tau))
                        if m_ineq:
                            alpha_dual = min(alpha_dual,
                                             _max_step(z_s, dz_s, tau))
                        alpha = a2
                        x_new, s_new, accepted = x_t2, s_t2, True
                        logger.debug("iter %d: second-order correction "
                                     "accepted at alpha=%.2e", it, a2)
                        break
                alpha *= 0.5

        relaxed = False
        if accepted and d_merit < 0.0 and alpha <= alpha_pri * 2.0 ** -7:
            # an acceptance that needed seven or more halvings is a failure
            # in slow motion: the merit model and the surface disagree, and
            # crawling on such crumbs can pin the run for dozens of
            # iterations; discard the crumb and run the failure escalation
            # (stiffer Hessian, then a burst of full steps) instead
            accepted = False
        if not accepted:
            fail_count += 1
            if fail_count == 1:
                # one retry with a stiffer Hessian before anything else
                forced_delta = min(max(1e-4, 8.0 * delta_w_last), 1e8)
                logger.debug("iter %d: line search failed, retrying with "
                             "regularization %.1e", it, forced_delta)
                continue
            if fail_count <= 6:
                # watchdog: multiplier jolts (after a barrier drop or a
                # safeguard clamp) produce steps the merit scores as harmful
                # but that plain Newton recovers from within an iteration or
                # two; tolerate a bounded burst of full steps -- though only
                # ones the merit can at least evaluate, since forcing a trial
                # that sits outside a bound or carries non-finite entries
                # would poison every later iterate
                x_t = x + alpha_pri * dx
                s_t = s + alpha_pri * ds
                if math.isfinite(merit(x_t, s_t)):
                    logger.debug("iter %d: watchdog accepts the full step "
                                 "(%d rejections)", it, fail_count - 1)
                    alpha = alpha_pri
                    x_new = x_t
                    s_new = s_t
                    accepted = True
                    relaxed = True
            if not accepted:
                if rescue_count < 3:
                    rescue_count += 1
                    recenter("line search exhausted")
                    continue
                if theta0 > opts.infeasibility_threshold:
                    status = SolveStatus.INFEASIBLE_DETECTED
                    message = ("line search stalled with constraint "
                               f"violation {theta0:.3e}")
                    break
                status = SolveStatus.NUMERIC_FAILURE
                message = "line search failed near a feasible point"
                break
        if not relaxed:
            fail_count = 0
        step_inf = alpha * float(np.max(np.abs(dx))) if n else 0.0
        if m_ineq and ds.size:
            step_inf = max(step_inf, alpha * float(np.max(np.abs(ds))))
        if step_inf <= 1e-13 * (1.0 + float(np.max(np.abs(x)))):
            stall_count += 1
            if stall_count >= 8:
                if rescue_count < 3:
                    rescue_count += 1
                    recenter("iterates stopped moving")
                    continue
                if theta0 > opts.infeasibility_threshold:
                    status = SolveStatus.INFEASIBLE_DETECTED
                    message = ("iterates stopped moving with constraint "
                               f"violation {theta0:.3e}")
                else:
                    status = SolveStatus.NUMERIC_FAILURE
                    message = "iterates stopped moving near a feasible point"
                break
        else:
            stall_count = 0

        x = x_new
        s = s_new
        if m_ineq:
            # never leave a slack far below the true constraint margin:
            # an undersized slack manufactures phantom infeasibility that
            # Newton then "fixes" by dragging the constraint to its boundary
            s = np.maximum(s, -_residuals(ineq_rows, x))
        y_eq = y_eq + alpha * dy_eq
        if m_ineq:
            y_ineq = y_ineq + alpha * dy_ineq
            z_s = z_s + alpha_dual * dz_s
        z_lo[ilo] += alpha_dual * dz_lo
        z_hi[ihi] += alpha_dual * dz_hi

        # multiplier safeguard keeping z within kappa_sigma of mu/d
        d_lo = x[ilo] - lo[ilo]
        d_hi = hi[ihi] - x[ihi]
        ks = opts.kappa_sigma
        z_lo[ilo] = np.minimum(np.maximum(z_lo[ilo], mu / (ks * d_lo)),
                               ks * mu / d_lo)
        z_hi[ihi] = np.minimum(np.maximum(z_hi[ihi], mu / (ks * d_hi)),
                               ks * mu / d_hi)
        if m_ineq:
            z_s = np.minimum(np.maximum(z_s, mu / (ks * s)), ks * mu / s)

        logger.debug(
            "iter %3d  f=%.8e  theta=%.3e  dual=%.3e  mu=%.1e  alpha=%.2e  dw=%.1e",
            it, obj.value(x), theta0, e_dual0, mu, alpha, delta_w)
        if m_ineq and logger.isEnabledFor(logging.DEBUG - 5):
            jw = int(np.argmax(np.abs(s * z_s - mu)))
            logger.log(
                logging.DEBUG - 5,
                "      worst pair %s: s=%.2e z=%.2e sz/mu=%.2f c=%.2e "
                "ds=%.2e dz=%.2e a=%.2e ad=%.2e",
                ineq_rows[jw].label, s[jw], z_s[jw], s[jw] * z_s[jw] / mu,
                _residuals([ineq_rows[jw]], x)[0], ds[jw], dz_s[jw],
                alpha, alpha_dual)

    wall = time.perf_counter() - t_start
    if status is SolveStatus.OPTIMAL:
        logger.info("converged in %d iterations (%.3fs): objective %.6f",
                    iterations, wall, obj.value(x))
    else:
        logger.info("terminated %s after %d iterations (%.3fs): %s",
                    status.value, iterations, wall, message)
    return SolverResult(
        status=status,
        primal=x,
        objective=float(obj.value(x)),
        iterations=iterations,
        kkt_residuals=kkt_triplet,
        wall_time_s=wall,
        mu_sequence=tuple(mu_sequence),
        message=message,
        duals_eq=y_eq / fscale,
        duals_ineq=y_ineq / fscale,
        duals_lower=z_lo / fscale,
        duals_upper=z_hi / fscale,
        slacks=s,
        objective_scale=fscale,
    )


# -- derivative verification -------------------------------------------------


@dataclass(frozen=True)
class DerivativeReport:
    """Worst relative error per row label (and for the objective)."""

    jacobian: dict[str, float]
    hessian: dict[str, float]
    objective_gradient: float
    objective_hessian: float

    def worst(self) -> float:
        vals = [self.objective_gradient, self.objective_hessian]
        vals += list(self.jacobian.values())
        vals += list(self.hessian.values())
        return max(vals) if vals else 0.0


def _dense_gradient(row, x: np.ndarray, support: list[int]) -> np.ndarray:
    idx, val = row.gradient(x)
    g = np.zeros(len(support))
    lookup = {i: k for k, i in enumerate(support)}
    for i, v in zip(idx, val):
        g[lookup[i]] += v
    return g


def derivative_check(system: ConstraintSystem, x: np.ndarray,
                     step: float = 1e-6, linear_step: float = 1e-2) -> DerivativeReport:
    """Compare analytic derivatives against central finite differences.

    Linear rows get the larger step (their differences are exact up to
    rounding, so a bigger step only reduces cancellation noise).  Errors are
    relative to max(1, magnitude of the analytic quantity) and aggregated as
    the worst case per row label.
    """
    x = np.asarray(x, float)
    jac_err: dict[str, float] = {}
    hess_err: dict[str, float] = {}

    for row in system.rows:
        h = linear_step if row.is_linear else step
        idx, _ = row.gradient(x)
        support = sorted(set(idx) | {i for i, j, _ in row.hessian(x) for i in (i, j)})
        analytic = _dense_gradient(row, x, support)
        fd = np.zeros(len(support))
        for k, i in enumerate(support):
            xp = x.copy()
            xm = x.copy()
            xp[i] += h
            xm[i] -= h
            fd[k] = (row.residual(xp) - row.residual(xm)) / (2.0 * h)
        scale = max(1.0, float(np.max(np.abs(analytic))) if len(support) else 1.0)
        err = float(np.max(np.abs(fd - analytic))) / scale if len(support) else 0.0
        jac_err[row.label] = max(jac_err.get(row.label, 0.0), err)

        H = np.zeros((len(support), len(support)))
        lookup = {i: k for k, i in enumerate(support)}
        for i, j, v in row.hessian(x):
            H[lookup[i], lookup[j]] += v
            if i != j:
                H[lookup[j], lookup[i]] += v
        Hfd = np.zeros_like(H)
        for k, i in enumerate(support):
            xp = x.copy()
            xm = x.copy()
            xp[i] += h
            xm[i] -= h
            Hfd[:, k] = (_dense_gradient(row, xp, support)
                         - _dense_gradient(row, xm, support)) / (2.0 * h)
        hscale = max(1.0, float(np.max(np.abs(H))) if H.size else 1.0)
        herr = float(np.max(np.abs(Hfd - H))) / hscale if H.size else 0.0
        hess_err[row.label] = max(hess_err.get(row.label, 0.0), herr)

    obj = system.objective
    if obj is None:
        grad_err = hess_obj_err = 0.0
    else:
        support = sorted(set(np.flatnonzero(obj.quad)) | set(np.flatnonzero(obj.lin)))
        analytic = obj.gradient(x)
        grad_err = 0.0
        for i in support:
            xp = x.copy()
            xm = x.copy()
            xp[i] += step
            xm[i] -= step
            fd = (obj.value(xp) - obj.value(xm)) / (2.0 * step)
            scale = max(1.0, abs(float(analytic[i])))
            grad_err = max(grad_err, abs(fd - float(analytic[i])) / scale)
        hdiag = obj.hessian_diag()
        hess_obj_err = 0.0
        for i in support:
            xp = x.copy()
            xm = x.copy()
            xp[i] += step
            xm[i] -= step
            fd = (obj.gradient(xp)[i] - obj.gradient(xm)[i]) / (2.0 * step)
            scale = max(1.0, abs(float(hdiag[i])))
            hess_obj_err = max(hess_obj_err, abs(fd - float(hdiag[i])) / scale)

    return DerivativeReport(jacobian=jac_err, hessian=hess_err,
                            objective_gradient=grad_err,
                            objective_hessian=hess_obj_err)
