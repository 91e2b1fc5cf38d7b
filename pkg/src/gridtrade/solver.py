"""Deterministic solver for the two problem shapes the simulator needs:

* separable strictly concave utility maximization minus linear terms under
  linear equality/inequality constraints and box bounds, and
* linear programs (projection and battery best-response problems).

Conic solves are delegated to Clarabel (through cvxpy) and LPs to HiGHS
(through scipy); every returned point is re-verified here by direct KKT
arithmetic, and concave solutions are polished with a Newton step on the
active set so reported residuals are at machine accuracy rather than at
conic-solver accuracy. A result is only labeled optimal when the verified
KKT residual is at or below 1e-7.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from scipy.optimize import linprog

from .utility import QuasiCPEUtility

__all__ = [
    "ConcaveProgram",
    "SolveResult",
    "SolverError",
    "solve_concave_program",
    "solve_linear_program",
    "KKT_TOL",
    "TIE_BREAK_WEIGHT",
]

KKT_TOL = 1e-7
# Weight of the strictly convex tie-break used in canonical mode to pick a
# reproducible point from a degenerate optimal face.
TIE_BREAK_WEIGHT = 1e-9
MAX_ITERS = 10_000

_CLARABEL_TIGHT = dict(
    tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11, tol_ktratio=1e-8, max_iter=MAX_ITERS
)


class SolverError(RuntimeError):
    """A solve that was required to succeed did not."""


@dataclass
class ConcaveProgram:
    """minimize cost @ x - sum_i U_i(x_i) subject to linear constraints.

    ``utilities`` maps variable indices to concave utility terms that are
    maximized; variables without an entry are purely linear. Utility
    variables must have a nonnegative lower bound (the utility domain).
    """

    num_vars: int
    cost: np.ndarray
    utilities: dict[int, QuasiCPEUtility] = field(default_factory=dict)
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        n = self.num_vars
        self.cost = np.asarray(self.cost, dtype=float)
        if self.cost.shape != (n,):
            raise ValueError(f"cost has shape {self.cost.shape}, expected ({n},)")
        self.a_eq, self.b_eq = _check_rows(self.a_eq, self.b_eq, n, "equality")
        self.a_ub, self.b_ub = _check_rows(self.a_ub, self.b_ub, n, "inequality")
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("box bounds must have one entry per variable")
        for i in self.utilities:
            if not 0 <= i < n:
                raise ValueError(f"utility index {i} out of range")
            if not self.lower[i] >= 0:
                raise ValueError("utility variables need a nonnegative lower bound")

    def objective_value(self, x: np.ndarray) -> float:
        val = float(self.cost @ x)
        for i, u in self.utilities.items():
            val -= u.utility_value(max(x[i], 0.0))
        return val


@dataclass
class SolveResult:
    """Primal/dual solution with a verified KKT residual.

    ``status`` is "optimal", "infeasible", or "iteration-limit"; an optimal
    status certifies kkt_residual <= 1e-7. Duals follow the convention
    L = f + y (A_eq x - b_eq) + z (A_ub x - b_ub)
      + lam_hi (x - ub) + lam_lo (lb - x),
    so inequality and bound duals are nonnegative.
    """

    status: str
    x: np.ndarray | None
    eq_duals: np.ndarray | None
    ineq_duals: np.ndarray | None
    lower_duals: np.ndarray | None
    upper_duals: np.ndarray | None
    objective: float
    kkt_residual: float


def _check_rows(a, b, n, name):
    if a is None and b is None:
        return np.zeros((0, n)), np.zeros(0)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[1] != n or b.shape != (a.shape[0],):
        raise ValueError(f"{name} system has inconsistent shape {a.shape} / {b.shape}")
    return a, b


def _marginals(prog: ConcaveProgram, x: np.ndarray) -> np.ndarray:
    out = np.zeros(prog.num_vars)
    for i, u in prog.utilities.items():
        out[i] = u.marginal_utility(max(x[i], 0.0))
    return out


def _curvatures(prog: ConcaveProgram, x: np.ndarray) -> np.ndarray:
    out = np.zeros(prog.num_vars)
    for i, u in prog.utilities.items():
        out[i] = -u.curvature(max(x[i], 0.0))
    return out


def kkt_residual(prog: ConcaveProgram, x, y, z, lam_lo, lam_hi) -> float:
    """Max violation over stationarity, feasibility, and complementarity."""
    stat = prog.cost - _marginals(prog, x)
    if prog.a_eq.size:
        stat = stat + prog.a_eq.T @ y
    if prog.a_ub.size:
        stat = stat + prog.a_ub.T @ z
    stat = stat + lam_hi - lam_lo
    worst = float(np.max(np.abs(stat))) if stat.size else 0.0

    if prog.a_eq.size:
        worst = max(worst, float(np.max(np.abs(prog.a_eq @ x - prog.b_eq))))
    if prog.a_ub.size:
        slack = prog.b_ub - prog.a_ub @ x
        worst = max(worst, float(np.max(-np.minimum(slack, 0.0))))
        worst = max(worst, float(np.max(-np.minimum(z, 0.0))))
        worst = max(worst, float(np.max(np.abs(z * slack))))
    lo_gap = x - prog.lower
    hi_gap = prog.upper - x
    finite_lo = np.isfinite(prog.lower)
    finite_hi = np.isfinite(prog.upper)
    if finite_lo.any():
        worst = max(worst, float(np.max(-np.minimum(lo_gap[finite_lo], 0.0))))
        worst = max(worst, float(np.max(-np.minimum(lam_lo[finite_lo], 0.0))))
        worst = max(worst, float(np.max(np.abs(lam_lo[finite_lo] * lo_gap[finite_lo]))))
    if finite_hi.any():
        worst = max(worst, float(np.max(-np.minimum(hi_gap[finite_hi], 0.0))))
        worst = max(worst, float(np.max(-np.minimum(lam_hi[finite_hi], 0.0))))
        worst = max(worst, float(np.max(np.abs(lam_hi[finite_hi] * hi_gap[finite_hi]))))
    return worst


def utility_atoms(x: cp.Variable | cp.Expression, utilities: dict[int, QuasiCPEUtility]):
    """cvxpy expression for sum_i U_i(x_i), grouping indices by exponent.

    The large max_denom keeps the rationalized exponent faithful; elasticities
    just past -1 produce exponents near zero that the default rationalization
    would collapse outright.
    """
    groups: dict[float, list[int]] = {}
    for i in utilities:
        groups.setdefault(utilities[i].power_exponent, []).append(i)
    total = 0
    for e, idx in sorted(groups.items()):
        idx = sorted(idx)
        coef = np.array([utilities[i].power_coefficient for i in idx])
        shift = np.array([utilities[i].delta_shift for i in idx])
        base = coef * shift**e
        atom = cp.power(cp.hstack([x[i] for i in idx]) + shift, e, max_denom=10**9)
        total = total + cp.sum(cp.multiply(coef, atom)) - np.sum(base)
    return total


def solve_concave_program(prog: ConcaveProgram, canonical: bool = False) -> SolveResult:
    """Solve the program, returning verified primal and dual values.

    ``canonical`` adds a 1e-9-weighted squared-norm tie-break so degenerate
    optima resolve to a reproducible point; the reported objective is always
    the unregularized one.
    """
    if not prog.utilities:
        return solve_linear_program(prog, canonical=canonical)

    x = cp.Variable(prog.num_vars)
    objective = prog.cost @ x - utility_atoms(x, prog.utilities)
    if canonical:
        objective = objective + TIE_BREAK_WEIGHT * cp.sum_squares(x)
    constraints = []
    if prog.a_eq.size:
        constraints.append(prog.a_eq @ x == prog.b_eq)
    if prog.a_ub.size:
        constraints.append(prog.a_ub @ x <= prog.b_ub)
    finite_lo = np.isfinite(prog.lower)
    finite_hi = np.isfinite(prog.upper)
    if finite_lo.any():
        constraints.append(x[finite_lo] >= prog.lower[finite_lo])
    if finite_hi.any():
        constraints.append(x[finite_hi] <= prog.upper[finite_hi])
    problem = cp.Problem(cp.Minimize(objective), constraints)
    status = _try_solve(problem)

    if status in ("infeasible", "infeasible_inaccurate"):
        return SolveResult("infeasible", None, None, None, None, None, float("nan"), float("inf"))
    if x.value is None:
        return SolveResult("iteration-limit", None, None, None, None, None, float("nan"), float("inf"))

    xv = np.asarray(x.value, dtype=float)
    y = np.zeros(prog.a_eq.shape[0])
    z = np.zeros(prog.a_ub.shape[0])
    lam_lo = np.zeros(prog.num_vars)
    lam_hi = np.zeros(prog.num_vars)
    ci = iter(constraints)
    if prog.a_eq.size:
        y = np.atleast_1d(np.asarray(next(ci).dual_value, dtype=float))
    if prog.a_ub.size:
        z = np.atleast_1d(np.asarray(next(ci).dual_value, dtype=float))
    if finite_lo.any():
        lam_lo[finite_lo] = np.atleast_1d(np.asarray(next(ci).dual_value, dtype=float))
    if finite_hi.any():
        lam_hi[finite_hi] = np.atleast_1d(np.asarray(next(ci).dual_value, dtype=float))

    # Clamp into the utility domain before evaluating derivatives.
    xv = np.where(finite_lo, np.maximum(xv, prog.lower), xv)
    residual = kkt_residual(prog, xv, y, z, lam_lo, lam_hi)
    polished = _polish(prog, xv, y, z, lam_lo, lam_hi)
    if polished is not None and polished[-1] < residual:
        xv, y, z, lam_lo, lam_hi, residual = polished

    status = "optimal" if residual <= KKT_TOL else "iteration-limit"
    return SolveResult(status, xv, y, z, lam_lo, lam_hi, prog.objective_value(xv), residual)


def _try_solve(problem: cp.Problem) -> str:
    # the requested tolerances sit below what the conic solver certifies, so
    # cvxpy may warn about accuracy; we verify the KKT residual ourselves
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        try:
            problem.solve(solver=cp.CLARABEL, **_CLARABEL_TIGHT)
        except cp.SolverError:
            problem.solve(solver=cp.CLARABEL, max_iter=MAX_ITERS)
    return problem.status


def _polish(prog, x0, y0, z0, lam_lo0, lam_hi0, act_tol=1e-6, rounds=6):
    """Newton refinement of the conic solution on its active set.

    Fixes the constraints that are (nearly) active, solves the resulting
    equality-constrained problem to machine precision, and re-derives the
    duals. A tiny Levenberg term anchored at the conic point regularizes
    directions with no curvature (pure-LP subspaces) without biasing the
    strictly concave ones.
    """
    n = prog.num_vars
    finite_lo = np.isfinite(prog.lower)
    finite_hi = np.isfinite(prog.upper)
    active_ub = np.zeros(prog.a_ub.shape[0], dtype=bool)
    if prog.a_ub.size:
        active_ub = (prog.b_ub - prog.a_ub @ x0 < act_tol) | (z0 > act_tol)
    active_lo = finite_lo & ((x0 - prog.lower < act_tol) | (lam_lo0 > act_tol))
    active_hi = finite_hi & ((prog.upper - x0 < act_tol) | (lam_hi0 > act_tol))
    rho = 1e-10
    ref = x0

    best = None
    for _ in range(rounds):
        rows = [prog.a_eq] if prog.a_eq.size else []
        rhs = [prog.b_eq] if prog.a_eq.size else []
        if active_ub.any():
            rows.append(prog.a_ub[active_ub])
            rhs.append(prog.b_ub[active_ub])
        eye = np.eye(n)
        if active_lo.any():
            rows.append(eye[active_lo])
            rhs.append(prog.lower[active_lo])
        if active_hi.any():
            rows.append(eye[active_hi])
            rhs.append(prog.upper[active_hi])
        E = np.vstack(rows) if rows else np.zeros((0, n))
        be = np.concatenate(rhs) if rhs else np.zeros(0)
        m = E.shape[0]

        xv = x0.copy()
        nu = np.zeros(m)
        ok = True
        for _ in range(40):
            grad = prog.cost - _marginals(prog, xv) + rho * (xv - ref)
            r1 = grad + (E.T @ nu if m else 0.0)
            r2 = E @ xv - be if m else np.zeros(0)
            norm = max(np.max(np.abs(r1)), np.max(np.abs(r2)) if m else 0.0)
            if norm < 1e-13:
                break
            H = np.diag(_curvatures(prog, xv) + rho)
            kkt = np.block([[H, E.T], [E, np.zeros((m, m))]]) if m else H
            rhs_vec = -np.concatenate([r1, r2]) if m else -r1
            try:
                step = np.linalg.lstsq(kkt, rhs_vec, rcond=None)[0]
            except np.linalg.LinAlgError:
                ok = False
                break
            dx, dnu = step[:n], step[n:]
            alpha = 1.0
            for i in prog.utilities:
                # stay strictly inside the utility domain
                floor = -0.9 * (xv[i] + prog.utilities[i].delta_shift)
                if dx[i] < 0 and alpha * dx[i] < floor:
                    alpha = min(alpha, floor / dx[i])
            xv = xv + alpha * dx
            nu = nu + alpha * dnu
        if not ok:
            return best

        y = nu[: prog.a_eq.shape[0]] if prog.a_eq.size else np.zeros(0)
        z = np.zeros(prog.a_ub.shape[0])
        lam_lo = np.zeros(n)
        lam_hi = np.zeros(n)
        offset = prog.a_eq.shape[0]
        if active_ub.any():
            z[active_ub] = nu[offset : offset + int(active_ub.sum())]
            offset += int(active_ub.sum())
        if active_lo.any():
            lam_lo[active_lo] = -nu[offset : offset + int(active_lo.sum())]
            offset += int(active_lo.sum())
        if active_hi.any():
            lam_hi[active_hi] = nu[offset : offset + int(active_hi.sum())]

        # Refine the guess of the active set from the polished point.
        changed = False
        if prog.a_ub.size:
            viol = prog.a_ub @ xv - prog.b_ub > 1e-10
            if (viol & ~active_ub).any():
                active_ub |= viol
                changed = True
            neg = z < -1e-9
            if neg.any():
                active_ub &= ~neg
                changed = True
        for mask, lam, bound, side in ((active_lo, lam_lo, prog.lower, "lo"), (active_hi, lam_hi, prog.upper, "hi")):
            gap = (xv - bound) if side == "lo" else (bound - xv)
            viol = np.isfinite(bound) & (gap < -1e-10) & ~mask
            if viol.any():
                mask |= viol
                changed = True
            neg = lam < -1e-9
            if neg.any():
                mask &= ~neg
                changed = True

        lam_lo = np.maximum(lam_lo, 0.0)
        lam_hi = np.maximum(lam_hi, 0.0)
        z = np.maximum(z, 0.0)
        res = kkt_residual(prog, xv, y, z, lam_lo, lam_hi)
        if best is None or res < best[-1]:
            best = (xv, y, z, lam_lo, lam_hi, res)
        if not changed:
            break
    return best


def solve_linear_program(prog: ConcaveProgram, canonical: bool = False) -> SolveResult:
    """Solve a ConcaveProgram with no concave terms as an LP (HiGHS).

    In canonical mode the degenerate optimal face is resolved by the
    1e-9-weighted squared-norm tie-break (a small QP); the reported
    objective is the unregularized LP value either way.
    """
    if prog.utilities:
        raise ValueError("linear program must not carry utility terms")
    if canonical:
        return _solve_lp_canonical(prog)

    bounds = [
        (lo if np.isfinite(lo) else None, hi if np.isfinite(hi) else None)
        for lo, hi in zip(prog.lower, prog.upper)
    ]
    res = linprog(
        prog.cost,
        A_ub=prog.a_ub if prog.a_ub.size else None,
        b_ub=prog.b_ub if prog.a_ub.size else None,
        A_eq=prog.a_eq if prog.a_eq.size else None,
        b_eq=prog.b_eq if prog.a_eq.size else None,
        bounds=bounds,
        method="highs",
    )
    if res.status == 2:
        return SolveResult("infeasible", None, None, None, None, None, float("nan"), float("inf"))
    if res.status == 3:
        raise ValueError("linear program is unbounded (malformed problem)")
    if res.status != 0:
        return SolveResult("iteration-limit", None, None, None, None, None, float("nan"), float("inf"))

    x = np.asarray(res.x, dtype=float)
    y = -np.asarray(res.eqlin.marginals, dtype=float) if prog.a_eq.size else np.zeros(0)
    z = -np.asarray(res.ineqlin.marginals, dtype=float) if prog.a_ub.size else np.zeros(0)
    lam_lo = np.where(np.isfinite(prog.lower), np.asarray(res.lower.marginals, dtype=float), 0.0)
    lam_hi = np.where(np.isfinite(prog.upper), -np.asarray(res.upper.marginals, dtype=float), 0.0)
    residual = kkt_residual(prog, x, y, z, np.maximum(lam_lo, 0), np.maximum(lam_hi, 0))
    status = "optimal" if residual <= KKT_TOL else "iteration-limit"
    return SolveResult(status, x, y, z, np.maximum(lam_lo, 0), np.maximum(lam_hi, 0), float(prog.cost @ x), residual)


def _solve_lp_canonical(prog: ConcaveProgram) -> SolveResult:
    x = cp.Variable(prog.num_vars)
    objective = prog.cost @ x + TIE_BREAK_WEIGHT * cp.sum_squares(x)
    constraints = []
    if prog.a_eq.size:
        constraints.append(prog.a_eq @ x == prog.b_eq)
    if prog.a_ub.size:
        constraints.append(prog.a_ub @ x <= prog.b_ub)
    finite_lo = np.isfinite(prog.lower)
    finite_hi = np.isfinite(prog.upper)
    if finite_lo.any():
        constraints.append(x[finite_lo] >= prog.lower[finite_lo])
    if finite_hi.any():
        constraints.append(x[finite_hi] <= prog.upper[finite_hi])
    problem = cp.Problem(cp.Minimize(objective), constraints)
    status = _try_solve(problem)
    if status in ("infeasible", "infeasible_inaccurate"):
        return SolveResult("infeasible", None, None, None, None, None, float("nan"), float("inf"))
    if x.value is None:
        return SolveResult("iteration-limit", None, None, None, None, None, float("nan"), float("inf"))
    xv = np.asarray(x.value, dtype=float)
    y = np.zeros(prog.a_eq.shape[0])
    z = np.zeros(prog.a_ub.shape[0])
    lam_lo = np.zeros(prog.num_vars)
    lam_hi = np.zeros(prog.num_vars)
    ci = iter(constraints)
    if prog.a_eq.size:
        y = np.atleast_1d(np.asarray(next(ci).dual_value, dtype=float))
    if prog.a_ub.size:
        z = np.atleast_1d(np.asarray(next(ci).dual_value, dtype=float))
    if finite_lo.any():
        lam_lo[finite_lo] = np.atleast_1d(np.asarray(next(ci).dual_value, dtype=float))
    if finite_hi.any():
        lam_hi[finite_hi] = np.atleast_1d(np.asarray(next(ci).dual_value, dtype=float))
    residual = kkt_residual(prog, xv, y, z, lam_lo, lam_hi)
    status = "optimal" if residual <= KKT_TOL else "iteration-limit"
    return SolveResult(status, xv, y, z, lam_lo, lam_hi, float(prog.cost @ xv), residual)
