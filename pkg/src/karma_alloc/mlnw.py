"""Maximum long-run Nash welfare: solver, KKT verifier, and baselines.

The solver is a log-barrier interior-point method over the capacity/box
polytope (plus per-urgency simplex rows when resources are mutually
exclusive), followed by an active-set Gauss-Newton polish that solves the
first-order equality system exactly once the active structure is known.
Correctness is certified solely by ``kkt_residuals``: the solver refuses to
return anything whose residuals exceed the requested tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InfeasibleImprovementError, SolverError, StructuralError
from .model import (LongRunAllocation, Problem, ProblemArrays, UrgencyProcess,
                    UserType, as_arrays)

DEFAULT_TOL = 1e-6
FEAS_TOL = 1e-8


@dataclass(frozen=True)
class KktResidualReport:
    """Worst-case residuals of the four first-order blocks."""

    stationarity: float
    primal_feasibility: float
    dual_feasibility: float
    complementary_slackness: float
    worst_index: tuple

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.primal_feasibility,
                   self.dual_feasibility, self.complementary_slackness)

    def passes(self, tol: float) -> bool:
        return self.max_residual <= tol


@dataclass(frozen=True)
class MlnwSolution:
    """Optimal allocation with multipliers and certification report.

    ``eta`` has shape (types, levels) for mutually exclusive problems (one
    multiplier per urgency simplex row) and (types, resources, levels)
    otherwise. ``iota`` covers the chi >= 0 bounds cell by cell.
    """

    chi: LongRunAllocation
    lam: np.ndarray
    eta: np.ndarray
    iota: np.ndarray
    reward_improvements: np.ndarray
    objective: float
    residuals: KktResidualReport


# ---------------------------------------------------------------------------
# Cell flattening
# ---------------------------------------------------------------------------

class _Cells:
    """Flat view of the valid (type, resource, level) cells."""

    def __init__(self, pa: ProblemArrays):
        ti, ui = np.nonzero(pa.valid)
        # One flat entry per (type, level) pair and resource.
        nT, m = pa.n_types, pa.m
        self.pa = pa
        self.ci = np.repeat(ti, m)
        self.cu = np.repeat(ui, m)
        self.cj = np.tile(np.arange(m), len(ti))
        self.n = len(self.ci)
        self.sig = pa.sigma[self.ci, self.cu]
        self.uval = pa.u[self.ci, self.cu]
        self.dlt = pa.delta[self.ci, self.cj]
        self.g = self.sig * self.uval * self.dlt          # d rho_i / d x
        self.a = pa.mass[self.ci] * self.sig              # capacity row coeff
        self.W = pa.mass * pa.weight
        # Row id for mutually exclusive simplex rows: one per (type, level).
        key = self.ci * pa.qmax + self.cu
        _, self.row = np.unique(key, return_inverse=True)
        self.n_rows = self.row.max() + 1 if self.n else 0
        self.type_masks = [self.ci == i for i in range(nT)]
        self.res_masks = [self.cj == j for j in range(m)]
        self.row_masks = [self.row == r for r in range(self.n_rows)]

    def rho(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.pa.n_types)
        np.add.at(out, self.ci, self.g * x)
        return out

    def demand(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.pa.m)
        np.add.at(out, self.cj, self.a * x)
        return out

    def rowsums(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_rows)
        np.add.at(out, self.row, x)
        return out

    def to_tensor(self, x: np.ndarray) -> np.ndarray:
        chi = np.zeros((self.pa.n_types, self.pa.m, self.pa.qmax))
        chi[self.ci, self.cj, self.cu] = x
        return chi


def _check_improvable(pa: ProblemArrays) -> None:
    for i in range(pa.n_types):
        if not np.any(pa.delta[i] > 0):
            raise InfeasibleImprovementError(
                f"type {i} strictly desires no resource; its log-improvement "
                "is undefined"
            )


def _interior_start(cells: _Cells, init_chi: Optional[np.ndarray]) -> np.ndarray:
    pa = cells.pa
    desiring = np.zeros(pa.m)
    for j in range(pa.m):
        desiring[j] = pa.mass[pa.delta[:, j] > 0].sum()
    x = np.empty(cells.n)
    pos = cells.g > 0
    nj = np.maximum(desiring[cells.cj], 1.0)
    x[pos] = np.minimum(0.45, 0.5 * pa.cap[cells.cj][pos] / nj[pos])
    x[~pos] = 1e-5
    # Keep the negative-delta cells from dragging any rho near zero.
    rho_pos = np.zeros(pa.n_types)
    np.add.at(rho_pos, cells.ci[pos], cells.g[pos] * x[pos])
    neg = cells.g < 0
    if np.any(neg):
        drag = np.zeros(pa.n_types)
        np.add.at(drag, cells.ci[neg], -cells.g[neg] * x[neg])
        for i in range(pa.n_types):
            if drag[i] > 0.1 * rho_pos[i]:
                shrink = 0.1 * rho_pos[i] / drag[i]
                x[neg & cells.type_masks[i]] *= shrink
    if pa.me:
        rows = cells.rowsums(x)
        big = rows > 0.9
        if np.any(big):
            scale = np.where(big, 0.9 / rows, 1.0)
            x *= scale[cells.row]
    x = np.clip(x, 1e-9, 1 - 1e-9)

    if init_chi is not None:
        y = np.clip(np.asarray(init_chi, dtype=float)[cells.ci, cells.cj, cells.cu],
                    1e-9, 1 - 1e-9)
        for theta in np.linspace(0.0, 1.0, 21):
            cand = (1 - theta) * y + theta * x
            ok = (np.all(cells.demand(cand) < pa.cap - 1e-9)
                  and np.all(cells.rho(cand) > 0))
            if pa.me and ok:
                ok = np.all(cells.rowsums(cand) < 1 - 1e-9)
            if ok:
                return cand
    return x


# ---------------------------------------------------------------------------
# Barrier method
# ---------------------------------------------------------------------------

def _barrier_value(cells: _Cells, x: np.ndarray, t: float) -> float:
    pa = cells.pa
    rho = cells.rho(x)
    if np.any(rho <= 0) or np.any(x <= 0):
        return np.inf
    slack = pa.cap - cells.demand(x)
    if np.any(slack <= 0):
        return np.inf
    val = -t * float(np.dot(cells.W, np.log(rho)))
    val -= np.log(slack).sum() + np.log(x).sum()
    if pa.me:
        srow = 1.0 - cells.rowsums(x)
        if np.any(srow <= 0):
            return np.inf
        val -= np.log(srow).sum()
    else:
        up = 1.0 - x
        if np.any(up <= 0):
            return np.inf
        val -= np.log(up).sum()
    return val


def _newton_center(cells: _Cells, x: np.ndarray, t: float,
                   max_newton: int) -> np.ndarray:
    pa = cells.pa
    n = cells.n
    for _ in range(max_newton):
        rho = cells.rho(x)
        slack = pa.cap - cells.demand(x)
        grad = -t * cells.W[cells.ci] * cells.g / rho[cells.ci]
        grad += cells.a / slack[cells.cj]
        grad += -1.0 / x
        H = np.zeros((n, n))
        for i in range(pa.n_types):
            mask = cells.type_masks[i]
            gi = cells.g[mask]
            H[np.ix_(mask, mask)] += (t * cells.W[i] / rho[i] ** 2) * np.outer(gi, gi)
        for j in range(pa.m):
            mask = cells.res_masks[j]
            aj = cells.a[mask]
            H[np.ix_(mask, mask)] += np.outer(aj, aj) / slack[j] ** 2
        diag = 1.0 / x ** 2
        if pa.me:
            srow = 1.0 - cells.rowsums(x)
            grad += 1.0 / srow[cells.row]
            for r in range(cells.n_rows):
                mask = cells.row_masks[r]
                H[np.ix_(mask, mask)] += 1.0 / srow[r] ** 2
        else:
            up = 1.0 - x
            grad += 1.0 / up
            diag = diag + 1.0 / up ** 2
        H[np.diag_indices(n)] += diag

        try:
            c, low = _cho_factor(H)
            dx = -_cho_solve((c, low), grad)
        except np.linalg.LinAlgError:
            dx = -np.linalg.lstsq(H, grad, rcond=None)[0]
        nd = -float(np.dot(grad, dx))
        if not np.isfinite(nd) or nd <= 0:
            break

        # Largest step keeping every slack strictly positive.
        alpha = 1.0
        for s, ds in ((x, dx), ):
            dec = -ds
            mask = dec > 0
            if np.any(mask):
                alpha = min(alpha, 0.99 * np.min(s[mask] / dec[mask]))
        dslack = np.zeros(pa.m)
        np.add.at(dslack, cells.cj, cells.a * dx)
        mask = dslack > 0
        if np.any(mask):
            alpha = min(alpha, 0.99 * np.min(slack[mask] / dslack[mask]))
        drho = np.zeros(pa.n_types)
        np.add.at(drho, cells.ci, cells.g * dx)
        mask = drho < 0
        if np.any(mask):
            alpha = min(alpha, 0.99 * np.min(rho[mask] / -drho[mask]))
        if pa.me:
            drow = np.zeros(cells.n_rows)
            np.add.at(drow, cells.row, dx)
            srow = 1.0 - cells.rowsums(x)
            mask = drow > 0
            if np.any(mask):
                alpha = min(alpha, 0.99 * np.min(srow[mask] / drow[mask]))
        else:
            mask = dx > 0
            if np.any(mask):
                alpha = min(alpha, 0.99 * np.min((1.0 - x)[mask] / dx[mask]))

        phi0 = _barrier_value(cells, x, t)
        accepted = False
        while alpha > 1e-13:
            cand = x + alpha * dx
            if _barrier_value(cells, cand, t) <= phi0 - 1e-4 * alpha * nd:
                x = cand
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        # Stop on the per-user stationarity residual the certificate will
        # see, not just the Newton decrement.
        stat = np.max(np.abs(grad) / (t * pa.mass[cells.ci]))
        if stat <= 1e-11 or nd <= 1e-13:
            break
    return x


def _cho_factor(H):
    import scipy.linalg as sla
    return sla.cho_factor(H, check_finite=False)


def _cho_solve(fac, b):
    import scipy.linalg as sla
    return sla.cho_solve(fac, b, check_finite=False)


# ---------------------------------------------------------------------------
# Active-set polish
# ---------------------------------------------------------------------------

def _polish(cells: _Cells, x_bar: np.ndarray, delta_id: float):
    """Solve the first-order equality system on the active structure
    identified from the barrier point. Returns (x, lam, eta_rows or
    eta_cells) or None on failure."""
    pa = cells.pa
    x = x_bar.copy()
    x[cells.g <= 0] = 0.0  # non-desired cells never carry allocation

    demand = cells.demand(x)
    act_cap = np.nonzero(pa.cap - demand <= delta_id * np.maximum(1.0, pa.cap))[0]
    zero = x <= delta_id
    if pa.me:
        support = ~zero
        srow = 1.0 - cells.rowsums(x)
        full_rows = np.nonzero(srow <= delta_id * max(1, pa.m))[0]
        sup_idx = np.nonzero(support)[0]
        one_idx = np.array([], dtype=int)
    else:
        one = (1.0 - x <= delta_id) & ~zero
        support = ~zero & ~one
        sup_idx = np.nonzero(support)[0]
        one_idx = np.nonzero(one)[0]
        full_rows = np.array([], dtype=int)

    F = len(sup_idx)
    A = len(act_cap)
    R = len(full_rows)
    cap_pos = {int(j): k for k, j in enumerate(act_cap)}
    row_pos = {int(r): k for k, r in enumerate(full_rows)}

    xf = x[sup_idx].copy()
    lam = np.zeros(A)
    # Initialize lambda from the support cells' stationarity at the barrier point.
    rho0 = cells.rho(x)
    ratio0 = (pa.weight[cells.ci] * cells.uval * cells.dlt)[sup_idx] / rho0[cells.ci[sup_idx]]
    for k, j in enumerate(act_cap):
        vals = ratio0[cells.cj[sup_idx] == j]
        lam[k] = np.median(vals) if len(vals) else 0.0
    eta = np.zeros(R)

    fixed = np.zeros_like(x)
    fixed[one_idx] = 1.0

    def residual(z):
        xf_, lam_, eta_ = z[:F], z[F:F + A], z[F + A:]
        xv = fixed.copy()
        xv[sup_idx] = xf_
        rho = cells.rho(xv)
        if np.any(rho <= 0):
            return None, None, None
        res = []
        # Stationarity on support cells.
        lam_cell = np.zeros(F)
        for k in range(F):
            j = int(cells.cj[sup_idx[k]])
            lam_cell[k] = lam_[cap_pos[j]] if j in cap_pos else 0.0
        eta_cell = np.zeros(F)
        if pa.me:
            for k in range(F):
                r = int(cells.row[sup_idx[k]])
                if r in row_pos:
                    eta_cell[k] = eta_[row_pos[r]] / cells.sig[sup_idx[k]]
        i_sup = cells.ci[sup_idx]
        stat = (pa.weight[i_sup] * cells.uval[sup_idx] * cells.dlt[sup_idx]
                / rho[i_sup]) - lam_cell - eta_cell
        res.append(stat)
        # Active capacities.
        dem = cells.demand(xv)
        res.append((dem[act_cap] - pa.cap[act_cap]) / np.maximum(1.0, pa.cap[act_cap]))
        # Full simplex rows.
        if R:
            rows = cells.rowsums(xv)
            res.append(rows[full_rows] - 1.0)
        return np.concatenate(res), xv, rho

    def jacobian(z, rho):
        xf_, lam_, eta_ = z[:F], z[F:F + A], z[F + A:]
        nres = F + A + R
        J = np.zeros((nres, F + A + R))
        i_sup = cells.ci[sup_idx]
        coef = pa.weight[i_sup] * cells.uval[sup_idx] * cells.dlt[sup_idx]
        for k in range(F):
            i = int(i_sup[k])
            same = i_sup == i
            J[k, :F][same] = -coef[k] / rho[i] ** 2 * cells.g[sup_idx[same]]
            j = int(cells.cj[sup_idx[k]])
            if j in cap_pos:
                J[k, F + cap_pos[j]] = -1.0
            if pa.me:
                r = int(cells.row[sup_idx[k]])
                if r in row_pos:
                    J[k, F + A + row_pos[r]] = -1.0 / cells.sig[sup_idx[k]]
        for kk, j in enumerate(act_cap):
            mask = cells.cj[sup_idx] == j
            J[F + kk, :F][mask] = cells.a[sup_idx[mask]] / max(1.0, pa.cap[j])
        for kk, r in enumerate(full_rows):
            mask = cells.row[sup_idx] == r
            J[F + A + kk, :F][mask] = 1.0
        return J

    z = np.concatenate([xf, lam, eta])
    res, xv, rho = residual(z)
    if res is None:
        return None
    for _ in range(60):
        norm = np.max(np.abs(res))
        if norm <= 1e-12:
            break
        J = jacobian(z, rho)
        try:
            dz = np.linalg.lstsq(J, -res, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        step = 1.0
        improved = False
        base = np.linalg.norm(res)
        while step > 1e-10:
            cand = z + step * dz
            r2, xv2, rho2 = residual(cand)
            if r2 is not None and np.linalg.norm(r2) <= base * (1 - 1e-4 * step):
                z, res, xv, rho = cand, r2, xv2, rho2
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    if np.max(np.abs(res)) > 1e-9:
        return None

    xf = z[:F]
    if np.any(xf < -1e-9) or np.any(xf > 1 + 1e-9):
        return None
    x_out = fixed.copy()
    x_out[sup_idx] = np.clip(xf, 0.0, 1.0)

    # Re-pick the dual certificate by nonnegative least squares: the
    # stationarity system can be degenerate (several multiplier splits fit
    # the same primal), and the Newton step may leave the cone.
    lam = np.zeros(A)
    eta = np.zeros(R)
    if A + R:
        from scipy.optimize import nnls

        rho_f = cells.rho(x_out)
        ratio_f = (pa.weight[cells.ci] * cells.uval * cells.dlt
                   / rho_f[cells.ci])[sup_idx]
        design = np.zeros((F, A + R))
        for k in range(F):
            j = int(cells.cj[sup_idx[k]])
            if j in cap_pos:
                design[k, cap_pos[j]] = 1.0
            if pa.me:
                r = int(cells.row[sup_idx[k]])
                if r in row_pos:
                    design[k, A + row_pos[r]] = 1.0 / cells.sig[sup_idx[k]]
        try:
            duals, rnorm = nnls(design, ratio_f)
        except Exception:
            return None
        if F and rnorm > 1e-7 * max(1.0, float(np.abs(ratio_f).max())):
            return None
        lam = duals[:A]
        eta = duals[A:]
    lam_full = np.zeros(pa.m)
    lam_full[act_cap] = lam
    eta_rows = np.zeros(cells.n_rows)
    if R:
        eta_rows[full_rows] = eta
    return x_out, lam_full, eta_rows, set(one_idx.tolist())


def _assemble(cells: _Cells, x: np.ndarray, lam: np.ndarray,
              eta_rows: np.ndarray, one_cells: set) -> MlnwSolution:
    """Build the full dual set from a primal/dual core and package it."""
    pa = cells.pa
    rho = cells.rho(x)
    ratio = pa.weight[cells.ci] * cells.uval * cells.dlt / rho[cells.ci]

    eta_cell = np.zeros(cells.n)
    if pa.me:
        eta_tensor = np.zeros((pa.n_types, pa.qmax))
        row_of = np.full(cells.n_rows, -1, dtype=int)
        for c in range(cells.n):
            row_of[cells.row[c]] = c
        for r in range(cells.n_rows):
            c = row_of[r]
            eta_tensor[cells.ci[c], cells.cu[c]] = eta_rows[r]
        eta_cell = eta_rows[cells.row] / np.where(cells.sig > 0, cells.sig, 1.0)
    else:
        eta_tensor = np.zeros((pa.n_types, pa.m, pa.qmax))
        for c in one_cells:
            val = max(0.0, cells.sig[c] * (ratio[c] - lam[cells.cj[c]]))
            eta_tensor[cells.ci[c], cells.cj[c], cells.cu[c]] = val
        idx = np.array(sorted(one_cells), dtype=int)
        if len(idx):
            eta_cell[idx] = (eta_tensor[cells.ci[idx], cells.cj[idx], cells.cu[idx]]
                             / np.where(cells.sig[idx] > 0, cells.sig[idx], 1.0))

    iota = np.zeros((pa.n_types, pa.m, pa.qmax))
    at_zero = x <= 0
    vals = cells.sig * (lam[cells.cj] + eta_cell - ratio)
    vals = np.maximum(vals, 0.0)
    iota[cells.ci[at_zero], cells.cj[at_zero], cells.cu[at_zero]] = vals[at_zero]

    chi = LongRunAllocation(cells.to_tensor(x))
    objective = float(np.dot(cells.W, np.log(rho)))
    sol = MlnwSolution(
        chi=chi,
        lam=lam.copy(),
        eta=eta_tensor,
        iota=iota,
        reward_improvements=rho,
        objective=objective,
        residuals=None,  # filled by caller
    )
    return sol


def _with_report(problem: Problem, sol: MlnwSolution) -> MlnwSolution:
    report = kkt_residuals(problem, sol)
    return MlnwSolution(sol.chi, sol.lam, sol.eta, sol.iota,
                        sol.reward_improvements, sol.objective, report)


def solve_mlnw(problem: Problem, tol: float = DEFAULT_TOL,
               init_chi: Optional[np.ndarray] = None,
               max_newton: int = 60) -> MlnwSolution:
    """Maximize sum of mass * weight * log(reward improvement).

    The returned solution's KKT residuals are all at most ``tol``; otherwise
    a ``SolverError`` carrying the best residual report is raised. Cells
    whose reward gap is non-positive are reported with chi exactly zero
    (they are directions of indifference at the optimum).
    """
    if not tol > 0:
        raise StructuralError("tol must be positive")
    pa = as_arrays(problem)
    _check_improvable(pa)
    cells = _Cells(pa)

    x = _interior_start(cells, init_chi)
    best: Optional[MlnwSolution] = None
    t = 1.0
    for t_target in (1e8, 1e10):
        while t < t_target:
            t = min(t * 20.0, t_target)
            x = _newton_center(cells, x, t, max_newton)
        for delta_id in (1e-4, 1e-3, 1e-5, 3e-3):
            polished = _polish(cells, x, delta_id)
            if polished is None:
                continue
            xq, lam, eta_rows, ones = polished
            sol = _with_report(problem, _assemble(cells, xq, lam, eta_rows, ones))
            if best is None or sol.residuals.max_residual < best.residuals.max_residual:
                best = sol
            if sol.residuals.passes(tol):
                return sol
        # Raw barrier fallback for this stage.
        sol = _with_report(problem, _raw_solution(cells, x, t))
        if best is None or sol.residuals.max_residual < best.residuals.max_residual:
            best = sol
        if sol.residuals.passes(tol):
            return sol
    raise SolverError(
        f"KKT residuals {best.residuals.max_residual:.3e} exceed tol {tol:.1e} "
        "after the full barrier path",
        report=best.residuals if best else None,
    )


def _raw_solution(cells: _Cells, x_bar: np.ndarray, t: float) -> MlnwSolution:
    """Barrier point with its own path multipliers as per-user duals.

    The flat variables aggregate whole types, so per-user bound multipliers
    are the barrier terms divided by the type mass. Non-desired cells are
    snapped to zero with the bound multiplier that balances stationarity.
    """
    pa = cells.pa
    mass_c = pa.mass[cells.ci]
    junk = cells.g <= 0
    x = x_bar.copy()
    x[junk] = 0.0

    slack = pa.cap - cells.demand(x_bar)
    lam = 1.0 / (t * slack)
    rho = cells.rho(x)
    ratio = pa.weight[cells.ci] * cells.uval * cells.dlt / rho[cells.ci]

    if pa.me:
        srow = 1.0 - cells.rowsums(x_bar)
        eta_row_flat = 1.0 / (t * srow)
        eta_tensor = np.zeros((pa.n_types, pa.qmax))
        eta_cell = np.zeros(cells.n)
        for c in range(cells.n):
            per_user = eta_row_flat[cells.row[c]] / mass_c[c]
            eta_tensor[cells.ci[c], cells.cu[c]] = per_user
            eta_cell[c] = per_user
    else:
        eta_vals = 1.0 / (t * mass_c * np.maximum(1.0 - x_bar, 1e-300))
        eta_vals[junk] = 0.0
        eta_tensor = np.zeros((pa.n_types, pa.m, pa.qmax))
        eta_tensor[cells.ci, cells.cj, cells.cu] = eta_vals
        eta_cell = eta_vals

    iota_vals = 1.0 / (t * mass_c * np.maximum(x_bar, 1e-300))
    stat_balance = cells.sig * (lam[cells.cj] - ratio) + eta_cell
    iota_vals[junk] = np.maximum(stat_balance[junk], 0.0)
    iota = np.zeros((pa.n_types, pa.m, pa.qmax))
    iota[cells.ci, cells.cj, cells.cu] = iota_vals

    objective = float(np.dot(cells.W, np.log(rho)))
    return MlnwSolution(LongRunAllocation(cells.to_tensor(x)), lam, eta_tensor,
                        iota, rho, objective, None)


# ---------------------------------------------------------------------------
# KKT residual evaluation (the certification oracle)
# ---------------------------------------------------------------------------

def kkt_residuals(problem: Problem, solution: MlnwSolution) -> KktResidualReport:
    """Evaluate the four first-order blocks of the welfare program.

    Pure function of (problem, solution); raises on a candidate whose
    reward improvement is non-positive for some type, since the
    stationarity expressions divide by it.
    """
    pa = as_arrays(problem)
    chi = solution.chi.chi
    if chi.shape != (pa.n_types, pa.m, pa.qmax):
        raise StructuralError("solution chi shape does not match the problem")
    lam = np.asarray(solution.lam, dtype=float)
    eta = np.asarray(solution.eta, dtype=float)
    iota = np.asarray(solution.iota, dtype=float)
    if lam.shape != (pa.m,):
        raise StructuralError("lambda must have one entry per resource")
    if pa.me:
        if eta.shape != (pa.n_types, pa.qmax):
            raise StructuralError(
                "mutually exclusive problems take eta per (type, level)")
    elif eta.shape != (pa.n_types, pa.m, pa.qmax):
        raise StructuralError("eta must have shape (types, resources, levels)")
    if iota.shape != (pa.n_types, pa.m, pa.qmax):
        raise StructuralError("iota must have shape (types, resources, levels)")

    rho = np.einsum("iu,iu,iju,ij->i", pa.sigma, pa.u, chi, pa.delta)
    if np.any(rho <= 0):
        i = int(np.argmin(rho))
        raise ZeroDivisionError(
            f"candidate reward improvement for type {i} is {rho[i]:.3e}; "
            "stationarity is undefined"
        )

    worst = ("none",)
    stat = 0.0
    sigma3 = pa.sigma[:, None, :]
    u3 = pa.u[:, None, :]
    delta3 = pa.delta[:, :, None]
    eta3 = eta[:, None, :] if pa.me else eta
    resid = (-pa.weight[:, None, None] * sigma3 * u3 * delta3 / rho[:, None, None]
             + sigma3 * lam[None, :, None] + eta3 - iota)
    resid = resid * pa.valid[:, None, :]
    k = int(np.argmax(np.abs(resid)))
    stat = float(np.abs(resid).flat[k])
    worst_stat = ("stationarity",) + np.unravel_index(k, resid.shape)

    demand = np.einsum("i,iu,iju->j", pa.mass, pa.sigma, chi)
    primal_terms = [np.maximum(demand - pa.cap, 0.0),
                    np.maximum(-chi, 0.0).reshape(-1),
                    ]
    if pa.me:
        rows = chi.sum(axis=1)
        primal_terms.append(np.maximum(rows - 1.0, 0.0).reshape(-1))
    else:
        primal_terms.append(np.maximum(chi - 1.0, 0.0).reshape(-1))
    primal = float(max(t.max() if t.size else 0.0 for t in primal_terms))

    dual = float(max(np.maximum(-lam, 0.0).max(),
                     np.maximum(-eta, 0.0).max(),
                     np.maximum(-iota, 0.0).max()))

    comp_terms = [np.abs(lam * (demand - pa.cap))]
    if pa.me:
        rows = chi.sum(axis=1)
        comp_terms.append(np.abs(eta * (rows - 1.0) * pa.valid).reshape(-1))
    else:
        comp_terms.append(np.abs(eta * (chi - 1.0) * pa.valid[:, None, :]).reshape(-1))
    comp_terms.append(np.abs(iota * chi).reshape(-1))
    comp = float(max(t.max() if t.size else 0.0 for t in comp_terms))

    blocks = [("stationarity", stat), ("primal", primal),
              ("dual", dual), ("complementary", comp)]
    name, _ = max(blocks, key=lambda kv: kv[1])
    worst = worst_stat if name == "stationarity" else (name,)
    return KktResidualReport(stat, primal, dual, comp, worst)


# ---------------------------------------------------------------------------
# Figure-style baselines
# ---------------------------------------------------------------------------

def single_shot_nash_welfare(problem: Problem, tol: float = DEFAULT_TOL
                             ) -> LongRunAllocation:
    """Per-period static Nash welfare: urgency collapses to a constant by
    scale invariance, so the output is identical across urgency levels."""
    collapsed = Problem(
        capacities=problem.capacities,
        types=[UserType(t.mass, t.weight, UrgencyProcess([1.0], [1.0]),
                        t.rewards_on, t.rewards_off, name=t.name)
               for t in problem.types],
        mutually_exclusive=problem.mutually_exclusive,
        label=problem.label,
    )
    sol = solve_mlnw(collapsed, tol=tol)
    pa = as_arrays(problem)
    chi = np.zeros((pa.n_types, pa.m, pa.qmax))
    flat = sol.chi.chi[:, :, 0]
    for i in range(pa.n_types):
        chi[i, :, : int(pa.q[i])] = flat[i][:, None]
    return LongRunAllocation(chi)


def utilitarian(problem: Problem) -> LongRunAllocation:
    """Maximize total urgency-weighted improvement over the same feasible
    set: a linear program. Only strictly beneficial cells are ever
    allocated; ties at the marginal value split proportionally to
    sigma-mass (the non-exclusive case is solved exactly by a greedy
    fractional fill; the mutually exclusive case delegates to an LP)."""
    pa = as_arrays(problem)
    value = pa.u[:, None, :] * pa.delta[:, :, None]          # per-user value
    smass = (pa.mass[:, None] * pa.sigma)[:, None, :]        # capacity usage
    chi = np.zeros((pa.n_types, pa.m, pa.qmax))

    if not pa.me:
        for j in range(pa.m):
            vals = value[:, j, :]
            mask = (vals > 0) & pa.valid
            if not mask.any():
                continue
            flat_vals = vals[mask]
            flat_mass = (pa.mass[:, None] * pa.sigma)[mask]
            order = np.argsort(-flat_vals, kind="stable")
            remaining = pa.cap[j]
            k = 0
            idx_i, idx_u = np.nonzero(mask)
            out = np.zeros(len(flat_vals))
            while k < len(order) and remaining > 1e-15:
                v = flat_vals[order[k]]
                group = [order[k]]
                k += 1
                while k < len(order) and abs(flat_vals[order[k]] - v) <= 1e-12 * max(1.0, abs(v)):
                    group.append(order[k])
                    k += 1
                gmass = float(flat_mass[list(group)].sum())
                if gmass <= remaining:
                    for g in group:
                        out[g] = 1.0
                    remaining -= gmass
                else:
                    frac = remaining / gmass
                    for g in group:
                        out[g] = frac
                    remaining = 0.0
            chi[idx_i, j, idx_u] = out
    else:
        from scipy.optimize import linprog

        cells = [(i, j, u) for i in range(pa.n_types) for j in range(pa.m)
                 for u in range(int(pa.q[i])) if value[i, j, u] > 0]
        if cells:
            nv = len(cells)
            coef = np.array([pa.mass[i] * pa.sigma[i, u] * value[i, j, u]
                             for (i, j, u) in cells])
            a_cap = np.zeros((pa.m, nv))
            for k, (i, j, u) in enumerate(cells):
                a_cap[j, k] = pa.mass[i] * pa.sigma[i, u]
            rows = sorted({(i, u) for (i, j, u) in cells})
            a_row = np.zeros((len(rows), nv))
            for k, (i, j, u) in enumerate(cells):
                a_row[rows.index((i, u)), k] = 1.0
            res = linprog(
                -coef,
                A_ub=np.vstack([a_cap, a_row]),
                b_ub=np.concatenate([pa.cap, np.ones(len(rows))]),
                bounds=[(0, 1)] * nv,
                method="highs",
            )
            if not res.success:
                raise SolverError(f"utilitarian LP failed: {res.message}")
            xs = np.where(np.abs(res.x) < 1e-12, 0.0, res.x)
            for k, (i, j, u) in enumerate(cells):
                chi[i, j, u] = min(1.0, max(0.0, xs[k]))
    return LongRunAllocation(chi)
