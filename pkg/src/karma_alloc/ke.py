"""Karma equilibria: per-user problem, search, verification, construction.

The per-user problem is a small LP solved exactly by a dual scan: given a
multiplier on the long-run budget, a cell is bought when its urgency-scaled
reward gap beats the multiplier-scaled bid, and the multiplier is moved to
the breakpoint where spending meets the budget, blending the two adjacent
regimes at the marginal cells.

Equilibrium search follows bid tatonnement (multiplicative updates
proportional to relative excess demand with a decaying gain). Because user
optima are correspondences at equilibrium bids, exact clearing is recovered
by a periodic extraction step: classify near-tied cells, re-balance the tie
split with a small LP, then solve the full equilibrium equality system by
Gauss-Newton. Every candidate must pass ``verify_ke`` before it is returned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (NoKeFoundError, NotNashBalancedError, SolverError,
                     StructuralError)
from .mlnw import MlnwSolution, kkt_residuals
from .model import (LongRunAllocation, Problem, UserType, as_arrays,
                    reward_improvements)

DEFAULT_TOL = 1e-6


@dataclass(frozen=True)
class KarmaEquilibrium:
    """Stationary clearing bids plus optimal long-run allocations.

    ``eta`` follows the same shape convention as MLNW solutions: per
    (type, level) for mutually exclusive problems, per (type, resource,
    level) otherwise.
    """

    chi: LongRunAllocation
    bids: np.ndarray
    kappa: np.ndarray
    eta: np.ndarray
    reward_improvements: np.ndarray


@dataclass(frozen=True)
class CheckItem:
    name: str
    ok: bool
    value: float
    tolerance: float
    detail: str = ""


@dataclass(frozen=True)
class VerificationReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def failures(self) -> tuple:
        return tuple(c for c in self.checks if not c.ok)

    def summary(self) -> str:
        return "\n".join(
            f"[{'PASS' if c.ok else 'FAIL'}] {c.name}: {c.value:.3e} "
            f"(tol {c.tolerance:.1e}){' ' + c.detail if c.detail else ''}"
            for c in self.checks
        )


@dataclass(frozen=True)
class NashBalanceReport:
    per_type_ratio: np.ndarray
    constant_c: float
    max_deviation: float
    balanced: bool
    tolerance: float


@dataclass(frozen=True)
class CouplingReport:
    separate_sum: np.ndarray
    combined: np.ndarray
    slack: np.ndarray
    min_slack: float
    ke_first: KarmaEquilibrium
    ke_second: KarmaEquilibrium
    ke_combined: KarmaEquilibrium


# ---------------------------------------------------------------------------
# Karma user problem (exact LP solve)
# ---------------------------------------------------------------------------

def solve_user_problem(utype: UserType, bids: Sequence[float],
                       budget_share: float, mutually_exclusive: bool):
    """Exactly optimize one user's long-run allocation given stationary bids.

    Returns ``(chi, kappa, eta)`` where ``chi`` has shape (resources,
    levels), ``kappa`` is the budget multiplier, and ``eta`` holds the
    upper-bound multipliers: per cell for independent resources, per
    urgency level for mutually exclusive ones. Marginal ties are split by
    blending the two adjacent dual regimes, which allocates spending
    proportionally to sigma-mass and is deterministic.
    """
    b = np.asarray(bids, dtype=np.float64)
    if np.any(b < 0):
        raise StructuralError("bids must be nonnegative")
    if budget_share < 0:
        raise StructuralError("budget share must be nonnegative")
    m = utype.n_resources
    if b.shape != (m,):
        raise StructuralError(f"expected {m} bids, got {b.shape}")
    q = utype.n_levels
    sig = np.asarray(utype.urgency.probs)
    lev = np.asarray(utype.urgency.levels)
    delta = np.asarray(utype.rewards_on) - np.asarray(utype.rewards_off)
    v = lev[None, :] * delta[:, None]            # (m, q) per-cell value

    if mutually_exclusive:
        return _solve_ku_exclusive(v, sig, b, budget_share)
    return _solve_ku_independent(v, sig, b, budget_share)


def _solve_ku_independent(v, sig, b, budget):
    m, q = v.shape
    chi = np.zeros((m, q))
    eta = np.zeros((m, q))
    free = (b <= 0)[:, None] & (v > 0)
    chi[free] = 1.0
    paid = (b > 0)[:, None] & (v > 0)
    js, us = np.nonzero(paid)
    if len(js) == 0:
        kappa = 0.0
    else:
        ratio = v[js, us] / b[js]
        spend = sig[us] * b[js]
        order = np.argsort(-ratio, kind="stable")
        remaining = budget
        kappa = 0.0
        k = 0
        while k < len(order):
            r = ratio[order[k]]
            group = [order[k]]
            k += 1
            while k < len(order) and ratio[order[k]] >= r - 1e-12 * max(1.0, abs(r)):
                group.append(order[k])
                k += 1
            gspend = float(spend[list(group)].sum())
            if gspend <= remaining:
                for g in group:
                    chi[js[g], us[g]] = 1.0
                remaining -= gspend
            else:
                frac = remaining / gspend if gspend > 0 else 0.0
                for g in group:
                    chi[js[g], us[g]] = frac
                kappa = r
                remaining = 0.0
                break
        else:
            kappa = 0.0
    # Upper-bound multipliers from stationarity at fully bought cells.
    bought = chi >= 1.0
    eta[bought] = sig[None, :].repeat(m, axis=0)[bought] * np.maximum(
        v[bought] - kappa * b[:, None].repeat(q, axis=1)[bought], 0.0)
    return chi, float(kappa), eta


def _ku_regime(v, sig, b, kappa):
    """Canonical row choices at a fixed multiplier: per level pick the
    highest-gain resource when its gain is positive (ties: cheapest bid,
    then lowest index)."""
    m, q = v.shape
    chi = np.zeros((m, q))
    spend = 0.0
    for u in range(q):
        gains = v[:, u] - kappa * b
        gains[v[:, u] <= 0] = -np.inf
        gmax = gains.max()
        if gmax <= 0:
            continue
        tied = np.nonzero(gains >= gmax - 1e-12 * max(1.0, abs(gmax)))[0]
        j = tied[np.lexsort((tied, b[tied]))[0]]
        chi[j, u] = 1.0
        spend += sig[u] * b[j]
    return chi, spend


def _solve_ku_exclusive(v, sig, b, budget):
    m, q = v.shape
    desirable = v > 0
    if not desirable.any():
        return np.zeros((m, q)), 0.0, np.zeros(q)

    points = {0.0}
    for u in range(q):
        js = np.nonzero(desirable[:, u])[0]
        for j in js:
            if b[j] > 0:
                points.add(v[j, u] / b[j])
        for a_i in range(len(js)):
            for b_i in range(a_i + 1, len(js)):
                j1, j2 = js[a_i], js[b_i]
                if b[j1] != b[j2]:
                    kap = (v[j1, u] - v[j2, u]) / (b[j1] - b[j2])
                    if kap > 0:
                        points.add(float(kap))
    kappas = sorted(points)
    # Merge near-duplicates so regime midpoints are well defined.
    merged = [kappas[0]]
    for kap in kappas[1:]:
        if kap - merged[-1] > 1e-13 * max(1.0, kap):
            merged.append(kap)
    kappas = merged

    chi0, spend0 = _ku_regime(v, sig, b, 0.0)
    if spend0 <= budget:
        chi, kappa = chi0, 0.0
    else:
        chi = None
        prev_chi, prev_spend = chi0, spend0
        for idx in range(len(kappas)):
            hi = kappas[idx + 1] if idx + 1 < len(kappas) else kappas[idx] * 2 + 1.0
            mid = 0.5 * (kappas[idx] + hi)
            cur_chi, cur_spend = _ku_regime(v, sig, b, mid)
            if cur_spend <= budget:
                theta = ((prev_spend - budget) / (prev_spend - cur_spend)
                         if prev_spend > cur_spend else 1.0)
                chi = (1 - theta) * prev_chi + theta * cur_chi
                kappa = kappas[idx]
                break
            prev_chi, prev_spend = cur_chi, cur_spend
        if chi is None:  # pragma: no cover - spend hits zero eventually
            chi, kappa = _ku_regime(v, sig, b, kappas[-1] * 2 + 1.0)[0], kappas[-1]

    gains = np.where(desirable, v - kappa * b[:, None], -np.inf)
    gmax = gains.max(axis=0)
    eta = sig * np.maximum(np.where(np.isfinite(gmax), gmax, 0.0), 0.0)
    # Rows that are not fully allocated carry no multiplier.
    rows = chi.sum(axis=0)
    eta = np.where(rows >= 1.0 - 1e-9, eta, 0.0)
    return chi, float(kappa), eta


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def _spending(pa, chi, bids):
    """Per-user expected spending per type."""
    return np.einsum("iu,iju,j->i", pa.sigma, chi, bids)


def verify_ke(problem: Problem, candidate: KarmaEquilibrium,
              tol: float = DEFAULT_TOL,
              budget_tol: Optional[float] = None) -> VerificationReport:
    """Itemized check of individual optimality, clearing, and budget balance."""
    pa = as_arrays(problem)
    if budget_tol is None:
        budget_tol = tol
    chi = candidate.chi.chi
    b = np.asarray(candidate.bids, dtype=float)
    kap = np.asarray(candidate.kappa, dtype=float)
    eta = np.asarray(candidate.eta, dtype=float)
    if chi.shape != (pa.n_types, pa.m, pa.qmax) or b.shape != (pa.m,) \
            or kap.shape != (pa.n_types,):
        raise StructuralError("candidate shapes do not match the problem")
    if pa.me and eta.shape != (pa.n_types, pa.qmax):
        raise StructuralError("mutually exclusive eta must be (types, levels)")
    if not pa.me and eta.shape != (pa.n_types, pa.m, pa.qmax):
        raise StructuralError("eta must be (types, resources, levels)")

    checks = []
    box = max(float(np.max(np.maximum(-chi, 0.0))),
              float(np.max(np.maximum(chi - 1.0, 0.0))))
    if pa.me:
        rows = chi.sum(axis=1)
        box = max(box, float(np.max(np.maximum(rows - 1.0, 0.0))))
    checks.append(CheckItem("primal-feasibility", box <= tol, box, tol))

    neg = max(float(np.max(np.maximum(-b, 0.0))),
              float(np.max(np.maximum(-kap, 0.0))),
              float(np.max(np.maximum(-eta, 0.0))))
    checks.append(CheckItem("dual-nonnegativity", neg <= tol, neg, tol))

    v = pa.u[:, None, :] * pa.delta[:, :, None]
    sig3 = pa.sigma[:, None, :]
    eta3 = eta[:, None, :] if pa.me else eta
    iota_req = sig3 * kap[:, None, None] * b[None, :, None] + eta3 - sig3 * v
    iota_req = np.where(pa.valid[:, None, :], iota_req, 0.0)
    stat = float(np.max(np.maximum(-iota_req, 0.0)))
    checks.append(CheckItem(
        "ku-stationarity", stat <= tol, stat, tol,
        "implied chi>=0 multiplier must be nonnegative"))

    comp_terms = [np.abs(iota_req * chi).max()]
    if pa.me:
        rows = chi.sum(axis=1)
        comp_terms.append(np.abs(eta * (rows - 1.0) * pa.valid).max())
    else:
        comp_terms.append(np.abs(eta * (chi - 1.0) * pa.valid[:, None, :]).max())
    spend = _spending(pa, chi, b)
    pool = float(np.dot(b, pa.cap))
    share = pa.weight / pa.total_weight * pool
    comp_terms.append(np.abs(kap * (spend - share)).max())
    comp = float(max(comp_terms))
    checks.append(CheckItem("ku-complementarity", comp <= tol, comp, tol))

    bal = float(np.max(np.abs(spend - share)))
    checks.append(CheckItem("budget-balance", bal <= budget_tol, bal, budget_tol))

    demand = np.einsum("i,iu,iju->j", pa.mass, pa.sigma, chi)
    over = float(np.max(np.maximum(demand - pa.cap, 0.0)))
    checks.append(CheckItem("capacity", over <= tol, over, tol))
    active = b > tol * max(1.0, float(b.max(initial=0.0)))
    clearing = float(np.max(np.abs((demand - pa.cap)[active]))) if active.any() else 0.0
    checks.append(CheckItem(
        "resource-clearing", clearing <= tol * max(1.0, float(pa.cap.max())),
        clearing, tol * max(1.0, float(pa.cap.max())),
        "positive-bid resources must clear at capacity"))

    rho = reward_improvements(problem, candidate.chi)
    rho_min = float(rho.min())
    checks.append(CheckItem("improvements-positive", rho_min > 0, rho_min, 0.0,
                            "every type must strictly beat the benchmark"))
    return VerificationReport(tuple(checks))


# ---------------------------------------------------------------------------
# Nash balance and the MLNW -> KE construction
# ---------------------------------------------------------------------------

def check_nash_balance(problem: Problem, mlnw: MlnwSolution,
                       tol: float = 1e-8) -> NashBalanceReport:
    """Per-user sums of chi<=1 multipliers divided by weights must agree."""
    pa = as_arrays(problem)
    eta = np.asarray(mlnw.eta, dtype=float)
    if pa.me:
        totals = eta.sum(axis=1)
    else:
        totals = eta.sum(axis=(1, 2))
    ratios = totals / pa.weight
    c = float(ratios.mean())
    max_dev = float(np.max(np.abs(ratios - c))) if len(ratios) else 0.0
    return NashBalanceReport(ratios, c, max_dev, max_dev <= tol, tol)


def construct_ke_from_mlnw(problem: Problem, mlnw: MlnwSolution, alpha: float,
                           tol: float = DEFAULT_TOL,
                           nb_tol: float = 1e-8) -> KarmaEquilibrium:
    """Scale the welfare-optimal multipliers into stationary clearing bids.

    Requires Nash balance; the bids are ``alpha`` times the capacity
    multipliers, each user's budget multiplier is its improvement over
    ``alpha`` times its weight, and the upper-bound multipliers are scaled
    per type by improvement over weight. The result must verify as a KE.
    """
    if not alpha > 0:
        raise StructuralError("alpha must be positive")
    report = kkt_residuals(problem, mlnw)
    if not report.passes(tol):
        raise SolverError(
            f"MLNW candidate residuals {report.max_residual:.3e} exceed {tol:.1e}",
            report=report)
    nb = check_nash_balance(problem, mlnw, nb_tol)
    if not nb.balanced:
        raise NotNashBalancedError(
            f"per-type multiplier ratios deviate by {nb.max_deviation:.3e} "
            f"(tol {nb_tol:.1e})", report=nb)
    pa = as_arrays(problem)
    rho = np.asarray(mlnw.reward_improvements, dtype=float)
    bids = alpha * np.asarray(mlnw.lam, dtype=float)
    kappa = rho / (alpha * pa.weight)
    scale = rho / pa.weight
    eta = np.asarray(mlnw.eta, dtype=float) * (scale[:, None] if pa.me
                                               else scale[:, None, None])
    cand = KarmaEquilibrium(
        chi=mlnw.chi, bids=bids, kappa=kappa, eta=eta,
        reward_improvements=rho,
    )
    vr = verify_ke(problem, cand, tol)
    if not vr.passed:
        raise SolverError(
            "Theorem construction failed verification:\n" + vr.summary())
    return cand


# ---------------------------------------------------------------------------
# Equilibrium search
# ---------------------------------------------------------------------------

def _all_user_solves(problem: Problem, pa, bids, pool):
    chis = np.zeros((pa.n_types, pa.m, pa.qmax))
    kappas = np.zeros(pa.n_types)
    etas = []
    for i, t in enumerate(problem.types):
        share = t.weight / pa.total_weight * pool
        chi_i, kap_i, eta_i = solve_user_problem(t, bids, share,
                                                 problem.mutually_exclusive)
        chis[i, :, : t.n_levels] = chi_i
        kappas[i] = kap_i
        etas.append(eta_i)
    return chis, kappas, etas


def _structure(pa, bids, kappas, eps):
    """Classify cells against the dual gains at (bids, kappas).

    Returns per-cell status 0 (zero), 1 (forced one; independent mode
    only), 2 (support/free), and per-row status for exclusive mode:
    0 empty, 1 full, 2 marginal.
    """
    v = pa.u[:, None, :] * pa.delta[:, :, None]
    gains = v - kappas[:, None, None] * bids[None, :, None]
    scale = np.maximum(1.0, np.max(np.abs(v), axis=(1, 2)))[:, None, None]
    status = np.zeros((pa.n_types, pa.m, pa.qmax), dtype=np.int8)
    rowstat = np.zeros((pa.n_types, pa.qmax), dtype=np.int8)
    desirable = (v > 0) & pa.valid[:, None, :]
    if pa.me:
        g_mask = np.where(desirable, gains, -np.inf)
        gmax = g_mask.max(axis=1)
        for i in range(pa.n_types):
            for uu in range(int(pa.q[i])):
                if not np.isfinite(gmax[i, uu]):
                    continue
                s = scale[i, 0, 0]
                if gmax[i, uu] > eps * s:
                    rowstat[i, uu] = 1
                elif gmax[i, uu] >= -eps * s:
                    rowstat[i, uu] = 2
                else:
                    continue
                sup = desirable[i, :, uu] & (
                    gains[i, :, uu] >= gmax[i, uu] - eps * s)
                status[i, sup, uu] = 2
    else:
        forced = desirable & (gains > eps * scale)
        freec = desirable & (np.abs(gains) <= eps * scale)
        status[forced] = 1
        status[freec] = 2
    return status, rowstat


def _tie_lp(pa, bids, kappas, status, rowstat, active):
    """Feasibility LP over the optimal faces: pick tie splits that clear
    active resources and hit budget equalities. Returns chi or None."""
    from scipy.optimize import linprog

    var_cells = [tuple(c) for c in np.argwhere(status == 2)]
    nv = len(var_cells)
    n_slack = int(active.sum())
    act_idx = np.nonzero(active)[0]
    cols = nv + 2 * n_slack

    a_eq = []
    b_eq = []
    a_ub = []
    b_ub = []

    fixed = np.zeros((pa.n_types, pa.m, pa.qmax))
    fixed[status == 1] = 1.0

    fixed_dem = np.einsum("i,iu,iju->j", pa.mass, pa.sigma, fixed)
    for k, j in enumerate(act_idx):
        row = np.zeros(cols)
        for idx, (i, jj, uu) in enumerate(var_cells):
            if jj == j:
                row[idx] = pa.mass[i] * pa.sigma[i, uu]
        row[nv + 2 * k] = -1.0
        row[nv + 2 * k + 1] = 1.0
        a_eq.append(row)
        b_eq.append(pa.cap[j] - fixed_dem[j])
    for j in range(pa.m):
        if active[j]:
            continue
        row = np.zeros(cols)
        hit = False
        for idx, (i, jj, uu) in enumerate(var_cells):
            if jj == j:
                row[idx] = pa.mass[i] * pa.sigma[i, uu]
                hit = True
        if hit:
            a_ub.append(row)
            b_ub.append(pa.cap[j] - fixed_dem[j])

    pool = float(np.dot(bids, pa.cap))
    for i in range(pa.n_types):
        row = np.zeros(cols)
        hit = False
        for idx, (ii, jj, uu) in enumerate(var_cells):
            if ii == i:
                row[idx] = pa.sigma[i, uu] * bids[jj]
                hit = True
        fixed_spend = float(np.einsum("ju,u,j->", fixed[i], pa.sigma[i], bids))
        target = pa.weight[i] / pa.total_weight * pool - fixed_spend
        if kappas[i] > 1e-12:
            a_eq.append(row)
            b_eq.append(target)
        elif hit:
            a_ub.append(row)
            b_ub.append(target)

    if pa.me:
        for i in range(pa.n_types):
            for uu in range(int(pa.q[i])):
                if rowstat[i, uu] == 0:
                    continue
                row = np.zeros(cols)
                hit = False
                for idx, (ii, jj, u2) in enumerate(var_cells):
                    if ii == i and u2 == uu:
                        row[idx] = 1.0
                        hit = True
                if not hit:
                    continue
                rhs = 1.0 - float(fixed[i, :, uu].sum())
                if rowstat[i, uu] == 1:
                    a_eq.append(row)
                    b_eq.append(rhs)
                else:
                    a_ub.append(row)
                    b_ub.append(rhs)

    cost = np.zeros(cols)
    cost[nv:] = 1.0
    res = linprog(
        cost,
        A_eq=np.array(a_eq) if a_eq else None,
        b_eq=np.array(b_eq) if b_eq else None,
        A_ub=np.array(a_ub) if a_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        bounds=[(0, 1)] * nv + [(0, None)] * (2 * n_slack),
        method="highs",
    )
    if not res.success or res.fun > 1e-7 * max(1.0, float(pa.cap.max())):
        return None
    chi = fixed
    for idx, (i, jj, uu) in enumerate(var_cells):
        chi[i, jj, uu] = min(1.0, max(0.0, res.x[idx]))
    return chi, var_cells


def _gauss_newton_ke(problem, pa, bids0, kappas0, status, rowstat, chi0,
                     var_cells, active, normalize_pool):
    """Solve the stationarity/budget/clearing equality system."""
    act_idx = np.nonzero(active)[0]
    A = len(act_idx)
    nT = pa.n_types
    v = pa.u[:, None, :] * pa.delta[:, :, None]

    stat_cells = [tuple(c) for c in np.argwhere(status == 2)]
    if not pa.me:
        stat_cells = [c for c in stat_cells]  # free cells only
    full_rows = [(i, uu) for i in range(nT) for uu in range(int(pa.q[i]))
                 if pa.me and rowstat[i, uu] == 1]
    row_pos = {r: k for k, r in enumerate(full_rows)}
    bpos = {int(j): k for k, j in enumerate(act_idx)}
    F = len(var_cells)
    R = len(full_rows)

    def unpack(z):
        bz = np.zeros(pa.m)
        bz[act_idx] = z[:A]
        kz = z[A:A + nT]
        ez = z[A + nT:A + nT + R]
        xz = z[A + nT + R:]
        chi = np.zeros((nT, pa.m, pa.qmax))
        chi[status == 1] = 1.0
        for k, (i, j, uu) in enumerate(var_cells):
            chi[i, j, uu] = xz[k]
        return bz, kz, ez, chi

    def residual(z):
        bz, kz, ez, chi = unpack(z)
        res = []
        for (i, j, uu) in stat_cells:
            e_term = 0.0
            if pa.me and (i, uu) in row_pos:
                e_term = ez[row_pos[(i, uu)]] / pa.sigma[i, uu]
            res.append(v[i, j, uu] - kz[i] * bz[j] - e_term)
        dem = np.einsum("i,iu,iju->j", pa.mass, pa.sigma, chi)
        for j in act_idx:
            res.append((dem[j] - pa.cap[j]) / max(1.0, pa.cap[j]))
        pool = float(np.dot(bz, pa.cap))
        spend = _spending(pa, chi, bz)
        for i in range(nT):
            if kappas0[i] > 1e-12:
                res.append(spend[i] - pa.weight[i] / pa.total_weight * pool)
        for (i, uu) in full_rows:
            res.append(chi[i, :, uu].sum() - 1.0)
        if normalize_pool:
            res.append((pool - pa.total_weight) / max(1.0, pa.total_weight))
        return np.array(res), (bz, kz, ez, chi, dem, spend, pool)

    def jacobian(z):
        bz, kz, ez, chi = unpack(z)
        rows = []
        ncols = A + nT + R + F
        for (i, j, uu) in stat_cells:
            row = np.zeros(ncols)
            if int(j) in bpos:
                row[bpos[int(j)]] = -kz[i]
            row[A + i] = -bz[j]
            if pa.me and (i, uu) in row_pos:
                row[A + nT + row_pos[(i, uu)]] = -1.0 / pa.sigma[i, uu]
            rows.append(row)
        for j in act_idx:
            row = np.zeros(ncols)
            for k, (ii, jj, uu) in enumerate(var_cells):
                if jj == j:
                    row[A + nT + R + k] = pa.mass[ii] * pa.sigma[ii, uu] / max(1.0, pa.cap[j])
            rows.append(row)
        pool_grad = np.zeros(ncols)
        for k, j in enumerate(act_idx):
            pool_grad[k] = pa.cap[j]
        for i in range(nT):
            if kappas0[i] <= 1e-12:
                continue
            row = np.zeros(ncols)
            for k, j in enumerate(act_idx):
                row[k] = float(np.dot(pa.sigma[i], chi[i, j, :]))
            row -= pa.weight[i] / pa.total_weight * pool_grad
            for k, (ii, jj, uu) in enumerate(var_cells):
                if ii == i:
                    row[A + nT + R + k] = pa.sigma[i, uu] * bz[jj]
            rows.append(row)
        for (i, uu) in full_rows:
            row = np.zeros(ncols)
            for k, (ii, jj, u2) in enumerate(var_cells):
                if ii == i and u2 == uu:
                    row[A + nT + R + k] = 1.0
            rows.append(row)
        if normalize_pool:
            rows.append(pool_grad / max(1.0, pa.total_weight))
        return np.array(rows)

    x0 = np.array([chi0[i, j, uu] for (i, j, uu) in var_cells])
    z = np.concatenate([bids0[act_idx], kappas0,
                        np.zeros(R), x0])
    res, parts = residual(z)
    for _ in range(60):
        if np.max(np.abs(res)) <= 1e-12:
            break
        J = jacobian(z)
        try:
            dz = np.linalg.lstsq(J, -res, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        base = np.linalg.norm(res)
        step = 1.0
        ok = False
        while step > 1e-10:
            cand = z + step * dz
            r2, parts2 = residual(cand)
            if np.linalg.norm(r2) <= base * (1 - 1e-4 * step):
                z, res, parts = cand, r2, parts2
                ok = True
                break
            step *= 0.5
        if not ok:
            break
    if np.max(np.abs(res)) > 1e-9:
        return None
    bz, kz, ez, chi, dem, spend, pool = parts
    if np.any(bz < -1e-9) or np.any(kz < -1e-9) or (len(ez) and np.any(ez < -1e-9)):
        return None
    chi = np.clip(chi, 0.0, 1.0)
    eta_rows = {r: max(0.0, e) for r, e in zip(full_rows, ez)}
    return np.maximum(bz, 0.0), np.maximum(kz, 0.0), eta_rows, chi


def _refit_prices(pa, b0, kappas0, active, eps_wide=0.05):
    """Least-squares polish of (bids, budget multipliers) on the tie
    structure: all near-best cells of a row share one common gain (zero for
    partially allocated rows, the row multiplier otherwise). Run before
    classification so that near-equilibrium tatonnement noise does not
    corrupt the active-set guess. Returns (bids, kappas) or None."""
    v = pa.u[:, None, :] * pa.delta[:, :, None]
    desirable = (v > 0) & pa.valid[:, None, :]
    scale = np.maximum(1.0, np.max(np.abs(v), axis=(1, 2)))
    act_idx = np.nonzero(active)[0]
    bpos = {int(j): k for k, j in enumerate(act_idx)}
    A = len(act_idx)
    nT = pa.n_types

    cells = []   # (i, j, u, row_id or -1)
    rows = []
    if pa.me:
        gains = v - kappas0[:, None, None] * b0[None, :, None]
        g_mask = np.where(desirable, gains, -np.inf)
        gmax = g_mask.max(axis=1)
        for i in range(nT):
            for uu in range(int(pa.q[i])):
                if not np.isfinite(gmax[i, uu]) or gmax[i, uu] < -eps_wide * scale[i]:
                    continue
                rid = len(rows)
                rows.append((i, uu))
                for j in range(pa.m):
                    if desirable[i, j, uu] and gains[i, j, uu] >= gmax[i, uu] - eps_wide * scale[i]:
                        cells.append((i, j, uu, rid))
    else:
        gains = v - kappas0[:, None, None] * b0[None, :, None]
        for i in range(nT):
            for j in range(pa.m):
                for uu in range(int(pa.q[i])):
                    if desirable[i, j, uu] and abs(gains[i, j, uu]) <= eps_wide * scale[i]:
                        cells.append((i, j, uu, -1))
    if not cells:
        return None
    R = len(rows)

    # A tiny pull of the row gains toward zero resolves degenerate tie
    # families in favor of partially allocated rows, which complementarity
    # requires; genuinely bound rows overpower it by eight orders.
    reg = 1e-4

    def residual(z):
        bz = np.zeros(pa.m)
        bz[act_idx] = z[:A]
        kz = z[A:A + nT]
        gz = z[A + nT:]
        res = [v[i, j, uu] - kz[i] * bz[j] - (gz[r] if r >= 0 else 0.0)
               for (i, j, uu, r) in cells]
        res.append((float(np.dot(bz, pa.cap)) - pa.total_weight)
                   / max(1.0, pa.total_weight))
        res.extend(reg * gz)
        return np.asarray(res)

    def jacobian(z):
        bz = np.zeros(pa.m)
        bz[act_idx] = z[:A]
        kz = z[A:A + nT]
        J = np.zeros((len(cells) + 1 + R, A + nT + R))
        for k, (i, j, uu, r) in enumerate(cells):
            if int(j) in bpos:
                J[k, bpos[int(j)]] = -kz[i]
            J[k, A + i] = -bz[j]
            if r >= 0:
                J[k, A + nT + r] = -1.0
        for kk, j in enumerate(act_idx):
            J[len(cells), kk] = pa.cap[j] / max(1.0, pa.total_weight)
        for r in range(R):
            J[len(cells) + 1 + r, A + nT + r] = reg
        return J

    z = np.concatenate([b0[act_idx], kappas0, np.zeros(R)])
    res = residual(z)
    for _ in range(40):
        if np.max(np.abs(res)) <= 1e-12:
            break
        J = jacobian(z)
        try:
            dz = np.linalg.lstsq(J, -res, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        base = np.linalg.norm(res)
        step = 1.0
        ok = False
        while step > 1e-8:
            cand = z + step * dz
            r2 = residual(cand)
            if np.linalg.norm(r2) <= base * (1 - 1e-4 * step) or \
                    np.linalg.norm(r2) < base:
                z, res = cand, r2
                ok = True
                break
            step *= 0.5
        if not ok:
            break
    bz = np.zeros(pa.m)
    bz[act_idx] = z[:A]
    kz = z[A:A + nT]
    if np.any(bz < -1e-9) or np.any(kz < -1e-9):
        return None
    return np.maximum(bz, 0.0), np.maximum(kz, 0.0)


def _extract_ke(problem, pa, bids, tol):
    """Try to turn near-equilibrium bids into an exact verified KE."""
    pool = float(np.dot(bids, pa.cap))
    _, kappas, _ = _all_user_solves(problem, pa, bids, pool)
    bmax = float(bids.max(initial=0.0))
    v = pa.u[:, None, :] * pa.delta[:, :, None]
    desirable = (v > 0) & pa.valid[:, None, :]
    undesired = ~desirable.any(axis=(0, 2))
    b_work = bids.copy()
    b_work[undesired] = 0.0
    active = b_work > 1e-9 * max(1.0, bmax)

    for wide in (0.02, 0.05, 0.1):
        refit = _refit_prices(pa, b_work, kappas, active, eps_wide=wide)
        if refit is None:
            continue
        b_ref, kap_ref = refit
        cand = _extract_at(problem, pa, b_ref, kap_ref, active, tol)
        if cand is not None:
            return cand
    return _extract_at(problem, pa, b_work, kappas, active, tol)


def _extract_at(problem, pa, b_work, kappas, active, tol):
    v = pa.u[:, None, :] * pa.delta[:, :, None]
    for eps in (1e-8, 1e-6, 1e-4, 1e-3, 1e-2):
        status, rowstat = _structure(pa, b_work, kappas, eps)
        lp = _tie_lp(pa, b_work, kappas, status, rowstat, active)
        if lp is None:
            continue
        chi0, var_cells = lp
        gn = _gauss_newton_ke(problem, pa, b_work, kappas, status, rowstat,
                              chi0, var_cells, active, normalize_pool=True)
        if gn is None:
            continue
        bz, kz, eta_rows, chi = gn
        if pa.me:
            eta = np.zeros((pa.n_types, pa.qmax))
            for (i, uu), e in eta_rows.items():
                eta[i, uu] = e
        else:
            eta = np.zeros((pa.n_types, pa.m, pa.qmax))
            forced = status == 1
            gains = v - kz[:, None, None] * bz[None, :, None]
            eta[forced] = (pa.sigma[:, None, :].repeat(pa.m, axis=1)[forced]
                           * np.maximum(gains[forced], 0.0))
        alloc = LongRunAllocation(chi)
        cand = KarmaEquilibrium(
            chi=alloc, bids=bz, kappa=kz, eta=eta,
            reward_improvements=reward_improvements(problem, alloc),
        )
        vr = verify_ke(problem, cand, tol)
        if vr.passed:
            return cand
    return None


def find_ke(problem: Problem, tol: float = DEFAULT_TOL,
            max_iter: int = 100_000, gamma0: float = 0.1) -> KarmaEquilibrium:
    """Search for a karma equilibrium by bid tatonnement.

    Bids move multiplicatively with relative excess demand under a
    decaying gain and are renormalized so the redistribution pool equals
    the total access-right mass (bids are scale-free, so this only fixes
    units). Since user optima are set-valued at equilibrium, a periodic
    extraction step resolves ties exactly; the returned equilibrium always
    passes ``verify_ke`` at ``tol``. Raises ``NoKeFoundError`` with final
    diagnostics otherwise.
    """
    pa = as_arrays(problem)
    for i in range(pa.n_types):
        if not np.any(pa.delta[i] > 0):
            raise NoKeFoundError(
                f"type {i} strictly desires no resource", iterations=0)
    pool_target = pa.total_weight
    b = np.full(pa.m, pool_target / float(pa.cap.sum()))
    consec = 0
    extract_at = 200
    last = None
    for k in range(max_iter):
        chis, kappas, _ = _all_user_solves(problem, pa, b, pool_target)
        dem = np.einsum("i,iu,iju->j", pa.mass, pa.sigma, chis)
        z = (dem - pa.cap) / pa.cap
        spend = _spending(pa, chis, b)
        imbalance = np.abs(spend - pa.weight / pa.total_weight * pool_target)
        last = (z, imbalance, b.copy())
        converged = float(np.max(np.abs(z))) < tol and float(imbalance.max()) < tol
        consec = consec + 1 if converged else 0
        if consec >= 10 or k >= extract_at:
            cand = _extract_ke(problem, pa, b, tol)
            if cand is not None:
                return cand
            if consec >= 10:
                consec = 0
            extract_at = k + 250
        gamma = gamma0 / (1.0 + k / 100.0)
        b = b * (1.0 + gamma * np.clip(z, -0.9, 5.0))
        b *= pool_target / float(np.dot(b, pa.cap))
    cand = _extract_ke(problem, pa, b, tol)
    if cand is not None:
        return cand
    z, imbalance, b_last = last if last is not None else (None, None, b)
    raise NoKeFoundError(
        f"tatonnement did not reach a verifiable equilibrium in {max_iter} "
        "iterations",
        excess_demand=z, budget_imbalance=imbalance, bids=b_last,
        iterations=max_iter)


# ---------------------------------------------------------------------------
# Coupling comparison
# ---------------------------------------------------------------------------

def _same_type_structure(a: Problem, b: Problem) -> bool:
    if a.n_types != b.n_types:
        return False
    for ta, tb in zip(a.types, b.types):
        if (ta.mass != tb.mass or ta.weight != tb.weight
                or ta.urgency.levels != tb.urgency.levels
                or ta.urgency.probs != tb.urgency.probs):
            return False
    return True


def merge_problems(a: Problem, b: Problem, label: str = "") -> Problem:
    """Combine two economies over the same population into one with the
    union of their (disjoint) resources."""
    if not _same_type_structure(a, b):
        raise StructuralError("economies must share an identical type structure")
    if a.mutually_exclusive or b.mutually_exclusive:
        raise StructuralError("coupled economies must not be mutually exclusive")
    types = tuple(
        UserType(ta.mass, ta.weight, ta.urgency,
                 ta.rewards_on + tb.rewards_on,
                 ta.rewards_off + tb.rewards_off,
                 name=ta.name)
        for ta, tb in zip(a.types, b.types)
    )
    return Problem(a.capacities + b.capacities, types,
                   mutually_exclusive=False,
                   label=label or f"{a.label}+{b.label}")


def _subset_improvements(problem: Problem, alloc: LongRunAllocation,
                         resources) -> np.ndarray:
    pa = as_arrays(problem)
    mask = np.zeros(pa.m)
    mask[list(resources)] = 1.0
    return np.einsum("iu,iu,iju,ij,j->i", pa.sigma, pa.u, alloc.chi,
                     pa.delta, mask)


def compare_coupling(problem_a: Problem, problem_b: Problem,
                     tol: float = DEFAULT_TOL,
                     max_iter: int = 100_000) -> CouplingReport:
    """Compare separate karma economies against the merged economy.

    Solves three equilibria and reports, per type, the sum of separate
    reward improvements versus the combined improvement; the combined
    economy can only help (the minimum slack should be nonnegative up to
    tolerance). ``NoKeFoundError`` from any solve propagates, tagged with
    which economy failed.
    """
    merged = merge_problems(problem_a, problem_b)

    def _solve(p: Problem, tag: str) -> KarmaEquilibrium:
        try:
            return find_ke(p, tol=tol, max_iter=max_iter)
        except NoKeFoundError as exc:
            raise NoKeFoundError(
                f"no equilibrium for the {tag} economy: {exc}",
                excess_demand=exc.excess_demand,
                budget_imbalance=exc.budget_imbalance,
                bids=exc.bids, iterations=exc.iterations) from exc

    ke_a = _solve(problem_a, "first")
    ke_b = _solve(problem_b, "second")
    ke_m = _solve(merged, "combined")
    sep = (np.asarray(ke_a.reward_improvements)
           + np.asarray(ke_b.reward_improvements))
    combined = np.asarray(ke_m.reward_improvements)
    slack = combined - sep
    return CouplingReport(
        separate_sum=sep, combined=combined, slack=slack,
        min_slack=float(slack.min()),
        ke_first=ke_a, ke_second=ke_b, ke_combined=ke_m,
    )
