"""Independent brute-force verifiers.

``mlnw_oracle`` maximizes the long-run Nash welfare objective by nested grid
refinement over the feasible polytope, with no shared code paths with the
interior-point solver. ``two_shot_check`` enumerates the two-day token game
exactly over rationals.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DimensionalityError, EmptyFeasibleSetError, StructuralError
from .model import LongRunAllocation, Problem, as_arrays

MAX_FREE_VARS = 6


def _free_cells(pa):
    """Cells (i, j, u) that can carry positive improvement: valid level and
    strictly positive reward gap. Everything else is fixed at zero."""
    cells = []
    for i in range(pa.n_types):
        for j in range(pa.m):
            if pa.delta[i, j] <= 0:
                continue
            for u in range(int(pa.q[i])):
                cells.append((i, j, u))
    return cells


def mlnw_oracle(problem: Problem, resolution: int = 10,
                points_per_dim: int = 9):
    """Grid-refinement search for the long-run Nash welfare optimum.

    ``resolution`` is the number of refinement rounds; each round shrinks
    the search box around the incumbent best point by a factor of 4 (with
    one grid-step of overlap). Returns ``(best_alloc, best_objective)``.

    Only instances with at most 6 free variables are accepted; the point of
    this oracle is exhaustiveness, not scale.
    """
    if resolution < 1:
        raise StructuralError("resolution must be >= 1")
    pa = as_arrays(problem)
    cells = _free_cells(pa)
    d = len(cells)
    if d > MAX_FREE_VARS:
        raise DimensionalityError(
            f"{d} free chi variables exceed the oracle cap of {MAX_FREE_VARS}"
        )
    if any(not any(c[0] == i for c in cells) for i in range(pa.n_types)):
        raise EmptyFeasibleSetError(
            "a type strictly desires no resource; no feasible point has "
            "positive improvement for every type"
        )

    # Per-cell coefficients.
    obj_coef = np.array([pa.sigma[i, u] * pa.u[i, u] * pa.delta[i, j]
                         for (i, j, u) in cells])
    cap_coef = np.array([pa.mass[i] * pa.sigma[i, u] for (i, j, u) in cells])
    cell_type = np.array([i for (i, j, u) in cells])
    cell_res = np.array([j for (i, j, u) in cells])
    weights = pa.mass * pa.weight

    # Row membership masks for the exclusive-mode simplex constraints.
    row_masks = []
    if pa.me:
        for i in range(pa.n_types):
            for u in range(int(pa.q[i])):
                mask = np.array([c[0] == i and c[2] == u for c in cells])
                if mask.any():
                    row_masks.append(mask)

    def _violation(scaled):
        worst = np.full(len(scaled), -np.inf)
        for j in range(pa.m):
            mask = cell_res == j
            if mask.any():
                dem = scaled[:, mask] @ cap_coef[mask]
                worst = np.maximum(worst, (dem - pa.cap[j]) / max(1.0, pa.cap[j]))
        if pa.me:
            for mask in row_masks:
                worst = np.maximum(worst, scaled[:, mask].sum(axis=1) - 1.0)
        return worst

    def evaluate(pts):
        """Project each point along its ray, clipping coordinates at one,
        until the first capacity or simplex face binds; then score it.

        Every free cell has a positive objective coefficient, so welfare is
        nondecreasing along the clipped ray and the projection is the best
        point the ray can reach. The clipped map passes exactly through
        corner optima that mix saturated and interior coordinates, so grid
        directions only need to be approximately right."""
        top = pts.max(axis=1)
        live = top > 0
        s_hi = np.where(live, 1.0 / np.where(pts > 0, pts, np.inf).min(axis=1), 0.0)
        # If even the fully clipped point (all ones) is feasible, take it.
        full = np.minimum(1.0, pts * s_hi[:, None])
        feasible_at_top = _violation(full) <= 0
        s_lo = np.zeros(len(pts))
        hi = s_hi.copy()
        for _ in range(24):
            mid = 0.5 * (s_lo + hi)
            bad = _violation(np.minimum(1.0, pts * mid[:, None])) > 0
            hi = np.where(bad, mid, hi)
            s_lo = np.where(bad, s_lo, mid)
        s = np.where(feasible_at_top, s_hi, s_lo)
        scaled = np.minimum(1.0, pts * s[:, None])
        scaled[~live] = 0.0
        rho = np.zeros((len(pts), pa.n_types))
        for i in range(pa.n_types):
            mask = cell_type == i
            rho[:, i] = scaled[:, mask] @ obj_coef[mask]
        ok = live & np.all(rho > 0, axis=1)
        vals = np.full(len(pts), -np.inf)
        if ok.any():
            vals[ok] = np.log(rho[ok]) @ weights
        return vals, scaled

    def linear_argmax(coef):
        """Exact maximizer of a linear objective over the feasible set."""
        s = np.zeros(d)
        if not pa.me:
            for j in range(pa.m):
                mask = cell_res == j
                if not mask.any():
                    continue
                idx = np.nonzero(mask)[0]
                order = idx[np.argsort(-coef[idx] / cap_coef[idx], kind="stable")]
                remaining = pa.cap[j]
                for kk in order:
                    if coef[kk] <= 0:
                        break
                    take = min(1.0, remaining / cap_coef[kk])
                    if take <= 0:
                        break
                    s[kk] = take
                    remaining -= take * cap_coef[kk]
        else:
            from scipy.optimize import linprog

            a_ub = []
            b_ub = []
            for j in range(pa.m):
                mask = cell_res == j
                if mask.any():
                    row = np.zeros(d)
                    row[mask] = cap_coef[mask]
                    a_ub.append(row)
                    b_ub.append(pa.cap[j])
            for mask in row_masks:
                row = np.zeros(d)
                row[mask] = 1.0
                a_ub.append(row)
                b_ub.append(1.0)
            res = linprog(-coef, A_ub=np.array(a_ub), b_ub=np.array(b_ub),
                          bounds=[(0, 1)] * d, method="highs")
            if res.success:
                s = np.clip(res.x, 0.0, 1.0)
        return s

    def objective_at(x):
        rho = np.array([x[cell_type == i] @ obj_coef[cell_type == i]
                        for i in range(pa.n_types)])
        if np.any(rho <= 0):
            return -np.inf, rho
        return float(np.log(rho) @ weights), rho

    def conditional_gradient(x0, val0, target_gap, max_steps=4000):
        """Ascent along exact linear maximizers with a duality-gap stop:
        for a concave objective, grad . (s - x) bounds the remaining
        suboptimality, so the returned value is certified to target_gap."""
        x = x0.copy()
        val, rho = objective_at(x)
        for _ in range(max_steps):
            grad = weights[cell_type] * obj_coef / rho[cell_type]
            s = linear_argmax(grad)
            direction = s - x
            gap = float(grad @ direction)
            if gap <= target_gap:
                break
            # Exact line search: the derivative along the segment is
            # monotone, so bisect it.
            glo, ghi = 0.0, 1.0
            dr = np.array([direction[cell_type == i] @ obj_coef[cell_type == i]
                           for i in range(pa.n_types)])
            for _ in range(50):
                gmid = 0.5 * (glo + ghi)
                slope = float(np.sum(weights * dr / (rho + gmid * dr)))
                if slope > 0:
                    glo = gmid
                else:
                    ghi = gmid
            gamma = glo if glo > 0 else ghi * 1e-3
            x = x + gamma * direction
            val, rho = objective_at(x)
        return x, val

    lo = np.zeros(d)
    hi = np.ones(d)
    best_x = None
    best_val = -np.inf
    ppd = max(3, int(points_per_dim))
    if d >= 5:
        ppd = min(ppd, 7)

    rounds = int(resolution)
    for r in range(rounds):
        axes = [np.linspace(lo[k], hi[k], ppd) for k in range(d)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        pts = grid.reshape(-1, d)
        vals, scaled = evaluate(pts)
        k_best = int(np.argmax(vals))
        if not np.isfinite(vals[k_best]):
            raise EmptyFeasibleSetError(
                "no grid direction gives every type a positive improvement")
        if vals[k_best] > best_val:
            best_val = float(vals[k_best])
            best_x = scaled[k_best].copy()

        # Shrink the box around the incumbent, factor-4 per round with a
        # step of overlap; snap to the variable bounds while they are near.
        step = (hi - lo) / (ppd - 1)
        half = np.maximum((hi - lo) / 8.0, 1.25 * step)
        center = best_x
        lo = np.clip(center - half, 0.0, 1.0)
        hi = np.clip(center + half, 0.0, 1.0)
        width = hi - lo
        hi[1.0 - hi <= width] = 1.0
        lo[lo <= (hi - lo)] = 0.0
        hi = np.maximum(hi, lo + 1e-15)

    if best_x is None or not np.isfinite(best_val):
        raise EmptyFeasibleSetError(
            "grid search found no point with positive improvement for all types"
        )
    # Certified polish from the grid incumbent; keeps the better point.
    x_cg, val_cg = conditional_gradient(best_x, best_val, target_gap=2e-5)
    if val_cg > best_val:
        best_val = val_cg
        best_x = x_cg
    chi = np.zeros((pa.n_types, pa.m, pa.qmax))
    for k, (i, j, u) in enumerate(cells):
        chi[i, j, u] = best_x[k]
    return LongRunAllocation(chi), best_val


# ---------------------------------------------------------------------------
# Two-day token game (exact enumeration)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TwoShotGameSpec:
    """Two-day token game: everyone holds one token, capacity seats per day,
    i.i.d. urgency (high with probability ``p_high``), random rationing, and
    only entrants pay their token."""

    n: int
    capacity: int
    u_low: Fraction
    u_high: Fraction
    p_high: Fraction

    def __init__(self, n, capacity, u_low, u_high, p_high):
        u_low = Fraction(u_low)
        u_high = Fraction(u_high)
        p_high = Fraction(p_high)
        if n < 2 or n > 8:
            raise StructuralError("n must be between 2 and 8 (exact enumeration)")
        if int(capacity) != capacity or capacity < 1:
            raise StructuralError("capacity must be a positive integer")
        if capacity >= n:
            raise StructuralError("capacity must be smaller than n")
        if not (0 < u_low < u_high):
            raise StructuralError("need 0 < u_low < u_high")
        if not (0 < p_high < 1):
            raise StructuralError("p_high must lie strictly between 0 and 1")
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "capacity", int(capacity))
        object.__setattr__(self, "u_low", u_low)
        object.__setattr__(self, "u_high", u_high)
        object.__setattr__(self, "p_high", p_high)


# Day-1 strategies: (bid when low, bid when high).
STRATEGIES = ((0, 0), (0, 1), (1, 0), (1, 1))
TRUTHFUL = (0, 1)


@dataclass(frozen=True)
class DominanceReport:
    dominant: bool
    equilibrium: bool
    min_margin_dominance: Fraction
    min_margin_equilibrium: Fraction
    worst_profile: tuple


def _expected_utility(spec: TwoShotGameSpec, strategy, others) -> Fraction:
    """Exact expected utility of player 0 playing ``strategy`` against the
    day-1 strategies ``others`` of players 1..n-1.

    Day-2 behavior is forced: token holders always bid (entering is worth a
    positive urgency, and tokens expire), and agents without a token cannot
    bid. Day-2 urgency integrates out to its mean.
    """
    n = spec.n
    c = spec.capacity
    p = spec.p_high
    u_bar = p * spec.u_high + (1 - p) * spec.u_low
    profile = (strategy,) + tuple(others)

    total = Fraction(0)
    for highs in itertools.product((0, 1), repeat=n):
        prob = Fraction(1)
        for h in highs:
            prob *= p if h else (1 - p)
        bidders = [i for i in range(n) if profile[i][highs[i]]]
        k = len(bidders)
        me_bids = 0 in bidders

        if k <= c:
            # Every bidder enters and pays.
            entered = me_bids
            holders = n - k
            u0 = spec.u_high if highs[0] else spec.u_low
            day1 = u0 if entered else Fraction(0)
            if entered:
                day2 = Fraction(0)
            else:
                win2 = Fraction(1) if holders <= c else Fraction(c, holders)
                day2 = win2 * u_bar
            total += prob * (day1 + day2)
        else:
            # Oversubscribed: c uniformly random bidders enter; the rest
            # keep their tokens.
            holders = n - c
            win2 = Fraction(1) if holders <= c else Fraction(c, holders)
            u0 = spec.u_high if highs[0] else spec.u_low
            if me_bids:
                p_enter = Fraction(c, k)
                day = p_enter * u0 + (1 - p_enter) * win2 * u_bar
            else:
                day = win2 * u_bar
            total += prob * day
    return total


def two_shot_check(spec: TwoShotGameSpec) -> DominanceReport:
    """Exhaustively check whether truthful day-1 bidding (bid iff urgent) is
    a dominant strategy, and whether it is a best response to the truthful
    profile (so that all-truthful is a Bayesian Nash equilibrium)."""
    n = spec.n
    others_space = itertools.product(STRATEGIES, repeat=n - 1)
    min_margin_dom = None
    worst_profile = None
    for others in others_space:
        truthful_eu = _expected_utility(spec, TRUTHFUL, others)
        for alt in STRATEGIES:
            if alt == TRUTHFUL:
                continue
            margin = truthful_eu - _expected_utility(spec, alt, others)
            if min_margin_dom is None or margin < min_margin_dom:
                min_margin_dom = margin
                worst_profile = others
    truthful_others = (TRUTHFUL,) * (n - 1)
    eq_eu = _expected_utility(spec, TRUTHFUL, truthful_others)
    min_margin_eq = min(
        eq_eu - _expected_utility(spec, alt, truthful_others)
        for alt in STRATEGIES if alt != TRUTHFUL
    )
    return DominanceReport(
        dominant=min_margin_dom >= 0,
        equilibrium=min_margin_eq >= 0,
        min_margin_dominance=min_margin_dom,
        min_margin_equilibrium=min_margin_eq,
        worst_profile=worst_profile,
    )
